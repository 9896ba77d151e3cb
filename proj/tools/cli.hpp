#pragma once

#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "picofw/net.hpp"

namespace fwctl {

// args excludes the program name. Returns 0 on success, 1 on a usage
// error, 2 on a runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "<proto> <src>[:<sport>] > <dst>[:<dport>] [syn|ack|fin|rst]* [fwd|local|out]"
// Ports are optional only for icmp. Throws picofw::ParseError.
picofw::Packet parse_packet_literal(std::string_view text);

}  // namespace fwctl
