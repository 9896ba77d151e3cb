#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>

#include "picofw/engine.hpp"
#include "picofw/net.hpp"
#include "picofw/ruleset.hpp"

namespace testing {

using namespace picofw;

inline IpAddr4 ip(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
  return IpAddr4{{a, b, c, d}};
}

// Manually advanced clock shared with an Engine.
struct FakeClock {
  std::shared_ptr<double> t = std::make_shared<double>(1000.0);
  Clock fn() const {
    return [t = t] { return Seconds{*t}; };
  }
  void advance(double s) { *t += s; }
  Seconds now() const { return Seconds{*t}; }
};

inline Packet tcp(IpAddr4 src, std::uint16_t sport, IpAddr4 dst, std::uint16_t dport,
                  std::uint8_t bits) {
  Packet p;
  p.proto = Proto::Tcp;
  p.src = src;
  p.sport = sport;
  p.dst = dst;
  p.dport = dport;
  p.tcp_flags = flags(bits);
  p.in_iface = "eth0";
  p.out_iface = "eth1";
  return p;
}

inline Packet udp(IpAddr4 src, std::uint16_t sport, IpAddr4 dst, std::uint16_t dport) {
  Packet p = tcp(src, sport, dst, dport, 0);
  p.proto = Proto::Udp;
  p.size_bytes = 28;
  return p;
}

// Reply as it would arrive on the other interface.
inline Packet answer(const Packet& p, std::uint8_t bits) {
  Packet r = reverse(p);
  r.tcp_flags = flags(bits);
  if (p.in_iface) {
    r.in_iface = p.out_iface ? p.out_iface : std::optional<std::string>("eth1");
    r.out_iface = p.in_iface;
  }
  return r;
}

inline Ruleset with_rules(std::initializer_list<const char*> lines) {
  Ruleset rs = Ruleset::empty();
  std::vector<AppendCommand> cmds;
  for (const char* line : lines) cmds.push_back(parse_rule(line));
  for (const auto& cmd : cmds)
    if (!rs.table_of(cmd.chain)) rs = add_user_chain(std::move(rs), cmd.chain);
  for (auto& cmd : cmds) rs = append_rule(std::move(rs), cmd.chain, std::move(cmd.rule));
  validate_ruleset(rs);
  return rs;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_);
  }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(gen_); }
  template <typename C>
  const auto& pick(const C& c) {
    return c[below(std::size(c))];
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace testing
