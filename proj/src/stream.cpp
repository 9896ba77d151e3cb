#include <stdexcept>

#include "picofw/bench.hpp"

namespace picofw {

std::string_view to_string(BenchPath p) {
  return p == BenchPath::Forward ? "FORWARD" : "INPUT";
}

FlowKey StreamSpec::flow() const {
  return make_flow_key(Proto::Tcp, {client, client_port}, {server, server_port});
}

void check_stream_spec(const StreamSpec& spec) {
  if (spec.segment_bytes == 0) throw std::invalid_argument("segment_bytes must be > 0");
  if (spec.window_bytes < spec.segment_bytes)
    throw std::invalid_argument("window_bytes must be >= segment_bytes");
}

std::vector<StreamPacket> generate_stream(const StreamSpec& spec) {
  check_stream_spec(spec);

  Packet fwd;
  fwd.proto = Proto::Tcp;
  fwd.src = spec.client;
  fwd.dst = spec.server;
  fwd.sport = spec.client_port;
  fwd.dport = spec.server_port;
  fwd.size_bytes = min_packet_size(Proto::Tcp);
  fwd.in_iface = "eth0";
  if (spec.path == BenchPath::Forward) {
    fwd.out_iface = "eth1";
    fwd.dst_is_local = false;
  } else {
    fwd.dst_is_local = true;
  }

  Packet rev = reverse(fwd);
  if (spec.path == BenchPath::Forward) {
    rev.in_iface = "eth1";
    rev.out_iface = "eth0";
  } else {
    // Replies come from the box itself.
    rev.in_iface.reset();
    rev.out_iface = "eth0";
    rev.dst_is_local = false;
  }

  auto control = [](Packet base, std::uint8_t bits, SegmentRole role) {
    base.tcp_flags = flags(bits);
    return StreamPacket{std::move(base), role, 0, 0};
  };

  std::vector<StreamPacket> out;
  const std::uint64_t segments =
      (spec.total_bytes + spec.segment_bytes - 1) / spec.segment_bytes;
  out.reserve(static_cast<std::size_t>(segments + segments / 8 + 16));

  out.push_back(control(fwd, kSyn, SegmentRole::Handshake));
  out.push_back(control(rev, kSyn | kAck, SegmentRole::Handshake));
  out.push_back(control(fwd, kAck, SegmentRole::Handshake));

  std::uint64_t sent = 0;
  std::uint64_t acked = 0;
  auto ack = [&] {
    StreamPacket a = control(rev, kAck, SegmentRole::Ack);
    a.acked = sent;
    out.push_back(std::move(a));
    acked = sent;
  };
  while (sent < spec.total_bytes) {
    auto payload = static_cast<std::uint32_t>(
        std::min<std::uint64_t>(spec.segment_bytes, spec.total_bytes - sent));
    if (sent - acked + payload > spec.window_bytes) ack();
    StreamPacket d = control(fwd, kAck, SegmentRole::Data);
    d.payload = payload;
    d.packet.size_bytes += payload;
    out.push_back(std::move(d));
    sent += payload;
  }
  if (sent > acked) ack();

  out.push_back(control(fwd, kFin | kAck, SegmentRole::Teardown));
  out.push_back(control(rev, kAck, SegmentRole::Teardown));
  out.push_back(control(rev, kFin | kAck, SegmentRole::Teardown));
  out.push_back(control(fwd, kAck, SegmentRole::Teardown));
  return out;
}

}  // namespace picofw
