#include <doctest.h>

#include <set>

#include "picofw/engine.hpp"
#include "support.hpp"

using namespace picofw;
using testing::ip;
using testing::Rng;
using testing::with_rules;

namespace {

Endpoint src_of(const Packet& p) { return {p.src, p.sport}; }
Endpoint dst_of(const Packet& p) { return {p.dst, p.dport}; }

// Reply as sent by whoever received `delivered`.
Packet reply_to(const Packet& delivered, std::uint8_t bits) {
  return testing::answer(delivered, bits);
}

}  // namespace

TEST_CASE("DNAT rewrites before the routing decision") {
  Engine e(with_rules({"-A PREROUTING -p tcp --dport 80 -j DNAT --to 192.168.0.10:8080",
                       "-A FORWARD -d 192.168.0.10 -p tcp --dport 8080 -j ACCEPT",
                       "-A FORWARD -s 192.168.0.10 -p tcp --sport 8080 -j ACCEPT",
                       "-A FORWARD -j DROP"}));
  Packet in = testing::tcp(ip(9, 9, 9, 9), 3333, ip(5, 5, 5, 5), 80, kSyn);
  Disposition d = e.process_packet(in);
  CHECK(d.outcome == Outcome::Forwarded);
  CHECK(dst_of(d.final_packet) == Endpoint{ip(192, 168, 0, 10), 8080});
  CHECK(src_of(d.final_packet) == src_of(in));
  CHECK(d.verdict.matched_rule == RuleRef{"FORWARD", 0});
  REQUIRE(d.nat.has_value());

  Packet back = reply_to(d.final_packet, kSyn | kAck);
  Disposition r = e.process_packet(back);
  CHECK(r.outcome == Outcome::Forwarded);
  CHECK(src_of(r.final_packet) == Endpoint{ip(5, 5, 5, 5), 80});
  CHECK(dst_of(r.final_packet) == src_of(in));
  // The reply is seen by FORWARD with the internal source still in place.
  CHECK(r.verdict.matched_rule == RuleRef{"FORWARD", 1});

  // Later packets of the flow reuse the binding without touching the nat chain.
  Packet more = in;
  more.tcp_flags = flags(kAck);
  Disposition m = e.process_packet(more);
  CHECK(dst_of(m.final_packet) == Endpoint{ip(192, 168, 0, 10), 8080});
  CHECK(m.rules_traversed == 1);
}

TEST_CASE("DNAT to a local address is delivered locally") {
  Engine e(with_rules({"-A PREROUTING -p tcp --dport 2222 -j DNAT --to 10.0.0.1:22"}));
  Packet in = testing::tcp(ip(9, 9, 9, 9), 3333, ip(5, 5, 5, 5), 2222, kSyn);
  in.dst_is_local = true;
  in.out_iface.reset();
  Disposition d = e.process_packet(in);
  CHECK(d.outcome == Outcome::DeliveredLocal);
  CHECK(dst_of(d.final_packet) == Endpoint{ip(10, 0, 0, 1), 22});
}

TEST_CASE("SNAT happens after FORWARD") {
  Engine e(with_rules({"-A FORWARD -s 192.168.0.2 -j ACCEPT",
                       "-A FORWARD -d 192.168.0.2 -j ACCEPT", "-A FORWARD -j DROP",
                       "-A POSTROUTING -s 192.168.0.0/16 -j SNAT --to 5.5.5.5"}));
  Packet out = testing::tcp(ip(192, 168, 0, 2), 4000, ip(8, 8, 8, 8), 443, kSyn);
  Disposition d = e.process_packet(out);
  CHECK(d.outcome == Outcome::Forwarded);
  CHECK(d.verdict.matched_rule == RuleRef{"POSTROUTING", 0});
  CHECK(src_of(d.final_packet) == Endpoint{ip(5, 5, 5, 5), 4000});

  Packet back = reply_to(d.final_packet, kSyn | kAck);
  Disposition r = e.process_packet(back);
  // The reply is un-NATed before FORWARD, where the internal address matches.
  CHECK(r.outcome == Outcome::Forwarded);
  CHECK(dst_of(r.final_packet) == Endpoint{ip(192, 168, 0, 2), 4000});
  CHECK(r.verdict.matched_rule == RuleRef{"FORWARD", 1});
}

TEST_CASE("SNAT with an explicit port") {
  Engine e(with_rules({"-A POSTROUTING -p udp -j SNAT --to 5.5.5.5:7000"}));
  Disposition a = e.process_packet(testing::udp(ip(10, 0, 0, 1), 1, ip(8, 8, 8, 8), 53));
  CHECK(src_of(a.final_packet) == Endpoint{ip(5, 5, 5, 5), 7000});
  Disposition b = e.process_packet(testing::udp(ip(10, 0, 0, 2), 1, ip(8, 8, 8, 8), 53));
  CHECK(b.outcome == Outcome::Dropped);
  REQUIRE(b.events.size() == 1);
  CHECK(b.events[0].kind == EventKind::NatFailure);
}

TEST_CASE("MASQUERADE keeps external endpoints unique") {
  EngineConfig cfg;
  cfg.masquerade_addr = ip(203, 0, 113, 7);
  Engine e(with_rules({"-A POSTROUTING -o eth1 -j MASQUERADE"}), cfg);
  Packet a = testing::tcp(ip(192, 168, 0, 2), 4000, ip(8, 8, 8, 8), 80, kSyn);
  Packet b = testing::tcp(ip(192, 168, 0, 3), 4000, ip(8, 8, 8, 8), 80, kSyn);
  Disposition da = e.process_packet(a);
  Disposition db = e.process_packet(b);
  CHECK(src_of(da.final_packet) == Endpoint{ip(203, 0, 113, 7), 4000});
  CHECK(db.final_packet.src == ip(203, 0, 113, 7));
  CHECK(db.final_packet.sport != 4000);
  CHECK(db.final_packet.sport == 1024);

  CHECK(dst_of(e.process_packet(reply_to(da.final_packet, kSyn | kAck)).final_packet) ==
        src_of(a));
  CHECK(dst_of(e.process_packet(reply_to(db.final_packet, kSyn | kAck)).final_packet) ==
        src_of(b));
}

TEST_CASE("exhausted pool drops with NAT_FAILURE and frees nothing twice") {
  EngineConfig cfg;
  cfg.nat_port_lo = 2000;
  cfg.nat_port_hi = 2001;
  testing::FakeClock clock;
  Engine e(with_rules({"-A POSTROUTING -j MASQUERADE"}), cfg, clock.fn());
  auto host = [](std::uint8_t h) {
    return testing::udp(ip(192, 168, 0, h), 9, ip(8, 8, 8, 8), 53);
  };
  // Port 9 is outside [2000, 2001], so the first host takes 9 itself.
  CHECK(e.process_packet(host(1)).final_packet.sport == 9);
  CHECK(e.process_packet(host(2)).final_packet.sport == 2000);
  CHECK(e.process_packet(host(3)).final_packet.sport == 2001);
  Disposition d = e.process_packet(host(4));
  CHECK(d.outcome == Outcome::Dropped);
  CHECK(d.events.back().kind == EventKind::NatFailure);
  CHECK(e.connection_count() == 3);

  // Expiry returns the ports to the pool.
  clock.advance(31);
  CHECK(e.expire_connections(clock.now()) == 3);
  CHECK(e.process_packet(host(4)).final_packet.sport == 9);
  CHECK(e.process_packet(host(5)).final_packet.sport == 2000);
}

TEST_CASE("ICMP SNAT rewrites the address only") {
  Engine e(with_rules({"-A POSTROUTING -p icmp -j SNAT --to 5.5.5.5"}));
  Packet ping = testing::udp(ip(10, 0, 0, 1), 0, ip(8, 8, 8, 8), 0);
  ping.proto = Proto::Icmp;
  Disposition d = e.process_packet(ping);
  CHECK(d.final_packet.src == ip(5, 5, 5, 5));
  CHECK(d.final_packet.sport == 0);
  Disposition r = e.process_packet(reply_to(d.final_packet, 0));
  CHECK(r.final_packet.dst == ip(10, 0, 0, 1));
}

TEST_CASE("a translated tuple that collides with a live flow is refused") {
  Engine e(with_rules({"-A PREROUTING -p udp --dport 53 -j DNAT --to 10.0.0.53"}));
  // A direct flow already owns 1.1.1.1:5000 <-> 10.0.0.53:53.
  Packet direct = testing::udp(ip(1, 1, 1, 1), 5000, ip(10, 0, 0, 53), 53);
  direct.in_iface.reset();
  CHECK(e.process_packet(direct).accepted());
  Packet via = testing::udp(ip(1, 1, 1, 1), 5000, ip(9, 9, 9, 9), 53);
  Disposition d = e.process_packet(via);
  CHECK(d.outcome == Outcome::Dropped);
  CHECK(d.events.back().kind == EventKind::NatFailure);
}

TEST_CASE("NAT round trip property") {
  Rng rng(41);
  Engine e(with_rules({"-A PREROUTING -p tcp -d 198.51.100.1 -j DNAT --to 10.9.0.1:8080",
                       "-A POSTROUTING -s 10.1.0.0/16 -j SNAT --to 198.51.100.2",
                       "-A POSTROUTING -s 10.2.0.0/16 -j MASQUERADE"}));
  std::set<std::pair<IpAddr4, std::uint16_t>> external;
  for (int i = 0; i < 300; ++i) {
    auto port = static_cast<std::uint16_t>(1024 + rng.below(64));
    Packet out;
    switch (rng.below(3)) {
      case 0:
        out = testing::tcp(ip(7, 7, static_cast<std::uint8_t>(rng.below(250)), 1), port,
                           ip(198, 51, 100, 1), 80, kSyn);
        break;
      case 1:
        out = testing::tcp(ip(10, 1, static_cast<std::uint8_t>(rng.below(4)), 1), port,
                           ip(8, 8, 8, 8), 443, kSyn);
        break;
      default:
        out = testing::tcp(ip(10, 2, static_cast<std::uint8_t>(rng.below(4)), 1), port,
                           ip(8, 8, 4, 4), 443, kSyn);
        break;
    }
    if (e.connection(out)) continue;  // same tuple drawn twice
    Disposition d = e.process_packet(out);
    REQUIRE(d.accepted());
    if (d.final_packet.src != out.src)
      CHECK(external.insert({d.final_packet.src, d.final_packet.sport}).second);
    Disposition r = e.process_packet(reply_to(d.final_packet, kSyn | kAck));
    REQUIRE(r.accepted());
    CHECK(src_of(r.final_packet) == dst_of(out));
    CHECK(dst_of(r.final_packet) == src_of(out));
  }
}

TEST_CASE("apply_snat and apply_dnat directly") {
  Engine e;
  Packet p = testing::tcp(ip(192, 168, 0, 2), 4000, ip(1, 1, 1, 1), 80, kSyn);
  auto s = e.apply_snat(p, Target::nat(TargetKind::Snat, {ip(5, 5, 5, 5), std::nullopt}));
  REQUIRE(s.has_value());
  CHECK(src_of(s->first) == Endpoint{ip(5, 5, 5, 5), 4000});
  CHECK(s->second.rewrite.original.src == src_of(p));
  CHECK(s->second.pooled == Endpoint{ip(5, 5, 5, 5), 4000});

  auto d = e.apply_dnat(p, Target::nat(TargetKind::Dnat, {ip(10, 0, 0, 9), 8080}));
  REQUIRE(d.has_value());
  CHECK(dst_of(d->first) == Endpoint{ip(10, 0, 0, 9), 8080});
  CHECK_FALSE(d->second.pooled.has_value());

  CHECK_THROWS_AS(e.apply_dnat(p, Target::of(TargetKind::Masquerade)), std::invalid_argument);
}
