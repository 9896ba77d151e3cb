#include <doctest.h>

#include "picofw/conntrack.hpp"
#include "support.hpp"

using namespace picofw;
using testing::ip;

namespace {

// Reference TCP tracker for a single pair of endpoints A and B, written
// straight from the state table: the entry remembers who opened it.
struct RefTracker {
  enum class St { None, SynSent, Established, Closing, Closed };
  St st = St::None;
  bool opened_by_a = true;

  static bool syn_only(std::uint8_t f) { return (f & kSyn) && !(f & kAck); }
  static bool syn_ack(std::uint8_t f) { return (f & kSyn) && (f & kAck); }

  ConnState classify(bool from_a, std::uint8_t f) const {
    const bool from_opener = from_a == opened_by_a;
    switch (st) {
      case St::None:
        return syn_only(f) ? ConnState::New : ConnState::Invalid;
      case St::Established:
      case St::Closing:
        return ConnState::Established;
      case St::SynSent:
        if (!from_opener && syn_ack(f)) return ConnState::Established;
        if (from_opener && syn_only(f)) return ConnState::New;
        return ConnState::Invalid;
      case St::Closed:
        return syn_only(f) ? ConnState::New : ConnState::Invalid;
    }
    return ConnState::Invalid;
  }

  void accept(bool from_a, std::uint8_t f) {
    const bool from_opener = from_a == opened_by_a;
    if (st == St::None) {
      if (syn_only(f)) {
        st = St::SynSent;
        opened_by_a = from_a;
      }
      return;
    }
    if (f & kRst) {
      st = St::Closed;
    } else if (f & kFin) {
      if (st != St::Closed) st = St::Closing;
    } else if (syn_only(f) && st == St::Closed) {
      st = St::SynSent;
      opened_by_a = from_a;
    } else if (syn_ack(f) && !from_opener && st == St::SynSent) {
      st = St::Established;
    }
  }

  std::optional<TcpState> state() const {
    switch (st) {
      case St::None: return std::nullopt;
      case St::SynSent: return TcpState::SynSent;
      case St::Established: return TcpState::Established;
      case St::Closing: return TcpState::Closing;
      case St::Closed: return TcpState::Closed;
    }
    return std::nullopt;
  }
};

const std::uint8_t kFlagChoices[] = {
    kSyn, kSyn | kAck, kAck, kFin | kAck, kRst, kFin, 0, kRst | kAck, kSyn | kRst,
};

const Packet kAtoB = testing::tcp(ip(10, 0, 0, 1), 1234, ip(10, 0, 0, 2), 80, 0);

Packet make(bool from_a, std::uint8_t f) {
  Packet p = from_a ? kAtoB : testing::answer(kAtoB, 0);
  p.tcp_flags = flags(f);
  return p;
}

std::size_t explore(const ConnTable& table, const RefTracker& ref, int depth,
                    std::size_t& mismatches) {
  if (depth == 0) return 0;
  std::size_t checked = 0;
  for (bool from_a : {true, false}) {
    for (std::uint8_t f : kFlagChoices) {
      Packet p = make(from_a, f);
      ++checked;
      if (table.classify(p) != ref.classify(from_a, f)) ++mismatches;
      ConnTable t = table;
      RefTracker r = ref;
      t.update(p, std::nullopt, Seconds{0});
      r.accept(from_a, f);
      auto hit = t.find(p);
      std::optional<TcpState> got;
      if (hit) got = hit->entry->state;
      if (got != r.state()) ++mismatches;
      if (hit && r.state()) {
        bool opener_is_a = hit->entry->origin.src.addr == kAtoB.src;
        if (opener_is_a != r.opened_by_a) ++mismatches;
      }
      checked += explore(t, r, depth - 1, mismatches);
    }
  }
  return checked;
}

}  // namespace

TEST_CASE("classification agrees with the reference machine on every short sequence") {
  ConnTable table;
  std::size_t mismatches = 0;
  std::size_t checked = explore(table, RefTracker{}, 5, mismatches);
  CHECK(checked > 1'000'000);
  CHECK(mismatches == 0);
}

TEST_CASE("handshake, teardown and reset") {
  ConnTable t;
  Packet syn = make(true, kSyn);
  CHECK(t.classify(syn) == ConnState::New);
  t.update(syn, std::nullopt, Seconds{1});
  CHECK(t.find(syn)->entry->state == TcpState::SynSent);

  Packet synack = make(false, kSyn | kAck);
  CHECK(t.classify(synack) == ConnState::Established);
  t.update(synack, std::nullopt, Seconds{2});
  CHECK(t.find(syn)->entry->state == TcpState::Established);

  Packet data = make(true, kAck);
  CHECK(t.classify(data) == ConnState::Established);
  CHECK(t.classify(make(false, kAck)) == ConnState::Established);

  t.update(make(true, kRst), std::nullopt, Seconds{3});
  CHECK(t.find(syn)->entry->state == TcpState::Closed);
  CHECK(t.classify(data) == ConnState::Invalid);
  CHECK(t.classify(syn) == ConnState::New);
}

TEST_CASE("bare ACK to an unknown flow is invalid and leaves no entry") {
  ConnTable t;
  Packet ack = make(true, kAck);
  CHECK(t.classify(ack) == ConnState::Invalid);
  CHECK_FALSE(t.update(ack, std::nullopt, Seconds{0}));
  CHECK(t.size() == 0);
}

TEST_CASE("datagram flows") {
  ConnTable t;
  Packet q = testing::udp(ip(10, 0, 0, 1), 5353, ip(8, 8, 8, 8), 53);
  CHECK(t.classify(q) == ConnState::New);
  t.update(q, std::nullopt, Seconds{0});
  CHECK(t.classify(q) == ConnState::Established);
  CHECK(t.classify(reverse(q)) == ConnState::Established);
  Packet other = q;
  other.sport = 5354;
  CHECK(t.classify(other) == ConnState::New);
}

TEST_CASE("expiry thresholds") {
  CHECK(ConnTable().expire(Seconds{1e9}) == 0);

  auto established_at = [](ConnTable& t, double now) {
    t.update(make(true, kSyn), std::nullopt, Seconds{now});
    t.update(make(false, kSyn | kAck), std::nullopt, Seconds{now});
  };
  {
    ConnTable t;
    established_at(t, 0);
    CHECK(t.expire(Seconds{299}) == 0);
    CHECK(t.expire(Seconds{300}) == 0);
    CHECK(t.size() == 1);
    CHECK(t.expire(Seconds{301}) == 1);
    CHECK(t.size() == 0);
  }
  {
    ConnTable t;
    t.update(make(true, kSyn), std::nullopt, Seconds{0});
    CHECK(t.expire(Seconds{30}) == 0);
    CHECK(t.expire(Seconds{30.5}) == 1);
  }
  {
    ConnTable t;
    established_at(t, 0);
    t.update(make(true, kFin | kAck), std::nullopt, Seconds{100});
    CHECK(t.expire(Seconds{110}) == 0);
    CHECK(t.expire(Seconds{111}) == 1);
  }
  {
    ConnTable t;
    t.update(testing::udp(ip(1, 1, 1, 1), 1, ip(2, 2, 2, 2), 2), std::nullopt, Seconds{0});
    CHECK(t.expire(Seconds{29}) == 0);
    CHECK(t.expire(Seconds{31}) == 1);
  }
  {
    ConntrackTimeouts custom;
    custom.established = Seconds{5};
    ConnTable t(16, custom);
    established_at(t, 0);
    CHECK(t.expire(Seconds{6}) == 1);
  }
}

TEST_CASE("capacity eviction removes the entry closest to expiry") {
  ConnTable t(3);
  auto flow = [](std::uint16_t port) {
    return testing::udp(ip(10, 0, 0, 1), port, ip(10, 0, 0, 2), 53);
  };
  t.update(flow(1), std::nullopt, Seconds{10});
  t.update(flow(2), std::nullopt, Seconds{5});
  t.update(flow(3), std::nullopt, Seconds{20});
  CHECK(t.size() == 3);
  t.update(flow(4), std::nullopt, Seconds{21});
  CHECK(t.size() == 3);
  CHECK(t.evictions() == 1);
  CHECK_FALSE(t.find(flow(2)).has_value());
  CHECK(t.find(flow(1)).has_value());
  CHECK(t.find(flow(4)).has_value());
}

TEST_CASE("port pool") {
  ConnTable t;
  IpAddr4 ext = ip(5, 5, 5, 5);
  CHECK(t.reserve_port(Proto::Tcp, ext, 4000, 1024, 65535) == 4000);
  CHECK(t.reserve_port(Proto::Tcp, ext, 4000, 1024, 65535) == 1024);
  CHECK(t.reserve_port(Proto::Udp, ext, 4000, 1024, 65535) == 4000);
  CHECK(t.port_reserved(Proto::Tcp, {ext, 4000}));
  t.release_port(Proto::Tcp, {ext, 4000});
  CHECK_FALSE(t.port_reserved(Proto::Tcp, {ext, 4000}));
  CHECK(t.reserve_port(Proto::Tcp, ext, 9, 10, 11) == 9);
  CHECK(t.reserve_port(Proto::Tcp, ext, 9, 10, 11) == 10);
  CHECK(t.reserve_port(Proto::Tcp, ext, 9, 10, 11) == 11);
  CHECK_FALSE(t.reserve_port(Proto::Tcp, ext, 9, 10, 11).has_value());
}
