#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <set>
#include <tuple>
#include <unordered_map>

#include "picofw/net.hpp"
#include "picofw/ruleset.hpp"

namespace picofw {

using Seconds = std::chrono::duration<double>;

enum class TcpState : std::uint8_t { SynSent, Established, Closing, Closed };

std::string_view to_string(TcpState s);

// Directed (src, dst) endpoint pair.
struct Tuple {
  Endpoint src;
  Endpoint dst;
  friend constexpr auto operator<=>(const Tuple&, const Tuple&) = default;
};

Tuple tuple_of(const Packet& p);
FlowKey flow_key(Proto proto, const Tuple& t);

// What the initiator sent versus what left the box.
struct NatRewrite {
  Tuple original;
  Tuple translated;
  friend bool operator==(const NatRewrite&, const NatRewrite&) = default;
};

struct NatBinding {
  NatRewrite rewrite;
  // External endpoint reserved from the port pool, if any.
  std::optional<Endpoint> pooled;
  friend bool operator==(const NatBinding&, const NatBinding&) = default;
};

struct ConnEntry {
  FlowKey key;
  Tuple origin;  // initiator direction, pre-NAT
  TcpState state = TcpState::Established;
  std::optional<NatRewrite> nat_rewrite;
  std::optional<Endpoint> pooled;
  Seconds last_seen{0};
  Seconds created{0};
};

struct ConntrackTimeouts {
  Seconds established{300};
  Seconds syn_sent{30};
  Seconds closing{10};  // CLOSING and CLOSED
  Seconds datagram{30};  // UDP and ICMP
};

enum class Direction : std::uint8_t { Original, Reply };

// Connection table keyed by the pre-NAT flow, with a secondary index from the
// post-NAT flow so replies to translated connections find their entry.
class ConnTable {
 public:
  struct Hit {
    const ConnEntry* entry;
    Direction dir;
  };

  explicit ConnTable(std::size_t capacity = 65536, ConntrackTimeouts t = {});

  std::optional<Hit> find(const Packet& p) const;

  // NEW / ESTABLISHED / INVALID for p against the current table.
  ConnState classify(const Packet& p) const;

  // Advance state for an accepted packet. `nat` is attached only when a new
  // entry is created. Returns false when nothing was recorded (e.g. a stray
  // TCP ACK), in which case a pooled NAT port in `nat` is released.
  bool update(const Packet& p, const std::optional<NatBinding>& nat,
              Seconds now);

  // Removes entries idle longer than their state's timeout.
  std::size_t expire(Seconds now);

  // True when `key` already names some connection, from either side.
  bool flow_in_use(const FlowKey& key) const;

  // Reserve (proto, addr, port) for a translated source. Tries `preferred`
  // first, then the lowest free port in [lo, hi].
  std::optional<std::uint16_t> reserve_port(Proto proto, IpAddr4 addr,
                                            std::uint16_t preferred,
                                            std::uint16_t lo, std::uint16_t hi);
  void release_port(Proto proto, const Endpoint& ep);
  bool port_reserved(Proto proto, const Endpoint& ep) const;

  Seconds timeout_for(const ConnEntry& e) const;

  // Drops the entry for `key`, its reply index and any pooled port.
  void remove(const FlowKey& key) { erase(key); }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t evictions() const { return evictions_; }
  const ConntrackTimeouts& timeouts() const { return timeouts_; }
  void clear();

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [_, e] : entries_) fn(e);
  }

 private:
  void create(const Packet& p, TcpState state,
              const std::optional<NatBinding>& nat, Seconds now);
  void erase(const FlowKey& key);
  void evict_one();

  std::size_t capacity_;
  ConntrackTimeouts timeouts_;
  std::unordered_map<FlowKey, ConnEntry, FlowKeyHash> entries_;
  std::unordered_map<FlowKey, FlowKey, FlowKeyHash> reply_index_;
  std::set<std::tuple<Proto, std::uint32_t, std::uint16_t>> pool_;
  std::uint64_t evictions_ = 0;
};

}  // namespace picofw
