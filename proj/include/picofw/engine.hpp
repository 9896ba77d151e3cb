#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "picofw/conntrack.hpp"
#include "picofw/net.hpp"
#include "picofw/ruleset.hpp"

namespace picofw {

enum class VerdictKind : std::uint8_t { Accept, Drop, Reject, Continue };

std::string_view to_string(VerdictKind k);

struct RuleRef {
  std::string chain;
  std::size_t index = 0;
  friend bool operator==(const RuleRef&, const RuleRef&) = default;
};

struct Verdict {
  VerdictKind kind = VerdictKind::Continue;
  std::optional<RuleRef> matched_rule;  // none when decided by policy
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

enum class Outcome : std::uint8_t { DeliveredLocal, Forwarded, Dropped, Rejected };

std::string_view to_string(Outcome o);

enum class EventKind : std::uint8_t { Log, RejectNotify, NatApplied, NatFailure };

std::string_view to_string(EventKind k);

struct Event {
  EventKind kind;
  std::string detail;
  friend bool operator==(const Event&, const Event&) = default;
};

struct Disposition {
  Outcome outcome = Outcome::Forwarded;
  Packet final_packet;  // post-NAT
  std::size_t rules_traversed = 0;
  std::vector<Event> events;
  ConnState conn_state = ConnState::New;
  Verdict verdict;  // the verdict that ended traversal
  std::optional<NatBinding> nat;  // set when this packet created a NAT binding

  bool accepted() const {
    return outcome == Outcome::DeliveredLocal || outcome == Outcome::Forwarded;
  }
};

// Result of running one chain (and anything it jumps to).
struct ChainResult {
  Verdict verdict;
  Packet packet;  // after any NAT target in the chain
  std::size_t rules_traversed = 0;
  std::vector<Event> events;
  std::optional<NatBinding> nat;
};

struct RuleCounter {
  std::string chain;
  std::size_t index = 0;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
  friend bool operator==(const RuleCounter&, const RuleCounter&) = default;
};

struct StatsSnapshot {
  std::vector<RuleCounter> rules;  // ordered by (chain, index)
  std::map<std::string, std::uint64_t> policy_hits;
  std::size_t conn_count = 0;
  std::uint64_t evictions = 0;
  double uptime_s = 0;
  double timestamp = 0;
  friend bool operator==(const StatsSnapshot&, const StatsSnapshot&) = default;
};

struct EngineConfig {
  std::size_t conn_capacity = 65536;
  ConntrackTimeouts timeouts;
  IpAddr4 masquerade_addr = IpAddr4{{203, 0, 113, 1}};
  std::uint16_t nat_port_lo = 1024;
  std::uint16_t nat_port_hi = 65535;
};

using Clock = std::function<Seconds()>;

// Wall clock used when none is injected.
Clock system_clock();

// One rule evaluation, reported to an optional observer.
struct TraceStep {
  Table table;
  std::string chain;
  std::size_t index;
  bool matched;
  const Rule* rule;
};
using TraceFn = std::function<void(const TraceStep&)>;

bool match_rule(const Rule& r, const Packet& p, ConnState state);

// The packet path. All public operations are serialized on one internal
// mutex, so a packet is always evaluated under exactly one ruleset and a
// snapshot never observes a half-processed packet.
class Engine {
 public:
  explicit Engine(Ruleset rs = Ruleset::empty(), EngineConfig cfg = {},
                  Clock clock = system_clock());

  Disposition process_packet(const Packet& p, const TraceFn& trace = {});

  ConnState conntrack_classify(const Packet& p) const;
  // Records the effect of an accepted packet on the connection table.
  // process_packet calls this itself; exposed for direct state-machine tests.
  void conntrack_update(const Packet& p, const Disposition& d);

  ChainResult evaluate_chain(Table table, std::string_view chain,
                             const Packet& p, ConnState state,
                             const TraceFn& trace = {});

  // NAT rewrites for a packet of a connection being created. A pooled
  // port is reserved; the caller owns releasing it if the packet dies.
  // Returns nullopt when no translation is possible.
  std::optional<std::pair<Packet, NatBinding>> apply_snat(
      const Packet& p, const Target& target,
      const std::optional<NatBinding>& prior = std::nullopt);
  std::optional<std::pair<Packet, NatBinding>> apply_dnat(const Packet& p,
                                                          const Target& target);

  std::size_t expire_connections(Seconds now);
  StatsSnapshot snapshot_counters() const;

  // Validates first; on failure the active ruleset is untouched and the
  // ValidationError propagates. Resets counters, keeps connections.
  void swap_ruleset(Ruleset rs);

  std::shared_ptr<const Ruleset> ruleset() const;
  std::optional<ConnEntry> connection(const Packet& p) const;
  std::size_t connection_count() const;
  void flush_connections();
  const EngineConfig& config() const { return cfg_; }

 private:
  struct ChainCounters {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> rules;
    std::uint64_t policy_hits = 0;
  };
  struct Walk;

  void reset_counters();
  Verdict walk_chain(Walk& w, const Chain& chain);
  ChainResult run_chain(Table table, std::string_view chain, const Packet& p,
                        ConnState state, const TraceFn& trace,
                        const std::optional<NatBinding>& nat);
  std::optional<std::pair<Packet, NatBinding>> snat_locked(
      const Packet& p, const Target& target,
      const std::optional<NatBinding>& prior);
  std::optional<std::pair<Packet, NatBinding>> dnat_locked(
      const Packet& p, const Target& target);

  EngineConfig cfg_;
  Clock clock_;
  Seconds started_;
  mutable std::mutex mu_;
  std::shared_ptr<const Ruleset> ruleset_;
  ConnTable conns_;
  std::unordered_map<std::string, ChainCounters> counters_;
};

}  // namespace picofw
