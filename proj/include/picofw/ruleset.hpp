#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "picofw/checksum.hpp"
#include "picofw/net.hpp"

namespace picofw {

// Semantic problem in an otherwise well-formed ruleset (dangling jump,
// jump cycle, NAT target in the wrong chain, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stored #sha256 line does not match the image body.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ConnState : std::uint8_t { New, Established, Invalid };

std::string_view to_string(ConnState s);

struct ConnStateSet {
  std::uint8_t bits = 0;

  static constexpr std::uint8_t bit(ConnState s) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(s));
  }
  constexpr bool has(ConnState s) const { return (bits & bit(s)) != 0; }
  constexpr void add(ConnState s) { bits |= bit(s); }
  friend constexpr bool operator==(ConnStateSet, ConnStateSet) = default;
};

struct PortRange {
  std::uint16_t lo = 0;
  std::uint16_t hi = 0;

  constexpr bool contains(std::uint16_t port) const {
    return port >= lo && port <= hi;
  }
  friend constexpr bool operator==(PortRange, PortRange) = default;
};

// Conjunction of optional predicates; an absent field is a wildcard.
struct MatchSpec {
  std::optional<Proto> proto;
  std::optional<CidrBlock> src;
  std::optional<CidrBlock> dst;
  std::optional<PortRange> sport;
  std::optional<PortRange> dport;
  std::optional<std::string> in_iface;
  std::optional<std::string> out_iface;
  std::optional<ConnStateSet> conn_states;

  friend bool operator==(const MatchSpec&, const MatchSpec&) = default;
};

enum class TargetKind : std::uint8_t {
  Accept,
  Drop,
  Reject,
  Log,
  Snat,
  Dnat,
  Masquerade,
  Jump,
  Return,
};

std::string_view to_string(TargetKind k);

struct NatTo {
  IpAddr4 addr;
  std::optional<std::uint16_t> port;
  friend bool operator==(const NatTo&, const NatTo&) = default;
};

struct Target {
  TargetKind kind = TargetKind::Accept;
  std::optional<NatTo> nat_to;            // SNAT, DNAT
  std::optional<std::string> jump_chain;  // JUMP

  static Target of(TargetKind k) { return Target{k, std::nullopt, std::nullopt}; }
  static Target jump(std::string chain) {
    return Target{TargetKind::Jump, std::nullopt, std::move(chain)};
  }
  static Target nat(TargetKind k, NatTo to) { return Target{k, to, std::nullopt}; }

  friend bool operator==(const Target&, const Target&) = default;
};

struct Rule {
  MatchSpec match;
  Target target;
  std::string raw_text;  // as parsed; not part of the rule's value

  friend bool operator==(const Rule& a, const Rule& b) {
    return a.match == b.match && a.target == b.target;
  }
};

enum class Policy : std::uint8_t { Accept, Drop };

std::string_view to_string(Policy p);

enum class Table : std::uint8_t { Filter, Nat };

std::string_view to_string(Table t);

struct Chain {
  std::string name;
  std::vector<Rule> rules;
  std::optional<Policy> policy;  // built-in chains only

  bool builtin() const { return policy.has_value(); }
  friend bool operator==(const Chain&, const Chain&) = default;
};

inline constexpr std::string_view kInput = "INPUT";
inline constexpr std::string_view kForward = "FORWARD";
inline constexpr std::string_view kOutput = "OUTPUT";
inline constexpr std::string_view kPrerouting = "PREROUTING";
inline constexpr std::string_view kPostrouting = "POSTROUTING";

// Table owning the named built-in chain, if it is one.
std::optional<Table> builtin_table(std::string_view chain);

struct Ruleset {
  std::map<std::string, Chain, std::less<>> filter_chains;
  std::map<std::string, Chain, std::less<>> nat_chains;
  std::uint64_t version = 0;

  // Five built-in chains, all with policy ACCEPT, no rules.
  static Ruleset empty();

  const Chain* find(Table table, std::string_view name) const;
  const std::map<std::string, Chain, std::less<>>& chains(Table t) const {
    return t == Table::Filter ? filter_chains : nat_chains;
  }
  // Table holding the named chain, if any.
  std::optional<Table> table_of(std::string_view name) const;

  // SHA-256 of the canonical serialization body.
  Digest checksum() const;

  friend bool operator==(const Ruleset&, const Ruleset&) = default;
};

// "-A <CHAIN> <spec>" line.
struct AppendCommand {
  std::string chain;
  Rule rule;
};

AppendCommand parse_rule(std::string_view line);
// Flags only, without the leading "-A <CHAIN>".
Rule parse_rule_spec(std::string_view spec);

std::string render_rule_spec(const Rule& r);
std::string render_rule(std::string_view chain, const Rule& r);

// Throws ParseError, IntegrityError or ValidationError.
Ruleset parse_ruleset(std::string_view text);

// Canonical image text including the trailing #sha256 line.
std::string serialize_ruleset(const Ruleset& rs);
// Canonical image text up to, not including, the #sha256 line.
std::string serialize_ruleset_body(const Ruleset& rs);

// Throws ValidationError on the first problem found.
void validate_ruleset(const Ruleset& rs);

// Functional updates; the version is left untouched.
Ruleset append_rule(Ruleset rs, std::string_view chain, Rule r);
Ruleset set_policy(Ruleset rs, std::string_view chain, Policy policy);
Ruleset flush_chain(Ruleset rs, std::string_view chain);
Ruleset add_user_chain(Ruleset rs, std::string_view name);

struct RuleGenSpec {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  double matchable_fraction = 0.0;
  std::string chain = std::string(kForward);
};

// Random ACCEPT rules. Non-matchable rules carry a source block that
// contains neither endpoint of the flow, so they match no packet of it in
// either direction.
std::vector<Rule> generate_random_rules(const RuleGenSpec& spec,
                                        const FlowKey& flow);

}  // namespace picofw
