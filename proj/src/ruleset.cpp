#include <algorithm>
#include <charconv>
#include <functional>
#include <set>
#include <span>

#include "picofw/ruleset.hpp"

namespace picofw {

namespace {

constexpr std::string_view kHeader = "#picofw-ruleset v1";
constexpr std::string_view kVersionTag = "#version ";
constexpr std::string_view kDigestTag = "#sha256 ";

constexpr std::string_view kFilterOrder[] = {kInput, kForward, kOutput};
constexpr std::string_view kNatOrder[] = {kPrerouting, kPostrouting};

using ChainMap = std::map<std::string, Chain, std::less<>>;

Chain builtin_chain(std::string_view name) {
  return Chain{std::string(name), {}, Policy::Accept};
}

void render_table(std::string& out, std::string_view marker,
                  const ChainMap& chains,
                  std::span<const std::string_view> builtin_order) {
  out += marker;
  out += '\n';
  std::vector<const Chain*> order;
  for (auto name : builtin_order) {
    auto it = chains.find(name);
    if (it != chains.end()) order.push_back(&it->second);
  }
  // std::map iteration is already sorted by name.
  for (const auto& [name, chain] : chains)
    if (!chain.builtin()) order.push_back(&chain);

  for (const Chain* c : order) {
    out += ':';
    out += c->name;
    out += ' ';
    out += c->policy ? to_string(*c->policy) : std::string_view("-");
    out += '\n';
  }
  for (const Chain* c : order) {
    for (const Rule& r : c->rules) {
      out += render_rule(c->name, r);
      out += '\n';
    }
  }
}

[[noreturn]] void fail_line(std::size_t line_no, const std::string& msg,
                            std::size_t column = std::string::npos) {
  throw ParseError("line " + std::to_string(line_no) + ": " + msg, column);
}

bool valid_user_chain_name(std::string_view name) {
  static constexpr std::string_view kReserved[] = {
      "ACCEPT", "DROP", "REJECT", "LOG", "SNAT", "DNAT", "MASQUERADE", "RETURN"};
  if (name.empty() || name.size() > 64 || name[0] == '-') return false;
  for (auto r : kReserved)
    if (name == r) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
           (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
  });
}

bool is_nat_target(TargetKind k) {
  return k == TargetKind::Snat || k == TargetKind::Dnat ||
         k == TargetKind::Masquerade;
}

void validate_rule(const Chain& chain, Table table, std::size_t index,
                   const Rule& r, const ChainMap& chains) {
  auto where = [&] {
    return std::string(to_string(table)) + "/" + chain.name + " rule " +
           std::to_string(index) + ": ";
  };
  const MatchSpec& m = r.match;
  bool ported = m.proto == Proto::Tcp || m.proto == Proto::Udp;
  if ((m.sport || m.dport) && !ported)
    throw ValidationError(where() + "port match requires tcp or udp");
  if (m.sport && m.sport->lo > m.sport->hi)
    throw ValidationError(where() + "sport range lo > hi");
  if (m.dport && m.dport->lo > m.dport->hi)
    throw ValidationError(where() + "dport range lo > hi");
  if (m.conn_states && m.conn_states->bits == 0)
    throw ValidationError(where() + "empty state set");

  const Target& t = r.target;
  bool needs_to = t.kind == TargetKind::Snat || t.kind == TargetKind::Dnat;
  if (needs_to != t.nat_to.has_value())
    throw ValidationError(where() + "--to must be given exactly for SNAT/DNAT");
  if ((t.kind == TargetKind::Jump) != t.jump_chain.has_value())
    throw ValidationError(where() + "jump chain must be given exactly for JUMP");

  if (table == Table::Filter && is_nat_target(t.kind))
    throw ValidationError(where() + std::string(to_string(t.kind)) +
                          " is only valid in the nat table");
  if (t.kind == TargetKind::Dnat && chain.name != kPrerouting)
    throw ValidationError(where() + "DNAT is only valid in PREROUTING");
  if ((t.kind == TargetKind::Snat || t.kind == TargetKind::Masquerade) &&
      chain.name != kPostrouting)
    throw ValidationError(where() + std::string(to_string(t.kind)) +
                          " is only valid in POSTROUTING");
  if (t.kind == TargetKind::Jump) {
    auto it = chains.find(*t.jump_chain);
    if (it == chains.end() || it->second.builtin())
      throw ValidationError(where() + "jump to unknown chain '" +
                            *t.jump_chain + "'");
  }
}

void check_acyclic(const ChainMap& chains, Table table) {
  enum class Mark { White, Grey, Black };
  std::map<std::string_view, Mark> marks;
  for (const auto& [name, _] : chains) marks[name] = Mark::White;

  std::function<void(const Chain&)> visit = [&](const Chain& c) {
    marks[c.name] = Mark::Grey;
    for (const Rule& r : c.rules) {
      if (r.target.kind != TargetKind::Jump) continue;
      const Chain& next = chains.find(*r.target.jump_chain)->second;
      Mark m = marks[next.name];
      if (m == Mark::Grey)
        throw ValidationError(std::string(to_string(table)) +
                              ": jump cycle through '" + c.name + "' -> '" +
                              next.name + "'");
      if (m == Mark::White) visit(next);
    }
    marks[c.name] = Mark::Black;
  };
  for (const auto& [name, chain] : chains)
    if (marks[name] == Mark::White) visit(chain);
}

Chain& chain_for_update(Ruleset& rs, std::string_view name) {
  auto table = rs.table_of(name);
  if (!table) throw std::invalid_argument("unknown chain '" + std::string(name) + "'");
  auto& chains = *table == Table::Filter ? rs.filter_chains : rs.nat_chains;
  return chains.find(name)->second;
}

}  // namespace

std::string_view to_string(Policy p) {
  return p == Policy::Accept ? "ACCEPT" : "DROP";
}

std::string_view to_string(Table t) {
  return t == Table::Filter ? "filter" : "nat";
}

std::optional<Table> builtin_table(std::string_view chain) {
  for (auto n : kFilterOrder)
    if (n == chain) return Table::Filter;
  for (auto n : kNatOrder)
    if (n == chain) return Table::Nat;
  return std::nullopt;
}

Ruleset Ruleset::empty() {
  Ruleset rs;
  for (auto n : kFilterOrder) rs.filter_chains.emplace(n, builtin_chain(n));
  for (auto n : kNatOrder) rs.nat_chains.emplace(n, builtin_chain(n));
  return rs;
}

const Chain* Ruleset::find(Table table, std::string_view name) const {
  const auto& map = chains(table);
  auto it = map.find(name);
  return it == map.end() ? nullptr : &it->second;
}

std::optional<Table> Ruleset::table_of(std::string_view name) const {
  if (filter_chains.find(name) != filter_chains.end()) return Table::Filter;
  if (nat_chains.find(name) != nat_chains.end()) return Table::Nat;
  return std::nullopt;
}

Digest Ruleset::checksum() const {
  return compute_checksum(serialize_ruleset_body(*this));
}

std::string serialize_ruleset_body(const Ruleset& rs) {
  std::string out;
  out += kHeader;
  out += '\n';
  out += kVersionTag;
  out += std::to_string(rs.version);
  out += '\n';
  render_table(out, "*filter", rs.filter_chains, kFilterOrder);
  render_table(out, "*nat", rs.nat_chains, kNatOrder);
  return out;
}

std::string serialize_ruleset(const Ruleset& rs) {
  std::string body = serialize_ruleset_body(rs);
  std::string digest = to_hex(compute_checksum(body));
  body += kDigestTag;
  body += digest;
  body += '\n';
  return body;
}

Ruleset parse_ruleset(std::string_view text) {
  Ruleset rs = Ruleset::empty();
  std::optional<Table> section;
  std::set<std::string, std::less<>> declared;
  bool saw_digest = false;
  bool saw_version = false;

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t line_start = pos;
    std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(
        pos, (eol == std::string_view::npos ? text.size() : eol) - pos);
    pos = eol == std::string_view::npos ? text.size() : eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (saw_digest) {
      if (line.empty()) continue;
      fail_line(line_no, "content after #sha256 line");
    }
    if (line_no == 1) {
      if (line != kHeader)
        fail_line(line_no, "missing header '" + std::string(kHeader) + "'", 0);
      continue;
    }
    if (line.empty()) continue;

    if (line.starts_with(kDigestTag)) {
      auto stored = digest_from_hex(line.substr(kDigestTag.size()));
      if (!stored) fail_line(line_no, "malformed #sha256 line", kDigestTag.size());
      Digest actual = compute_checksum(text.substr(0, line_start));
      if (actual != *stored)
        throw IntegrityError("checksum mismatch: stored " + to_hex(*stored) +
                             ", computed " + to_hex(actual));
      saw_digest = true;
      continue;
    }
    if (line.starts_with(kVersionTag)) {
      if (saw_version) fail_line(line_no, "duplicate #version line");
      auto num = line.substr(kVersionTag.size());
      std::uint64_t v = 0;
      auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
      if (num.empty() || ec != std::errc{} || ptr != num.data() + num.size())
        fail_line(line_no, "malformed version '" + std::string(num) + "'",
                  kVersionTag.size());
      rs.version = v;
      saw_version = true;
      continue;
    }
    if (line[0] == '#') continue;  // comment

    if (line == "*filter") {
      section = Table::Filter;
      continue;
    }
    if (line == "*nat") {
      section = Table::Nat;
      continue;
    }
    if (line[0] == '*')
      fail_line(line_no, "unknown table '" + std::string(line.substr(1)) + "'", 1);

    if (!section) fail_line(line_no, "rule or chain outside a table section", 0);
    auto& chains = *section == Table::Filter ? rs.filter_chains : rs.nat_chains;

    if (line[0] == ':') {
      auto sp = line.find(' ');
      if (sp == std::string_view::npos)
        fail_line(line_no, "chain declaration needs a policy", line.size());
      std::string_view name = line.substr(1, sp - 1);
      std::string_view pol = line.substr(sp + 1);
      if (declared.contains(name))
        fail_line(line_no, "chain '" + std::string(name) + "' declared twice", 1);
      auto owner = builtin_table(name);
      if (owner) {
        if (*owner != *section)
          fail_line(line_no, "chain '" + std::string(name) + "' belongs to the " +
                                 std::string(to_string(*owner)) + " table", 1);
        Policy p;
        if (pol == "ACCEPT") p = Policy::Accept;
        else if (pol == "DROP") p = Policy::Drop;
        else
          fail_line(line_no, "built-in chain policy must be ACCEPT or DROP", sp + 1);
        chains.find(name)->second.policy = p;
      } else {
        if (*section == Table::Nat)
          fail_line(line_no, "user chains are only supported in the filter table", 1);
        if (pol != "-")
          fail_line(line_no, "user chain '" + std::string(name) +
                                 "' cannot carry a policy", sp + 1);
        if (!valid_user_chain_name(name))
          fail_line(line_no, "malformed chain name '" + std::string(name) + "'", 1);
        chains.emplace(std::string(name), Chain{std::string(name), {}, std::nullopt});
      }
      declared.emplace(name);
      continue;
    }

    if (line.starts_with("-A ")) {
      AppendCommand cmd;
      try {
        cmd = parse_rule(line);
      } catch (const ParseError& e) {
        fail_line(line_no, e.what(), e.column());
      }
      auto it = chains.find(cmd.chain);
      if (it == chains.end())
        fail_line(line_no, "unknown chain '" + cmd.chain + "' in " +
                               std::string(to_string(*section)) + " table", 3);
      it->second.rules.push_back(std::move(cmd.rule));
      continue;
    }
    fail_line(line_no, "unrecognized line", 0);
  }
  if (line_no == 0) fail_line(1, "missing header '" + std::string(kHeader) + "'", 0);

  validate_ruleset(rs);
  return rs;
}

void validate_ruleset(const Ruleset& rs) {
  for (Table table : {Table::Filter, Table::Nat}) {
    const auto& chains = rs.chains(table);
    auto order = table == Table::Filter
                      ? std::span<const std::string_view>(kFilterOrder)
                      : std::span<const std::string_view>(kNatOrder);
    for (auto name : order) {
      const Chain* c = rs.find(table, name);
      if (!c || !c->builtin())
        throw ValidationError("missing built-in chain " + std::string(name));
    }
    for (const auto& [name, chain] : chains) {
      if (name != chain.name)
        throw ValidationError("chain key '" + name + "' does not match its name");
      auto owner = builtin_table(name);
      if (owner && *owner != table)
        throw ValidationError("chain " + name + " in the wrong table");
      if (!owner && chain.builtin())
        throw ValidationError("user chain '" + name + "' cannot carry a policy");
      if (!owner && table == Table::Nat)
        throw ValidationError("user chain '" + name + "' in the nat table");
      for (std::size_t i = 0; i < chain.rules.size(); ++i)
        validate_rule(chain, table, i, chain.rules[i], chains);
    }
    check_acyclic(chains, table);
  }
  for (const auto& [name, _] : rs.filter_chains)
    if (rs.nat_chains.find(name) != rs.nat_chains.end())
      throw ValidationError("chain '" + name + "' present in both tables");
}

Ruleset append_rule(Ruleset rs, std::string_view chain, Rule r) {
  if (r.raw_text.empty()) r.raw_text = render_rule(chain, r);
  chain_for_update(rs, chain).rules.push_back(std::move(r));
  return rs;
}

Ruleset set_policy(Ruleset rs, std::string_view chain, Policy policy) {
  Chain& c = chain_for_update(rs, chain);
  if (!c.builtin())
    throw std::invalid_argument("policy can only be set on built-in chains, not '" +
                                std::string(chain) + "'");
  c.policy = policy;
  return rs;
}

Ruleset flush_chain(Ruleset rs, std::string_view chain) {
  chain_for_update(rs, chain).rules.clear();
  return rs;
}

Ruleset add_user_chain(Ruleset rs, std::string_view name) {
  if (!valid_user_chain_name(name))
    throw std::invalid_argument("malformed chain name '" + std::string(name) + "'");
  if (builtin_table(name) || rs.table_of(name))
    throw std::invalid_argument("chain '" + std::string(name) + "' already exists");
  rs.filter_chains.emplace(std::string(name),
                           Chain{std::string(name), {}, std::nullopt});
  return rs;
}

}  // namespace picofw
