#include <charconv>
#include <vector>

#include "picofw/ruleset.hpp"

namespace picofw {

namespace {

struct Token {
  std::string_view text;
  std::size_t column;
};

std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    if (i >= line.size()) break;
    std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    out.push_back({line.substr(start, i - start), start});
  }
  return out;
}

[[noreturn]] void fail(const std::string& msg, std::size_t column) {
  throw ParseError(msg + " (column " + std::to_string(column) + ")", column);
}

std::uint16_t parse_port(std::string_view text, std::size_t column) {
  unsigned v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size() ||
      v > 65535)
    fail("malformed port '" + std::string(text) + "'", column);
  return static_cast<std::uint16_t>(v);
}

PortRange parse_port_range(const Token& tok) {
  auto colon = tok.text.find(':');
  if (colon == std::string_view::npos) {
    auto p = parse_port(tok.text, tok.column);
    return {p, p};
  }
  PortRange r{parse_port(tok.text.substr(0, colon), tok.column),
              parse_port(tok.text.substr(colon + 1), tok.column + colon + 1)};
  if (r.lo > r.hi)
    fail("port range '" + std::string(tok.text) + "' has lo > hi", tok.column);
  return r;
}

CidrBlock parse_cidr_token(const Token& tok) {
  try {
    return parse_cidr(tok.text);
  } catch (const ParseError& e) {
    fail(e.what(), tok.column);
  }
}

IpAddr4 parse_ip_token(std::string_view text, std::size_t column) {
  try {
    return parse_ip(text);
  } catch (const ParseError& e) {
    fail(e.what(), column);
  }
}

bool valid_chain_name(std::string_view name) {
  if (name.empty() || name.size() > 64) return false;
  for (char c : name) {
    bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
              (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
    if (!ok) return false;
  }
  return name[0] != '-';
}

std::optional<TargetKind> builtin_target(std::string_view name) {
  if (name == "ACCEPT") return TargetKind::Accept;
  if (name == "DROP") return TargetKind::Drop;
  if (name == "REJECT") return TargetKind::Reject;
  if (name == "LOG") return TargetKind::Log;
  if (name == "SNAT") return TargetKind::Snat;
  if (name == "DNAT") return TargetKind::Dnat;
  if (name == "MASQUERADE") return TargetKind::Masquerade;
  if (name == "RETURN") return TargetKind::Return;
  return std::nullopt;
}

std::optional<ConnState> conn_state_from_string(std::string_view s) {
  if (s == "NEW") return ConnState::New;
  if (s == "ESTABLISHED") return ConnState::Established;
  if (s == "INVALID") return ConnState::Invalid;
  return std::nullopt;
}

// Parses the flag tokens starting at `first`. `line` is kept as raw_text.
Rule parse_flags(const std::vector<Token>& toks, std::size_t first,
                 std::string_view line) {
  Rule r;
  r.raw_text = std::string(line);
  MatchSpec& m = r.match;
  std::optional<Token> sport_tok, dport_tok, to_tok, state_module_tok;
  bool have_target = false;

  auto value_of = [&](std::size_t& i) -> const Token& {
    if (i + 1 >= toks.size())
      fail("flag '" + std::string(toks[i].text) + "' needs a value",
           toks[i].column);
    return toks[++i];
  };
  auto once = [&](bool present, const Token& flag) {
    if (present)
      fail("duplicate flag '" + std::string(flag.text) + "'", flag.column);
  };

  for (std::size_t i = first; i < toks.size(); ++i) {
    const Token& flag = toks[i];
    std::string_view f = flag.text;
    if (f == "-p") {
      once(m.proto.has_value(), flag);
      const Token& v = value_of(i);
      auto p = proto_from_string(v.text);
      if (!p) fail("unknown protocol '" + std::string(v.text) + "'", v.column);
      m.proto = p;
    } else if (f == "-s") {
      once(m.src.has_value(), flag);
      m.src = parse_cidr_token(value_of(i));
    } else if (f == "-d") {
      once(m.dst.has_value(), flag);
      m.dst = parse_cidr_token(value_of(i));
    } else if (f == "--sport") {
      once(m.sport.has_value(), flag);
      sport_tok = flag;
      m.sport = parse_port_range(value_of(i));
    } else if (f == "--dport") {
      once(m.dport.has_value(), flag);
      dport_tok = flag;
      m.dport = parse_port_range(value_of(i));
    } else if (f == "-i") {
      once(m.in_iface.has_value(), flag);
      m.in_iface = std::string(value_of(i).text);
    } else if (f == "-o") {
      once(m.out_iface.has_value(), flag);
      m.out_iface = std::string(value_of(i).text);
    } else if (f == "-m") {
      const Token& v = value_of(i);
      if (v.text != "state")
        fail("unknown match module '" + std::string(v.text) + "'", v.column);
      once(state_module_tok.has_value(), flag);
      state_module_tok = flag;
    } else if (f == "--state") {
      if (!state_module_tok) fail("--state requires '-m state'", flag.column);
      once(m.conn_states.has_value(), flag);
      const Token& v = value_of(i);
      ConnStateSet set;
      std::size_t pos = 0;
      while (pos <= v.text.size()) {
        auto comma = v.text.find(',', pos);
        if (comma == std::string_view::npos) comma = v.text.size();
        auto name = v.text.substr(pos, comma - pos);
        auto s = conn_state_from_string(name);
        if (!s)
          fail("unknown connection state '" + std::string(name) + "'",
               v.column + pos);
        set.add(*s);
        pos = comma + 1;
      }
      m.conn_states = set;
    } else if (f == "-j") {
      once(have_target, flag);
      const Token& v = value_of(i);
      if (auto k = builtin_target(v.text)) {
        r.target = Target::of(*k);
      } else if (valid_chain_name(v.text)) {
        r.target = Target::jump(std::string(v.text));
      } else {
        fail("malformed target '" + std::string(v.text) + "'", v.column);
      }
      have_target = true;
    } else if (f == "--to") {
      once(to_tok.has_value(), flag);
      to_tok = value_of(i);
    } else {
      fail("unknown flag '" + std::string(f) + "'", flag.column);
    }
  }

  if (state_module_tok && !m.conn_states)
    fail("'-m state' without --state", state_module_tok->column);
  if (!have_target) fail("missing -j", line.size());

  bool ported = m.proto == Proto::Tcp || m.proto == Proto::Udp;
  if (sport_tok && !ported)
    fail("--sport requires -p tcp or -p udp", sport_tok->column);
  if (dport_tok && !ported)
    fail("--dport requires -p tcp or -p udp", dport_tok->column);

  TargetKind k = r.target.kind;
  bool needs_to = k == TargetKind::Snat || k == TargetKind::Dnat;
  if (to_tok && !needs_to)
    fail("--to given for non-NAT target " + std::string(to_string(k)),
         to_tok->column);
  if (needs_to && !to_tok)
    fail(std::string(to_string(k)) + " requires --to", line.size());
  if (to_tok) {
    NatTo to;
    auto colon = to_tok->text.find(':');
    to.addr = parse_ip_token(to_tok->text.substr(0, colon), to_tok->column);
    if (colon != std::string_view::npos)
      to.port = parse_port(to_tok->text.substr(colon + 1),
                           to_tok->column + colon + 1);
    r.target.nat_to = to;
  }
  return r;
}

std::string render_ports(PortRange r) {
  if (r.lo == r.hi) return std::to_string(r.lo);
  return std::to_string(r.lo) + ":" + std::to_string(r.hi);
}

}  // namespace

std::string_view to_string(ConnState s) {
  switch (s) {
    case ConnState::New: return "NEW";
    case ConnState::Established: return "ESTABLISHED";
    case ConnState::Invalid: return "INVALID";
  }
  return "?";
}

std::string_view to_string(TargetKind k) {
  switch (k) {
    case TargetKind::Accept: return "ACCEPT";
    case TargetKind::Drop: return "DROP";
    case TargetKind::Reject: return "REJECT";
    case TargetKind::Log: return "LOG";
    case TargetKind::Snat: return "SNAT";
    case TargetKind::Dnat: return "DNAT";
    case TargetKind::Masquerade: return "MASQUERADE";
    case TargetKind::Jump: return "JUMP";
    case TargetKind::Return: return "RETURN";
  }
  return "?";
}

AppendCommand parse_rule(std::string_view line) {
  auto toks = tokenize(line);
  if (toks.empty()) fail("empty rule", 0);
  if (toks[0].text != "-A")
    fail("rule must start with -A, got '" + std::string(toks[0].text) + "'",
         toks[0].column);
  if (toks.size() < 2) fail("-A needs a chain name", toks[0].column);
  if (!valid_chain_name(toks[1].text))
    fail("malformed chain name '" + std::string(toks[1].text) + "'",
         toks[1].column);
  AppendCommand cmd;
  cmd.chain = std::string(toks[1].text);
  cmd.rule = parse_flags(toks, 2, line);
  return cmd;
}

Rule parse_rule_spec(std::string_view spec) {
  return parse_flags(tokenize(spec), 0, spec);
}

std::string render_rule_spec(const Rule& r) {
  const MatchSpec& m = r.match;
  std::string s;
  auto add = [&s](std::string_view flag, std::string_view value) {
    if (!s.empty()) s += ' ';
    s += flag;
    s += ' ';
    s += value;
  };
  if (m.proto) add("-p", to_string(*m.proto));
  if (m.src) add("-s", render_cidr(*m.src));
  if (m.dst) add("-d", render_cidr(*m.dst));
  if (m.sport) add("--sport", render_ports(*m.sport));
  if (m.dport) add("--dport", render_ports(*m.dport));
  if (m.in_iface) add("-i", *m.in_iface);
  if (m.out_iface) add("-o", *m.out_iface);
  if (m.conn_states) {
    std::string states;
    for (auto st : {ConnState::New, ConnState::Established, ConnState::Invalid}) {
      if (!m.conn_states->has(st)) continue;
      if (!states.empty()) states += ',';
      states += to_string(st);
    }
    add("-m", "state");
    add("--state", states);
  }
  if (r.target.kind == TargetKind::Jump)
    add("-j", r.target.jump_chain.value_or(""));
  else
    add("-j", to_string(r.target.kind));
  if (r.target.nat_to) {
    std::string to = to_string(r.target.nat_to->addr);
    if (r.target.nat_to->port) to += ":" + std::to_string(*r.target.nat_to->port);
    add("--to", to);
  }
  return s;
}

std::string render_rule(std::string_view chain, const Rule& r) {
  return "-A " + std::string(chain) + " " + render_rule_spec(r);
}

}  // namespace picofw
