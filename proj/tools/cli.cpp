#include "cli.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "picofw/bench.hpp"
#include "picofw/ruleset.hpp"
#include "picofw/sync.hpp"

namespace fwctl {

using namespace picofw;

namespace {

// Usage problems found after CLI11 accepted the flags.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

Ruleset load_ruleset(const std::string& path) { return parse_ruleset(read_file(path)); }

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

std::pair<IpAddr4, std::optional<std::uint16_t>> parse_endpoint(std::string_view tok) {
  auto colon = tok.find(':');
  IpAddr4 addr = parse_ip(tok.substr(0, colon));
  if (colon == std::string_view::npos) return {addr, std::nullopt};
  std::string_view port = tok.substr(colon + 1);
  unsigned v = 0;
  auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
  if (port.empty() || ec != std::errc{} || ptr != port.data() + port.size() || v > 65535)
    throw ParseError("bad port '" + std::string(port) + "'");
  return {addr, static_cast<std::uint16_t>(v)};
}

Policy parse_policy(std::string_view s) {
  if (s == "ACCEPT") return Policy::Accept;
  if (s == "DROP") return Policy::Drop;
  throw UsageError("policy must be ACCEPT or DROP");
}

void print_disposition(std::ostream& out, const Packet& in, const Disposition& d) {
  out << to_string(d.outcome) << " rules_traversed=" << d.rules_traversed << '\n';
  if (!(d.final_packet.src == in.src && d.final_packet.dst == in.dst &&
        d.final_packet.sport == in.sport && d.final_packet.dport == in.dport))
    out << "  rewritten " << summarize(d.final_packet) << '\n';
  for (const Event& e : d.events) out << "  event " << to_string(e.kind) << ' ' << e.detail << '\n';
}

// Blocks SIGINT/SIGTERM for every thread started afterwards and returns
// once one arrives.
struct SignalWaiter {
  sigset_t set;
  SignalWaiter() {
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
  }
  ~SignalWaiter() { pthread_sigmask(SIG_UNBLOCK, &set, nullptr); }
  void wait() {
    int sig = 0;
    sigwait(&set, &sig);
  }
};

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

Packet parse_packet_literal(std::string_view text) {
  auto tok = split_ws(text);
  if (tok.size() < 4 || tok[2] != ">")
    throw ParseError("packet literal: expected '<proto> <src>:<sport> > <dst>:<dport> ...'");
  Packet p;
  auto proto = proto_from_string(tok[0]);
  if (!proto) throw ParseError("packet literal: unknown protocol '" + std::string(tok[0]) + "'");
  p.proto = *proto;
  auto [src, sport] = parse_endpoint(tok[1]);
  auto [dst, dport] = parse_endpoint(tok[3]);
  if (p.proto != Proto::Icmp && (!sport || !dport))
    throw ParseError("packet literal: tcp and udp need ports");
  p.src = src;
  p.dst = dst;
  p.sport = sport.value_or(0);
  p.dport = dport.value_or(0);
  p.size_bytes = min_packet_size(p.proto);

  std::string_view dir = "fwd";
  bool dir_seen = false;
  std::uint8_t bits = 0;
  for (std::size_t i = 4; i < tok.size(); ++i) {
    std::string_view t = tok[i];
    if (dir_seen) throw ParseError("packet literal: trailing '" + std::string(t) + "'");
    if (t == "syn") bits |= TcpFlag::kSyn;
    else if (t == "ack") bits |= TcpFlag::kAck;
    else if (t == "fin") bits |= TcpFlag::kFin;
    else if (t == "rst") bits |= TcpFlag::kRst;
    else if (t == "fwd" || t == "local" || t == "out") {
      dir = t;
      dir_seen = true;
    } else {
      throw ParseError("packet literal: unknown token '" + std::string(t) + "'");
    }
  }
  if (bits && p.proto != Proto::Tcp)
    throw ParseError("packet literal: flags apply to tcp only");
  p.tcp_flags = flags(bits);
  if (dir == "fwd") {
    p.in_iface = "eth0";
    p.out_iface = "eth1";
  } else if (dir == "local") {
    p.in_iface = "eth0";
    p.dst_is_local = true;
  } else {
    p.out_iface = "eth0";
  }
  check_packet(p);
  return p;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"fwctl: userspace firewall, benchmark and policy sync tool", "fwctl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every verb");

  // load
  std::string rs_path;
  auto* load = app.add_subcommand("load", "Parse and validate a ruleset image");
  load->add_option("ruleset,--ruleset", rs_path, "Image file")->required();

  // save
  std::string save_in, save_out;
  auto* save = app.add_subcommand("save", "Write a ruleset in canonical form");
  save->add_option("--ruleset", save_in, "Input image (default: empty ruleset)");
  save->add_option("--out,-o", save_out, "Output file (default: stdout)");

  // append / flush / policy edit the image in place unless --out is given.
  std::string edit_path, edit_out, rule_text, chain_name, new_chain, policy_name;
  auto add_edit_opts = [&](CLI::App* c) {
    c->add_option("--ruleset", edit_path, "Image file")->required();
    c->add_option("--out,-o", edit_out, "Write here instead of in place");
  };
  auto* append = app.add_subcommand("append", "Append a rule to a chain");
  add_edit_opts(append);
  append->add_option("--rule", rule_text, "Rule line, e.g. \"-A INPUT -p tcp --dport 22 -j ACCEPT\"");
  append->add_option("--new-chain", new_chain, "Create a user chain first");
  auto* flush = app.add_subcommand("flush", "Remove every rule from a chain");
  add_edit_opts(flush);
  flush->add_option("--chain", chain_name, "Chain name")->required();
  auto* policy = app.add_subcommand("policy", "Set a built-in chain's policy");
  add_edit_opts(policy);
  policy->add_option("--chain", chain_name, "Built-in chain")->required();
  policy->add_option("--target", policy_name, "ACCEPT or DROP")->required();

  // eval / trace
  std::string eval_rs;
  std::vector<std::string> packets;
  auto add_eval_opts = [&](CLI::App* c) {
    c->add_option("--ruleset", eval_rs, "Image file (default: empty ruleset)");
    c->add_option("--packet", packets, "Packet literal; repeat for a sequence")->required();
  };
  auto* eval = app.add_subcommand("eval", "Run packets through the engine");
  add_eval_opts(eval);
  auto* trace = app.add_subcommand("trace", "eval with a per-rule decision log");
  add_eval_opts(trace);

  // bench
  std::string mode = "model", platform = "rpi", rules_csv, config_path, path_name = "forward";
  std::uint64_t seed = 1, total_bytes = StreamSpec{}.total_bytes;
  int trials = 3;
  bool csv = false, presets = false, no_timing = false;
  auto* bench = app.add_subcommand("bench", "Throughput versus rule count");
  bench->add_option("--mode", mode, "model or native")
      ->check(CLI::IsMember({"model", "native"}));
  bench->add_option("--platform", platform, "rpi or cubieboard (model mode)");
  bench->add_option("--rules", rules_csv, "Comma-separated rule counts");
  bench->add_option("--config", config_path, "key=value bench config file");
  bench->add_option("--seed", seed, "Rule generator seed");
  bench->add_option("--trials", trials, "Trials per rule count (median reported)")
      ->check(CLI::PositiveNumber);
  bench->add_option("--total-bytes", total_bytes, "Stream payload bytes per trial")
      ->check(CLI::PositiveNumber);
  bench->add_option("--path", path_name, "forward or input")
      ->check(CLI::IsMember({"forward", "input"}));
  bench->add_flag("--csv", csv, "CSV output");
  bench->add_flag("--presets", presets, "Append link preset rows");
  bench->add_flag("--no-timing", no_timing, "Write NA for measured throughput");

  // energy
  double watts = 0, tariff = 0;
  auto* energy = app.add_subcommand("energy", "Running cost of an always-on device");
  energy->add_option("--watts", watts, "Power draw")->required();
  energy->add_option("--tariff", tariff, "Price per kWh")->required();

  // serve / agent / fleet / publish
  std::string listen = "0.0.0.0:7070", data_dir, server_addr, group, agent_id,
              agent_platform = "unknown", agent_rs;
  double poll_secs = 60, stats_secs = 60;
  auto* serve = app.add_subcommand("serve", "Run the policy server");
  serve->add_option("--listen", listen, "addr:port");
  serve->add_option("--data-dir", data_dir, "Persistence directory");
  auto* agent = app.add_subcommand("agent", "Run a policy agent");
  agent->add_option("--server", server_addr, "addr:port")->required();
  agent->add_option("--group", group, "Policy group")->required();
  agent->add_option("--agent-id", agent_id, "Agent id")->required();
  agent->add_option("--poll-secs", poll_secs, "Poll interval")->check(CLI::PositiveNumber);
  agent->add_option("--stats-secs", stats_secs, "Stats interval")->check(CLI::PositiveNumber);
  agent->add_option("--platform", agent_platform, "Platform name reported to the server");
  agent->add_option("--ruleset", agent_rs, "Initial ruleset image");
  auto* fleet = app.add_subcommand("fleet", "Show a group's agents");
  fleet->add_option("--server", server_addr, "addr:port")->required();
  fleet->add_option("--group", group, "Policy group")->required();
  auto* publish = app.add_subcommand("publish", "Publish an image to a group");
  publish->add_option("--server", server_addr, "addr:port")->required();
  publish->add_option("--group", group, "Policy group")->required();
  publish->add_option("--ruleset", rs_path, "Image file")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*load) {
      Ruleset rs = load_ruleset(rs_path);
      std::size_t n = 0;
      for (Table t : {Table::Filter, Table::Nat})
        for (const auto& [name, c] : rs.chains(t)) n += c.rules.size();
      out << "ok version=" << rs.version << " rules=" << n
          << " sha256=" << to_hex(rs.checksum()) << '\n';
    } else if (*save) {
      Ruleset rs = save_in.empty() ? Ruleset::empty() : load_ruleset(save_in);
      std::string image = serialize_ruleset(rs);
      if (save_out.empty()) out << image;
      else write_file(save_out, image);
    } else if (*append || *flush || *policy) {
      Ruleset rs = load_ruleset(edit_path);
      if (*append) {
        if (rule_text.empty() && new_chain.empty())
          throw UsageError("append needs --rule and/or --new-chain");
        if (!new_chain.empty()) rs = add_user_chain(std::move(rs), new_chain);
        if (!rule_text.empty()) {
          AppendCommand cmd = parse_rule(rule_text);
          rs = append_rule(std::move(rs), cmd.chain, std::move(cmd.rule));
        }
      } else if (*flush) {
        rs = flush_chain(std::move(rs), chain_name);
      } else {
        rs = set_policy(std::move(rs), chain_name, parse_policy(policy_name));
      }
      rs.version += 1;
      validate_ruleset(rs);
      write_file(edit_out.empty() ? edit_path : edit_out, serialize_ruleset(rs));
      out << "ok version=" << rs.version << '\n';
    } else if (*eval || *trace) {
      Engine engine(eval_rs.empty() ? Ruleset::empty() : load_ruleset(eval_rs));
      for (const std::string& lit : packets) {
        Packet p = parse_packet_literal(lit);
        TraceFn fn;
        if (*trace) {
          fn = [&out](const TraceStep& s) {
            out << "  " << to_string(s.table) << ' ' << s.chain << " #" << s.index
                << (s.matched ? " match " : " skip  ") << render_rule_spec(*s.rule) << '\n';
          };
          out << summarize(p) << '\n';
        }
        Disposition d = engine.process_packet(p, fn);
        print_disposition(out, p, d);
      }
    } else if (*bench) {
      BenchConfig cfg;
      if (!config_path.empty()) cfg = parse_bench_config(read_file(config_path));
      std::vector<std::size_t> counts = cfg.rule_counts;
      if (!rules_csv.empty()) counts = parse_rule_counts(rules_csv);
      if (counts.empty()) counts.assign(std::begin(kDefaultSweep), std::end(kDefaultSweep));
      std::sort(counts.begin(), counts.end());

      BenchReport report;
      if (mode == "model") {
        std::optional<PlatformProfile> prof = cfg.profile;
        if (!prof || bench->count("--platform")) prof = profile_by_name(platform);
        if (!prof) throw UsageError("unknown platform '" + platform + "'");
        report = run_model_bench(*prof, counts);
      } else {
        StreamSpec spec = cfg.stream;
        if (bench->count("--total-bytes")) spec.total_bytes = total_bytes;
        if (bench->count("--path"))
          spec.path = path_name == "input" ? BenchPath::Input : BenchPath::Forward;
        if (!bench->count("--seed") && cfg.seed) seed = *cfg.seed;
        if (!bench->count("--trials") && cfg.trials) trials = *cfg.trials;
        check_stream_spec(spec);
        Engine engine;
        report = run_native_bench(engine, spec, counts, seed, NativeBenchOptions{trials, 0.0});
      }
      CsvOptions copts{presets, !no_timing};
      if (csv) {
        out << emit_report(report, copts);
      } else {
        out << "mode=" << to_string(report.mode) << " platform=" << report.platform << '\n';
        for (const BenchPoint& pt : report.points) {
          out << std::setw(8) << pt.n_rules << " rules  ";
          if (no_timing) out << "NA";
          else out << std::fixed << std::setprecision(3) << pt.throughput_mbps << " Mbps";
          out.unsetf(std::ios::floatfield);
          if (report.mode == BenchMode::Native)
            out << "  rules_traversed=" << pt.rules_traversed << "  sha256=" << pt.ruleset_digest;
          out << '\n';
        }
        if (presets)
          for (const LinkPreset& lp : kLinkPresets)
            out << "preset " << lp.name << ' ' << fmt(lp.net_bandwidth_mbps) << " Mbps\n";
      }
    } else if (*energy) {
      EnergyEstimate e = estimate_energy(watts, tariff);
      out << "watts " << fmt(e.watts) << '\n'
          << "tariff_per_kwh " << fmt(e.tariff_per_kwh) << '\n'
          << "daily_wh " << fmt(e.daily_wh) << '\n'
          << "daily_kwh " << fmt(e.daily_kwh) << '\n'
          << "daily_cost " << fmt(e.daily_cost) << '\n'
          << "annual_cost " << fmt(e.annual_cost) << '\n';
      char buf[64];
      std::snprintf(buf, sizeof buf, "annual $%.2f\n", e.annual_cost);
      out << buf;
    } else if (*serve) {
      SignalWaiter signals;
      PolicyServer server(data_dir.empty() ? std::nullopt
                                           : std::optional<std::filesystem::path>(data_dir));
      SyncListener listener(server, parse_host_port(listen));
      out << "listening on port " << listener.port() << std::endl;
      signals.wait();
      listener.stop();
    } else if (*agent) {
      SignalWaiter signals;
      Engine engine(agent_rs.empty() ? Ruleset::empty() : load_ruleset(agent_rs));
      Agent a(AgentIdentity{agent_id, group, agent_platform, 0}, engine);
      HostPort hp = parse_host_port(server_addr);
      Agent::RunOptions opts;
      opts.poll = Seconds{poll_secs};
      opts.stats = Seconds{stats_secs};
      std::jthread loop([&](std::stop_token st) {
        a.run([&] { return tcp_exchange(hp); }, opts, st);
      });
      signals.wait();
      loop.request_stop();
      loop.join();
      out << "applied_version=" << a.applied_version() << '\n';
    } else if (*fleet || *publish) {
      Exchange x = tcp_exchange(parse_host_port(server_addr));
      Message m;
      m.group_id = group;
      if (*fleet) {
        m.kind = MessageKind::Fleet;
      } else {
        m.kind = MessageKind::Ruleset;
        m.image = read_file(rs_path);
      }
      Message r = decode_message(x(encode_message(m)));
      if (r.kind == MessageKind::Error) {
        err << "fwctl: " << r.code.value_or("ERROR") << ": " << r.text.value_or("") << '\n';
        return 2;
      }
      if (*publish) {
        out << "published version=" << r.version.value_or(0) << '\n';
      } else if (r.fleet) {
        const FleetSummary& f = *r.fleet;
        out << "group " << f.group_id << " current_version=" << f.current_version
            << " agents=" << f.agents.size() << " version_skew=" << (f.version_skew ? "yes" : "no")
            << " total_packets=" << f.total_packets << " total_bytes=" << f.total_bytes << '\n';
        for (const FleetAgent& a : f.agents)
          out << "  " << a.agent_id << " platform=" << a.platform
              << " applied_version=" << a.applied_version << " packets=" << a.packets
              << " bytes=" << a.bytes << '\n';
      }
    }
  } catch (const UsageError& e) {
    err << "fwctl: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "fwctl: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace fwctl
