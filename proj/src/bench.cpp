#include "picofw/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace picofw {

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size())
    throw ParseError("bad value '" + std::string(text) + "' for " + std::string(key));
  return v;
}

}  // namespace

PlatformProfile calibrate_profile(std::string name, double cpu_mhz, double t0_mbps,
                                  double tn_mbps, double n, double power_watts) {
  if (!(t0_mbps > 0) || !(tn_mbps > 0) || !(n > 0))
    throw std::invalid_argument("calibration inputs must be positive");
  if (!(t0_mbps > tn_mbps))
    throw std::invalid_argument("calibration needs t0 > tn (throughput must fall)");
  if (!(power_watts > 0)) throw std::invalid_argument("power_watts must be > 0");
  PlatformProfile p;
  p.name = std::move(name);
  p.cpu_mhz = cpu_mhz;
  p.base_cost = 1.0 / t0_mbps;
  p.per_rule_cost = (1.0 / tn_mbps - 1.0 / t0_mbps) / n;
  p.power_watts = power_watts;
  return p;
}

double model_throughput(const PlatformProfile& profile, double n_rules) {
  return 1.0 / (profile.base_cost + profile.per_rule_cost * n_rules);
}

std::optional<double> model_crossover(const PlatformProfile& a,
                                      const PlatformProfile& b) {
  double slope = a.per_rule_cost - b.per_rule_cost;
  if (slope == 0) return std::nullopt;
  double n = (b.base_cost - a.base_cost) / slope;
  if (n < 0) return std::nullopt;
  return n;
}

PlatformProfile raspberry_pi_profile() {
  return calibrate_profile("rpi", 700, 58, 20, 800, 3.5);
}

PlatformProfile cubieboard_profile() {
  // Power draw is not published alongside the throughput figures; 5 W is an
  // assumed nominal rating for an A10 board.
  return calibrate_profile("cubieboard", 1000, 54, 30, 800, 5.0);
}

std::optional<PlatformProfile> profile_by_name(std::string_view name) {
  if (name == "rpi" || name == "raspberrypi") return raspberry_pi_profile();
  if (name == "cubieboard" || name == "cubie") return cubieboard_profile();
  return std::nullopt;
}

std::string_view to_string(BenchMode m) {
  return m == BenchMode::Native ? "native" : "model";
}

BenchReport run_model_bench(const PlatformProfile& profile,
                            std::span<const std::size_t> rule_counts) {
  BenchReport r;
  r.mode = BenchMode::Model;
  r.platform = profile.name;
  std::vector<std::size_t> counts(rule_counts.begin(), rule_counts.end());
  std::sort(counts.begin(), counts.end());
  for (auto n : counts) {
    BenchPoint pt;
    pt.n_rules = n;
    pt.throughput_mbps = model_throughput(profile, static_cast<double>(n));
    pt.trial_mbps = {pt.throughput_mbps};
    r.points.push_back(std::move(pt));
  }
  return r;
}

BenchReport run_native_bench(Engine& engine, const StreamSpec& spec,
                             std::span<const std::size_t> rule_counts,
                             std::uint64_t seed, NativeBenchOptions opts) {
  if (!std::is_sorted(rule_counts.begin(), rule_counts.end()))
    throw std::invalid_argument("rule counts must be sorted ascending");
  if (opts.trials < 1) throw std::invalid_argument("trials must be >= 1");

  const std::vector<StreamPacket> stream = generate_stream(spec);
  const std::string chain(spec.path == BenchPath::Forward ? kForward : kInput);
  const auto previous = engine.ruleset();

  BenchReport report;
  report.mode = BenchMode::Native;
  report.platform = "native";
  const auto wall_start = std::chrono::steady_clock::now();

  for (std::size_t n : rule_counts) {
    RuleGenSpec gen{n, seed, opts.matchable_fraction, chain};
    Ruleset rs = Ruleset::empty();
    rs.version = previous->version;
    rs.filter_chains.at(chain).rules = generate_random_rules(gen, spec.flow());
    BenchPoint pt;
    pt.n_rules = n;
    pt.ruleset_digest = to_hex(rs.checksum());
    engine.swap_ruleset(std::move(rs));

    pt.data_traversal_min = std::numeric_limits<std::size_t>::max();
    for (int t = 0; t < opts.trials; ++t) {
      engine.flush_connections();
      const auto t0 = std::chrono::steady_clock::now();
      for (const StreamPacket& sp : stream) {
        Disposition d = engine.process_packet(sp.packet);
        pt.rules_traversed += d.rules_traversed;
        if (sp.role == SegmentRole::Data) {
          pt.data_traversal_min = std::min(pt.data_traversal_min, d.rules_traversed);
          pt.data_traversal_max = std::max(pt.data_traversal_max, d.rules_traversed);
        }
      }
      const Seconds elapsed = std::chrono::steady_clock::now() - t0;
      report.packets_processed += stream.size();
      double secs = std::max(elapsed.count(), 1e-9);
      pt.trial_mbps.push_back(static_cast<double>(spec.total_bytes) * 8.0 / secs / 1e6);
    }
    if (pt.data_traversal_min == std::numeric_limits<std::size_t>::max())
      pt.data_traversal_min = 0;
    pt.throughput_mbps = median(pt.trial_mbps);
    report.points.push_back(std::move(pt));
  }

  report.ruleset_version = engine.ruleset()->version;
  engine.swap_ruleset(*previous);
  engine.flush_connections();
  report.wall_time_s = Seconds(std::chrono::steady_clock::now() - wall_start).count();
  return report;
}

EnergyEstimate estimate_energy(double watts, double tariff_per_kwh) {
  if (!(watts > 0)) throw std::invalid_argument("watts must be > 0");
  if (!(tariff_per_kwh >= 0)) throw std::invalid_argument("tariff must be >= 0");
  EnergyEstimate e;
  e.watts = watts;
  e.tariff_per_kwh = tariff_per_kwh;
  e.daily_wh = watts * 24.0;
  e.daily_kwh = e.daily_wh / 1000.0;
  e.daily_cost = e.daily_kwh * tariff_per_kwh;
  e.annual_cost = e.daily_cost * 365.0;
  return e;
}

std::string emit_report(const BenchReport& report, CsvOptions opts) {
  std::string out = "n_rules,throughput_mbps,mode,platform\n";
  for (const BenchPoint& pt : report.points) {
    out += std::to_string(pt.n_rules);
    out += ',';
    out += opts.timing ? fixed6(pt.throughput_mbps) : std::string("NA");
    out += ',';
    out += to_string(report.mode);
    out += ',';
    out += report.platform;
    out += '\n';
  }
  if (opts.with_presets) {
    for (const LinkPreset& lp : kLinkPresets) {
      out += "preset,";
      out += lp.name;
      out += ',';
      out += shortest(lp.net_bandwidth_mbps);
      out += '\n';
    }
  }
  return out;
}

std::vector<std::size_t> parse_rule_counts(std::string_view csv) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    auto comma = csv.find(',', pos);
    if (comma == std::string_view::npos) comma = csv.size();
    out.push_back(parse_number<std::size_t>("rules", trim(csv.substr(pos, comma - pos))));
    pos = comma + 1;
  }
  return out;
}

BenchConfig parse_bench_config(std::string_view text) {
  BenchConfig cfg;
  std::optional<std::string> name;
  std::optional<double> cpu, base, per_rule, power, t0, tn, n;

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ParseError("line " + std::to_string(line_no) + ": expected key=value");
    std::string_view key = trim(line.substr(0, eq));
    std::string_view val = trim(line.substr(eq + 1));

    StreamSpec& s = cfg.stream;
    if (key == "client") s.client = parse_ip(val);
    else if (key == "server") s.server = parse_ip(val);
    else if (key == "client_port") s.client_port = parse_number<std::uint16_t>(key, val);
    else if (key == "server_port") s.server_port = parse_number<std::uint16_t>(key, val);
    else if (key == "segment_bytes") s.segment_bytes = parse_number<std::uint32_t>(key, val);
    else if (key == "window_bytes") s.window_bytes = parse_number<std::uint32_t>(key, val);
    else if (key == "total_bytes") s.total_bytes = parse_number<std::uint64_t>(key, val);
    else if (key == "path") {
      if (val == "FORWARD" || val == "forward") s.path = BenchPath::Forward;
      else if (val == "INPUT" || val == "input") s.path = BenchPath::Input;
      else throw ParseError("bad path '" + std::string(val) + "'");
    }
    else if (key == "name") name = std::string(val);
    else if (key == "cpu_mhz") cpu = parse_number<double>(key, val);
    else if (key == "base_cost") base = parse_number<double>(key, val);
    else if (key == "per_rule_cost") per_rule = parse_number<double>(key, val);
    else if (key == "power_watts") power = parse_number<double>(key, val);
    else if (key == "t0_mbps") t0 = parse_number<double>(key, val);
    else if (key == "tn_mbps") tn = parse_number<double>(key, val);
    else if (key == "n") n = parse_number<double>(key, val);
    else if (key == "rules") cfg.rule_counts = parse_rule_counts(val);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "trials") cfg.trials = parse_number<int>(key, val);
    else
      throw ParseError("line " + std::to_string(line_no) + ": unknown key '" +
                       std::string(key) + "'");
  }
  check_stream_spec(cfg.stream);

  if (t0 || tn || n) {
    if (!(t0 && tn && n && power))
      throw ParseError("calibration needs t0_mbps, tn_mbps, n and power_watts");
    cfg.profile = calibrate_profile(name.value_or("custom"), cpu.value_or(0), *t0,
                                    *tn, *n, *power);
  } else if (base || per_rule) {
    if (!(base && per_rule && power))
      throw ParseError("profile needs base_cost, per_rule_cost and power_watts");
    if (!(*base > 0 && *per_rule > 0 && *power > 0))
      throw ParseError("profile costs and power must be positive");
    cfg.profile = PlatformProfile{name.value_or("custom"), cpu.value_or(0), *base,
                                  *per_rule, *power};
  } else if (name) {
    cfg.profile = profile_by_name(*name);
    if (!cfg.profile) throw ParseError("unknown platform '" + *name + "'");
  }
  return cfg;
}

}  // namespace picofw
