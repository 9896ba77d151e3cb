#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "picofw/engine.hpp"
#include "picofw/net.hpp"

namespace picofw {

enum class BenchPath : std::uint8_t { Forward, Input };

std::string_view to_string(BenchPath p);

// One bulk TCP transfer from client to server through the firewall.
struct StreamSpec {
  IpAddr4 client = IpAddr4{{10, 0, 0, 2}};
  IpAddr4 server = IpAddr4{{10, 0, 1, 2}};
  std::uint16_t client_port = 40000;
  std::uint16_t server_port = 5001;
  std::uint32_t segment_bytes = 1500;  // payload per data segment
  std::uint32_t window_bytes = 16384;
  std::uint64_t total_bytes = 64ull << 20;
  BenchPath path = BenchPath::Forward;

  FlowKey flow() const;
};

enum class SegmentRole : std::uint8_t { Handshake, Data, Ack, Teardown };

struct StreamPacket {
  Packet packet;
  SegmentRole role;
  std::uint32_t payload = 0;   // Data only
  std::uint64_t acked = 0;     // Ack only: cumulative payload bytes acknowledged
};

// Throws std::invalid_argument for an unusable spec.
void check_stream_spec(const StreamSpec& spec);

// 3-way handshake, data paced so at most window_bytes are unacknowledged
// (a cumulative ACK is sent whenever the next segment would overflow the
// window, and once after the last segment), then FIN/ACK in each direction.
std::vector<StreamPacket> generate_stream(const StreamSpec& spec);

struct PlatformProfile {
  std::string name;
  double cpu_mhz = 0;
  double base_cost = 0;      // 1/Mbps at zero rules
  double per_rule_cost = 0;  // 1/Mbps added per traversed rule
  double power_watts = 0;

  friend bool operator==(const PlatformProfile&, const PlatformProfile&) = default;
};

// Solves T(r) = 1 / (base + per_rule * r) through (0, t0) and (n, tn).
PlatformProfile calibrate_profile(std::string name, double cpu_mhz, double t0_mbps,
                                  double tn_mbps, double n, double power_watts);

double model_throughput(const PlatformProfile& profile, double n_rules);

// Rule count at which the two model curves meet, if they do at n >= 0.
std::optional<double> model_crossover(const PlatformProfile& a,
                                      const PlatformProfile& b);

// Raspberry Pi Model B: 700 MHz, 58 -> 20 Mbps over 800 rules, 3.5 W.
PlatformProfile raspberry_pi_profile();
// Cubieboard: 1 GHz, 54 -> 30 Mbps over 800 rules.
PlatformProfile cubieboard_profile();
// Lookup by short name ("rpi", "cubieboard").
std::optional<PlatformProfile> profile_by_name(std::string_view name);

enum class BenchMode : std::uint8_t { Native, Model };

std::string_view to_string(BenchMode m);

struct BenchPoint {
  std::size_t n_rules = 0;
  double throughput_mbps = 0;  // median over trials
  std::vector<double> trial_mbps;
  std::uint64_t rules_traversed = 0;  // all packets, all trials
  std::size_t data_traversal_min = 0;
  std::size_t data_traversal_max = 0;
  std::string ruleset_digest;
};

struct BenchReport {
  BenchMode mode = BenchMode::Model;
  std::string platform;
  std::vector<BenchPoint> points;
  std::uint64_t packets_processed = 0;
  double wall_time_s = 0;
  std::uint64_t ruleset_version = 0;
};

BenchReport run_model_bench(const PlatformProfile& profile,
                            std::span<const std::size_t> rule_counts);

struct NativeBenchOptions {
  int trials = 3;
  double matchable_fraction = 0.0;
};

// For each n, installs n random rules in the path's filter chain (policy
// ACCEPT lets the flow through after the scan), replays the stream and
// reports payload bits over engine processing time. The engine's previous
// ruleset is restored afterwards.
BenchReport run_native_bench(Engine& engine, const StreamSpec& spec,
                             std::span<const std::size_t> rule_counts,
                             std::uint64_t seed, NativeBenchOptions opts = {});

inline constexpr std::size_t kDefaultSweep[] = {0,    100,  200,  400,   800,
                                                1600, 3200, 6400, 12800, 20000};

struct EnergyEstimate {
  double watts = 0;
  double tariff_per_kwh = 0;
  double daily_wh = 0;
  double daily_kwh = 0;
  double daily_cost = 0;
  double annual_cost = 0;
};

EnergyEstimate estimate_energy(double watts, double tariff_per_kwh);

struct CsvOptions {
  bool with_presets = false;
  bool timing = true;  // false writes NA instead of throughput
};

std::string emit_report(const BenchReport& report, CsvOptions opts = {});

// Flat key=value bench configuration.
struct BenchConfig {
  StreamSpec stream;
  std::optional<PlatformProfile> profile;
  std::vector<std::size_t> rule_counts;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
};

BenchConfig parse_bench_config(std::string_view text);

std::vector<std::size_t> parse_rule_counts(std::string_view csv);

}  // namespace picofw
