#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include "picofw/checksum.hpp"
#include "picofw/engine.hpp"

namespace picofw {

// ---------------------------------------------------------------------------
// Wire messages: one JSON object per LF-terminated line.

enum class MessageKind : std::uint8_t {
  Hello,
  Pull,
  Ruleset,
  StatsReport,
  Ack,
  Error,
  Fleet,  // admin query, answered with a Fleet message
};

std::string_view to_string(MessageKind k);

struct AgentIdentity {
  std::string agent_id;
  std::string group_id;
  std::string platform_name;
  std::uint64_t applied_version = 0;  // 0 = nothing applied yet
};

struct FleetAgent {
  std::string agent_id;
  std::string platform;
  std::uint64_t applied_version = 0;
  double last_seen = 0;
  std::optional<StatsSnapshot> latest;
  std::uint64_t packets = 0;  // sum over latest snapshot's rules
  std::uint64_t bytes = 0;
};

struct FleetSummary {
  std::string group_id;
  std::uint64_t current_version = 0;
  std::vector<FleetAgent> agents;  // sorted by agent_id
  bool version_skew = false;       // agents disagree on applied version
  std::uint64_t total_packets = 0;
  std::uint64_t total_bytes = 0;
};

struct Message {
  MessageKind kind = MessageKind::Ack;
  std::optional<std::string> agent_id;
  std::optional<std::string> group_id;
  std::optional<std::string> platform;
  std::optional<std::uint64_t> have_version;
  std::optional<std::uint64_t> version;
  std::optional<std::string> image;  // decoded image text
  std::optional<std::string> digest;
  std::optional<StatsSnapshot> stats;
  std::optional<std::string> ref;
  std::optional<std::string> status;
  std::optional<std::string> code;
  std::optional<std::string> text;
  std::optional<std::string> sig;  // reserved for signed images
  std::optional<FleetSummary> fleet;

  static Message ack(std::string ref, std::string status);
  static Message error(std::string code, std::string text);
};

// Malformed line. code() is BAD_FRAME or UNKNOWN_KIND.
class FrameError : public std::runtime_error {
 public:
  FrameError(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

// JSON text without the trailing LF.
std::string encode_message(const Message& m);
Message decode_message(std::string_view line);

// Digest of an image: SHA-256 over everything before its #sha256 line
// (the whole text when there is none), as 64 lowercase hex chars.
std::string image_digest(std::string_view image);

// ---------------------------------------------------------------------------
// Server state.

struct PublishedVersion {
  std::uint64_t version = 0;
  std::string image;
  std::string digest;
};

struct PolicyGroup {
  std::string group_id;
  std::string description;
  std::optional<PublishedVersion> current;
  std::vector<PublishedVersion> history;  // oldest first
};

struct StatsRecord {
  double received_at = 0;
  std::uint64_t ruleset_version = 0;
  StatsSnapshot stats;
};

struct AgentRecord {
  AgentIdentity identity;
  double last_seen = 0;
  std::vector<StatsRecord> series;
};

class GroupNotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Holds every group and agent. Thread-safe; one writer at a time. With a
// data directory, each group gets an append-only <group>.log of events and
// a <group>.state.json snapshot, and the logs are replayed on construction.
class PolicyServer {
 public:
  explicit PolicyServer(std::optional<std::filesystem::path> data_dir = std::nullopt,
                        Clock clock = system_clock());

  // Parses and validates `image`, stamps it with the next version and stores
  // the canonical form. Throws on an invalid image; the group is unchanged.
  std::uint64_t publish_ruleset(const std::string& group_id, std::string_view image);

  // Exactly one reply per request.
  Message handle(const Message& request);
  // Framing wrapper: malformed lines get ERROR BAD_FRAME / UNKNOWN_KIND.
  std::string handle_line(std::string_view line);

  FleetSummary query_fleet(const std::string& group_id) const;

  std::optional<PolicyGroup> group(const std::string& group_id) const;
  std::optional<AgentRecord> agent(const std::string& agent_id) const;

  static constexpr std::size_t kMaxSeries = 4096;

 private:
  Message handle_locked(const Message& m);
  FleetSummary fleet_locked(const std::string& group_id) const;
  std::uint64_t publish_locked(const std::string& group_id, std::string_view image,
                               bool log);
  void append_log(const std::string& group_id, const std::string& json_line);
  void write_state(const std::string& group_id);
  void replay(const std::filesystem::path& log);
  double now() const { return clock_().count(); }

  std::optional<std::filesystem::path> data_dir_;
  Clock clock_;
  mutable std::mutex mu_;
  std::map<std::string, PolicyGroup> groups_;
  std::map<std::string, AgentRecord> agents_;
  bool replaying_ = false;
};

bool valid_group_id(std::string_view id);

// ---------------------------------------------------------------------------
// Transport.

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

HostPort parse_host_port(std::string_view text);

// Sends one request line and returns the reply line. Throws TransportError.
using Exchange = std::function<std::string(const std::string& line)>;

// Opens a TCP connection; the returned Exchange owns it.
Exchange tcp_exchange(const HostPort& server, Seconds timeout = Seconds{5});

// Calls server.handle_line directly.
Exchange loopback_exchange(PolicyServer& server);

// Accepts agent connections on a background thread, one thread per client.
class SyncListener {
 public:
  SyncListener(PolicyServer& server, const HostPort& listen);
  ~SyncListener();
  SyncListener(const SyncListener&) = delete;
  SyncListener& operator=(const SyncListener&) = delete;

  std::uint16_t port() const { return port_; }
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
};

// ---------------------------------------------------------------------------
// Agent.

// Exponential retry delay: base, 2*base, 4*base, ... capped.
class Backoff {
 public:
  explicit Backoff(Seconds base = Seconds{1}, Seconds cap = Seconds{60})
      : base_(base), cap_(cap) {}
  Seconds next();
  void reset() { failures_ = 0; }
  int failures() const { return failures_; }

 private:
  Seconds base_;
  Seconds cap_;
  int failures_ = 0;
};

enum class ApplyResult : std::uint8_t { Applied, Stale, DigestMismatch, Invalid };

std::string_view to_string(ApplyResult r);

class Agent {
 public:
  Agent(AgentIdentity identity, Engine& engine);

  // HELLO, PULL and, if a newer ruleset arrives, verify + swap + ACK.
  // Returns the applied version afterwards. Throws TransportError.
  std::uint64_t sync(const Exchange& x);

  // One STATS_REPORT; true when the server acknowledged it. Transport
  // failures are swallowed (the report is dropped).
  bool report_stats(const Exchange& x);

  // Applies a RULESET message if it is newer and intact.
  ApplyResult apply_ruleset(const Message& m);

  std::uint64_t applied_version() const { return applied_.load(); }
  AgentIdentity identity() const;

  struct RunOptions {
    Seconds poll{60};
    Seconds stats{60};
    Backoff backoff{};
  };
  // Poll/report loop until stop is requested. `connect` builds a fresh
  // Exchange per cycle.
  void run(const std::function<Exchange()>& connect, RunOptions opts,
           std::stop_token stop);

 private:
  AgentIdentity identity_;
  Engine& engine_;
  std::atomic<std::uint64_t> applied_{0};
  std::mutex apply_mu_;
};

}  // namespace picofw
