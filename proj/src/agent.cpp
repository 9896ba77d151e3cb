#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>

#include "picofw/ruleset.hpp"
#include "picofw/sync.hpp"

namespace picofw {

Seconds Backoff::next() {
  const int exp = std::min(failures_, 30);
  ++failures_;
  return std::min(cap_, base_ * std::ldexp(1.0, exp));
}

std::string_view to_string(ApplyResult r) {
  switch (r) {
    case ApplyResult::Applied: return "applied";
    case ApplyResult::Stale: return "stale";
    case ApplyResult::DigestMismatch: return "digest-mismatch";
    case ApplyResult::Invalid: return "invalid";
  }
  return "?";
}

Agent::Agent(AgentIdentity identity, Engine& engine)
    : identity_(std::move(identity)), engine_(engine), applied_(identity_.applied_version) {}

AgentIdentity Agent::identity() const {
  AgentIdentity id = identity_;
  id.applied_version = applied_.load();
  return id;
}

ApplyResult Agent::apply_ruleset(const Message& m) {
  if (m.kind != MessageKind::Ruleset || !m.version || !m.image || !m.digest)
    return ApplyResult::Invalid;
  std::lock_guard lock(apply_mu_);
  if (*m.version <= applied_.load()) return ApplyResult::Stale;
  if (image_digest(*m.image) != *m.digest) return ApplyResult::DigestMismatch;
  try {
    Ruleset rs = parse_ruleset(*m.image);
    if (rs.version != *m.version) return ApplyResult::Invalid;
    engine_.swap_ruleset(std::move(rs));
  } catch (const IntegrityError&) {
    return ApplyResult::DigestMismatch;
  } catch (const std::exception&) {
    return ApplyResult::Invalid;
  }
  applied_.store(*m.version);
  return ApplyResult::Applied;
}

namespace {

Message round_trip(const Exchange& x, const Message& m) {
  std::string reply = x(encode_message(m));
  try {
    return decode_message(reply);
  } catch (const FrameError& e) {
    throw TransportError(std::string("unreadable reply: ") + e.what());
  }
}

}  // namespace

std::uint64_t Agent::sync(const Exchange& x) {
  Message hello;
  hello.kind = MessageKind::Hello;
  hello.agent_id = identity_.agent_id;
  hello.group_id = identity_.group_id;
  hello.platform = identity_.platform_name;
  hello.version = applied_.load();
  Message r = round_trip(x, hello);
  if (r.kind == MessageKind::Error)
    throw TransportError("HELLO refused: " + r.code.value_or("?") + " " +
                         r.text.value_or(""));

  Message pull;
  pull.kind = MessageKind::Pull;
  pull.agent_id = identity_.agent_id;
  pull.group_id = identity_.group_id;
  pull.have_version = applied_.load();
  r = round_trip(x, pull);
  if (r.kind != MessageKind::Ruleset) return applied_.load();  // up to date or no group

  ApplyResult res = apply_ruleset(r);
  Message out;
  if (res == ApplyResult::Applied || res == ApplyResult::Stale) {
    out = Message::ack("RULESET", res == ApplyResult::Applied ? "applied" : "stale");
    out.version = applied_.load();
  } else {
    out = Message::error(res == ApplyResult::DigestMismatch ? "DIGEST_MISMATCH"
                                                            : "INVALID_IMAGE",
                         "rejected version " + std::to_string(r.version.value_or(0)));
    out.version = r.version;
  }
  out.agent_id = identity_.agent_id;
  round_trip(x, out);
  return applied_.load();
}

bool Agent::report_stats(const Exchange& x) {
  Message m;
  m.kind = MessageKind::StatsReport;
  m.agent_id = identity_.agent_id;
  m.group_id = identity_.group_id;
  m.version = applied_.load();
  m.stats = engine_.snapshot_counters();
  try {
    return round_trip(x, m).kind == MessageKind::Ack;
  } catch (const TransportError&) {
    return false;
  }
}

void Agent::run(const std::function<Exchange()>& connect, RunOptions opts,
                std::stop_token stop) {
  using clock = std::chrono::steady_clock;
  auto later = [](Seconds s) {
    return clock::now() + std::chrono::duration_cast<clock::duration>(s);
  };
  auto next_poll = clock::now();
  auto next_stats = later(opts.stats);
  std::mutex mu;
  std::condition_variable_any cv;

  while (!stop.stop_requested()) {
    if (clock::now() >= next_poll) {
      try {
        sync(connect());
        opts.backoff.reset();
        next_poll = later(opts.poll);
      } catch (const TransportError&) {
        next_poll = later(opts.backoff.next());
      }
    }
    if (clock::now() >= next_stats) {
      try {
        report_stats(connect());
      } catch (const TransportError&) {
        // dropped; the next report carries fresher counters anyway
      }
      next_stats = later(opts.stats);
    }
    std::unique_lock lock(mu);
    cv.wait_until(lock, stop, std::min(next_poll, next_stats), [] { return false; });
  }
}

}  // namespace picofw
