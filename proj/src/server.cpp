#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "picofw/ruleset.hpp"
#include "picofw/sync.hpp"
#include "sync_json.hpp"

namespace picofw {

using nlohmann::json;
namespace fs = std::filesystem;

bool valid_group_id(std::string_view id) {
  if (id.empty() || id.size() > 64 || id[0] == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
           (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
  });
}

PolicyServer::PolicyServer(std::optional<fs::path> data_dir, Clock clock)
    : data_dir_(std::move(data_dir)), clock_(std::move(clock)) {
  if (!data_dir_) return;
  fs::create_directories(*data_dir_);
  std::vector<fs::path> logs;
  for (const auto& entry : fs::directory_iterator(*data_dir_))
    if (entry.is_regular_file() && entry.path().extension() == ".log")
      logs.push_back(entry.path());
  std::sort(logs.begin(), logs.end());
  replaying_ = true;
  for (const auto& log : logs) replay(log);
  replaying_ = false;
}

void PolicyServer::replay(const fs::path& log) {
  std::ifstream in(log);
  std::string line;
  const std::string group_id = log.stem().string();
  while (std::getline(in, line)) {
    json ev = json::parse(line, nullptr, false);
    if (ev.is_discarded() || !ev.is_object()) continue;  // torn tail write
    const std::string kind = ev.value("event", "");
    if (kind == "publish") {
      auto image = base64_decode(ev.value("image", ""));
      if (!image) continue;
      PolicyGroup& g = groups_[group_id];
      g.group_id = group_id;
      if (g.current) g.history.push_back(*g.current);
      g.current = PublishedVersion{ev.value("version", std::uint64_t{0}), *image,
                                   ev.value("digest", "")};
    } else if (kind == "hello" || kind == "applied" || kind == "stats") {
      const std::string id = ev.value("agent_id", "");
      if (id.empty()) continue;
      AgentRecord& a = agents_[id];
      a.identity.agent_id = id;
      a.identity.group_id = group_id;
      a.last_seen = ev.value("at", 0.0);
      std::uint64_t v = ev.value("version", std::uint64_t{0});
      if (kind == "hello") a.identity.platform_name = ev.value("platform", "");
      if (kind != "stats")
        a.identity.applied_version = std::max(a.identity.applied_version, v);
      if (kind == "stats" && ev.contains("stats")) {
        a.series.push_back({a.last_seen, v, stats_from_json(ev.at("stats"))});
        if (a.series.size() > kMaxSeries) a.series.erase(a.series.begin());
      }
    }
  }
}

void PolicyServer::append_log(const std::string& group_id, const std::string& line) {
  if (!data_dir_ || replaying_) return;
  std::ofstream out(*data_dir_ / (group_id + ".log"), std::ios::app);
  out << line << '\n';
  out.flush();
  write_state(group_id);
}

void PolicyServer::write_state(const std::string& group_id) {
  json st{{"group_id", group_id}};
  if (auto it = groups_.find(group_id); it != groups_.end()) {
    const PolicyGroup& g = it->second;
    if (g.current) {
      st["current_version"] = g.current->version;
      st["digest"] = g.current->digest;
      st["image"] = base64_encode(g.current->image);
    }
    json hist = json::array();
    for (const auto& h : g.history) hist.push_back(h.version);
    st["history_versions"] = hist;
  }
  json agents = json::array();
  for (const auto& [id, a] : agents_) {
    if (a.identity.group_id != group_id) continue;
    agents.push_back({{"agent_id", id},
                      {"platform", a.identity.platform_name},
                      {"applied_version", a.identity.applied_version},
                      {"last_seen", a.last_seen}});
  }
  st["agents"] = agents;
  const fs::path final_path = *data_dir_ / (group_id + ".state.json");
  const fs::path tmp = final_path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << st.dump(2) << '\n';
  }
  fs::rename(tmp, final_path);
}

std::uint64_t PolicyServer::publish_ruleset(const std::string& group_id,
                                            std::string_view image) {
  std::lock_guard lock(mu_);
  return publish_locked(group_id, image, true);
}

std::uint64_t PolicyServer::publish_locked(const std::string& group_id,
                                           std::string_view image, bool log) {
  if (!valid_group_id(group_id))
    throw std::invalid_argument("malformed group id '" + group_id + "'");
  Ruleset rs = parse_ruleset(image);  // throws; group untouched
  auto it = groups_.find(group_id);
  std::uint64_t version =
      it != groups_.end() && it->second.current ? it->second.current->version + 1 : 1;
  rs.version = version;
  PublishedVersion pv{version, serialize_ruleset(rs), to_hex(rs.checksum())};

  PolicyGroup& g = groups_[group_id];
  g.group_id = group_id;
  if (g.current) g.history.push_back(std::move(*g.current));
  g.current = pv;
  if (log)
    append_log(group_id, json{{"event", "publish"},
                              {"version", version},
                              {"digest", pv.digest},
                              {"image", base64_encode(pv.image)},
                              {"at", now()}}
                             .dump());
  return version;
}

std::string PolicyServer::handle_line(std::string_view line) {
  Message reply;
  try {
    reply = handle(decode_message(line));
  } catch (const FrameError& e) {
    reply = Message::error(e.code(), e.what());
  }
  return encode_message(reply);
}

Message PolicyServer::handle(const Message& request) {
  std::lock_guard lock(mu_);
  return handle_locked(request);
}

Message PolicyServer::handle_locked(const Message& m) {
  auto missing = [](std::string_view field) {
    return Message::error("BAD_MESSAGE", "missing field '" + std::string(field) + "'");
  };
  auto touch = [&](const std::string& agent_id) -> AgentRecord* {
    auto it = agents_.find(agent_id);
    if (it == agents_.end()) return nullptr;
    it->second.last_seen = now();
    return &it->second;
  };

  switch (m.kind) {
    case MessageKind::Hello: {
      if (!m.agent_id) return missing("agent_id");
      if (!m.group_id) return missing("group_id");
      if (!valid_group_id(*m.group_id))
        return Message::error("BAD_GROUP", "malformed group id");
      AgentRecord& a = agents_[*m.agent_id];
      a.identity.agent_id = *m.agent_id;
      a.identity.group_id = *m.group_id;
      a.identity.platform_name = m.platform.value_or("");
      a.identity.applied_version =
          std::max(a.identity.applied_version, m.version.value_or(0));
      a.last_seen = now();
      append_log(*m.group_id, json{{"event", "hello"},
                                   {"agent_id", *m.agent_id},
                                   {"platform", a.identity.platform_name},
                                   {"version", a.identity.applied_version},
                                   {"at", a.last_seen}}
                                  .dump());
      return Message::ack("HELLO", "ok");
    }

    case MessageKind::Pull: {
      if (!m.group_id) return missing("group_id");
      if (m.agent_id) touch(*m.agent_id);
      auto it = groups_.find(*m.group_id);
      if (it == groups_.end() || !it->second.current)
        return Message::error("GROUP_NOT_FOUND", "no group '" + *m.group_id + "'");
      const PublishedVersion& cur = *it->second.current;
      if (m.have_version.value_or(0) < cur.version) {
        Message r;
        r.kind = MessageKind::Ruleset;
        r.group_id = *m.group_id;
        r.version = cur.version;
        r.image = cur.image;
        r.digest = cur.digest;
        return r;
      }
      Message r = Message::ack("PULL", "up-to-date");
      r.version = cur.version;
      return r;
    }

    case MessageKind::Ruleset: {
      // Inbound RULESET is an administrative publish.
      if (!m.group_id) return missing("group_id");
      if (!m.image) return missing("image");
      try {
        std::uint64_t v = publish_locked(*m.group_id, *m.image, true);
        Message r = Message::ack("RULESET", "published");
        r.version = v;
        return r;
      } catch (const std::exception& e) {
        return Message::error("INVALID_IMAGE", e.what());
      }
    }

    case MessageKind::Ack: {
      if (!m.agent_id) return missing("agent_id");
      AgentRecord* a = touch(*m.agent_id);
      if (!a) return Message::error("AGENT_UNKNOWN", "no agent '" + *m.agent_id + "'");
      if (m.ref == "RULESET" && m.status == "applied" && m.version) {
        a->identity.applied_version = std::max(a->identity.applied_version, *m.version);
        append_log(a->identity.group_id, json{{"event", "applied"},
                                              {"agent_id", *m.agent_id},
                                              {"version", a->identity.applied_version},
                                              {"at", a->last_seen}}
                                             .dump());
      }
      return Message::ack("ACK", "ok");
    }

    case MessageKind::Error: {
      if (m.agent_id) touch(*m.agent_id);
      return Message::ack("ERROR", "noted");
    }

    case MessageKind::StatsReport: {
      if (!m.agent_id) return missing("agent_id");
      if (!m.stats) return missing("stats");
      AgentRecord* a = touch(*m.agent_id);
      if (!a) return Message::error("AGENT_UNKNOWN", "no agent '" + *m.agent_id + "'");
      a->series.push_back({a->last_seen, m.version.value_or(0), *m.stats});
      if (a->series.size() > kMaxSeries) a->series.erase(a->series.begin());
      append_log(a->identity.group_id, json{{"event", "stats"},
                                            {"agent_id", *m.agent_id},
                                            {"version", m.version.value_or(0)},
                                            {"stats", to_json(*m.stats)},
                                            {"at", a->last_seen}}
                                           .dump());
      return Message::ack("STATS_REPORT", "ok");
    }

    case MessageKind::Fleet: {
      if (!m.group_id) return missing("group_id");
      try {
        Message r;
        r.kind = MessageKind::Fleet;
        r.group_id = *m.group_id;
        r.fleet = fleet_locked(*m.group_id);
        return r;
      } catch (const GroupNotFound& e) {
        return Message::error("GROUP_NOT_FOUND", e.what());
      }
    }
  }
  return Message::error("UNKNOWN_KIND", "unhandled kind");
}

FleetSummary PolicyServer::query_fleet(const std::string& group_id) const {
  std::lock_guard lock(mu_);
  return fleet_locked(group_id);
}

FleetSummary PolicyServer::fleet_locked(const std::string& group_id) const {
  auto git = groups_.find(group_id);
  if (git == groups_.end()) throw GroupNotFound("no group '" + group_id + "'");

  FleetSummary f;
  f.group_id = group_id;
  f.current_version = git->second.current ? git->second.current->version : 0;
  std::set<std::uint64_t> versions;
  for (const auto& [id, a] : agents_) {
    if (a.identity.group_id != group_id) continue;
    FleetAgent fa;
    fa.agent_id = id;
    fa.platform = a.identity.platform_name;
    fa.applied_version = a.identity.applied_version;
    fa.last_seen = a.last_seen;
    if (!a.series.empty()) {
      fa.latest = a.series.back().stats;
      for (const auto& r : fa.latest->rules) {
        fa.packets += r.packets;
        fa.bytes += r.bytes;
      }
    }
    f.total_packets += fa.packets;
    f.total_bytes += fa.bytes;
    versions.insert(fa.applied_version);
    f.agents.push_back(std::move(fa));
  }
  f.version_skew = versions.size() > 1;
  return f;
}

std::optional<PolicyGroup> PolicyServer::group(const std::string& group_id) const {
  std::lock_guard lock(mu_);
  auto it = groups_.find(group_id);
  if (it == groups_.end()) return std::nullopt;
  return it->second;
}

std::optional<AgentRecord> PolicyServer::agent(const std::string& agent_id) const {
  std::lock_guard lock(mu_);
  auto it = agents_.find(agent_id);
  if (it == agents_.end()) return std::nullopt;
  return it->second;
}

}  // namespace picofw
