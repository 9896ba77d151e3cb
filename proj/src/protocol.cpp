#include <json.hpp>
#include <type_traits>

#include "picofw/sync.hpp"
#include "sync_json.hpp"

namespace picofw {

using nlohmann::json;

namespace {

struct KindName {
  MessageKind kind;
  std::string_view name;
};

constexpr KindName kKinds[] = {
    {MessageKind::Hello, "HELLO"},
    {MessageKind::Pull, "PULL"},
    {MessageKind::Ruleset, "RULESET"},
    {MessageKind::StatsReport, "STATS_REPORT"},
    {MessageKind::Ack, "ACK"},
    {MessageKind::Error, "ERROR"},
    {MessageKind::Fleet, "FLEET"},
};

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
void get(const json& j, const char* key, std::optional<T>& out) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  if constexpr (std::is_unsigned_v<T>) {
    if (!it->is_number_unsigned())
      throw FrameError("BAD_FRAME", std::string("field '") + key +
                                        "' must be an unsigned integer");
  }
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw FrameError("BAD_FRAME", std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

std::string_view to_string(MessageKind k) {
  for (const auto& kn : kKinds)
    if (kn.kind == k) return kn.name;
  return "?";
}

json to_json(const StatsSnapshot& s) {
  json rules = json::array();
  for (const auto& r : s.rules)
    rules.push_back({{"chain", r.chain}, {"index", r.index}, {"packets", r.packets},
                     {"bytes", r.bytes}});
  return json{{"rules", rules},
              {"policy_hits", s.policy_hits},
              {"conn_count", s.conn_count},
              {"evictions", s.evictions},
              {"uptime_s", s.uptime_s},
              {"timestamp", s.timestamp}};
}

StatsSnapshot stats_from_json(const json& j) {
  StatsSnapshot s;
  for (const auto& r : j.at("rules"))
    s.rules.push_back({r.at("chain").get<std::string>(), r.at("index").get<std::size_t>(),
                       r.at("packets").get<std::uint64_t>(),
                       r.at("bytes").get<std::uint64_t>()});
  s.policy_hits = j.at("policy_hits").get<std::map<std::string, std::uint64_t>>();
  s.conn_count = j.at("conn_count").get<std::size_t>();
  s.evictions = j.at("evictions").get<std::uint64_t>();
  s.uptime_s = j.at("uptime_s").get<double>();
  s.timestamp = j.at("timestamp").get<double>();
  return s;
}

json to_json(const FleetSummary& f) {
  json agents = json::array();
  for (const auto& a : f.agents) {
    json ja{{"agent_id", a.agent_id},
            {"platform", a.platform},
            {"applied_version", a.applied_version},
            {"last_seen", a.last_seen},
            {"packets", a.packets},
            {"bytes", a.bytes}};
    if (a.latest) ja["stats"] = to_json(*a.latest);
    agents.push_back(std::move(ja));
  }
  return json{{"group_id", f.group_id},         {"current_version", f.current_version},
              {"agents", agents},               {"version_skew", f.version_skew},
              {"total_packets", f.total_packets}, {"total_bytes", f.total_bytes}};
}

FleetSummary fleet_from_json(const json& j) {
  FleetSummary f;
  f.group_id = j.at("group_id").get<std::string>();
  f.current_version = j.at("current_version").get<std::uint64_t>();
  f.version_skew = j.at("version_skew").get<bool>();
  f.total_packets = j.at("total_packets").get<std::uint64_t>();
  f.total_bytes = j.at("total_bytes").get<std::uint64_t>();
  for (const auto& ja : j.at("agents")) {
    FleetAgent a;
    a.agent_id = ja.at("agent_id").get<std::string>();
    a.platform = ja.at("platform").get<std::string>();
    a.applied_version = ja.at("applied_version").get<std::uint64_t>();
    a.last_seen = ja.at("last_seen").get<double>();
    a.packets = ja.at("packets").get<std::uint64_t>();
    a.bytes = ja.at("bytes").get<std::uint64_t>();
    if (ja.contains("stats")) a.latest = stats_from_json(ja.at("stats"));
    f.agents.push_back(std::move(a));
  }
  return f;
}

Message Message::ack(std::string ref, std::string status) {
  Message m;
  m.kind = MessageKind::Ack;
  m.ref = std::move(ref);
  m.status = std::move(status);
  return m;
}

Message Message::error(std::string code, std::string text) {
  Message m;
  m.kind = MessageKind::Error;
  m.code = std::move(code);
  m.text = std::move(text);
  return m;
}

std::string encode_message(const Message& m) {
  json j;
  j["kind"] = std::string(to_string(m.kind));
  put(j, "agent_id", m.agent_id);
  put(j, "group_id", m.group_id);
  put(j, "platform", m.platform);
  put(j, "have_version", m.have_version);
  put(j, "version", m.version);
  if (m.image) j["image"] = base64_encode(*m.image);
  put(j, "digest", m.digest);
  if (m.stats) j["stats"] = to_json(*m.stats);
  put(j, "ref", m.ref);
  put(j, "status", m.status);
  put(j, "code", m.code);
  put(j, "text", m.text);
  put(j, "sig", m.sig);
  if (m.fleet) j["fleet"] = to_json(*m.fleet);
  // dump() never emits raw newlines; control characters are escaped.
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

Message decode_message(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded()) throw FrameError("BAD_FRAME", "line is not valid JSON");
  if (!j.is_object()) throw FrameError("BAD_FRAME", "message must be a JSON object");
  auto kind_it = j.find("kind");
  if (kind_it == j.end() || !kind_it->is_string())
    throw FrameError("BAD_FRAME", "missing 'kind'");

  Message m;
  const auto kind = kind_it->get<std::string>();
  bool known = false;
  for (const auto& kn : kKinds) {
    if (kn.name == kind) {
      m.kind = kn.kind;
      known = true;
    }
  }
  if (!known) throw FrameError("UNKNOWN_KIND", "unknown kind '" + kind + "'");

  get(j, "agent_id", m.agent_id);
  get(j, "group_id", m.group_id);
  get(j, "platform", m.platform);
  get(j, "have_version", m.have_version);
  get(j, "version", m.version);
  std::optional<std::string> image_b64;
  get(j, "image", image_b64);
  if (image_b64) {
    m.image = base64_decode(*image_b64);
    if (!m.image) throw FrameError("BAD_FRAME", "'image' is not valid base64");
  }
  get(j, "digest", m.digest);
  get(j, "ref", m.ref);
  get(j, "status", m.status);
  get(j, "code", m.code);
  get(j, "text", m.text);
  get(j, "sig", m.sig);
  try {
    if (j.contains("stats")) m.stats = stats_from_json(j.at("stats"));
    if (j.contains("fleet")) m.fleet = fleet_from_json(j.at("fleet"));
  } catch (const json::exception& e) {
    throw FrameError("BAD_FRAME", std::string("malformed nested object: ") + e.what());
  }
  return m;
}

std::string image_digest(std::string_view image) {
  std::size_t cut = image.size();
  if (image.starts_with("#sha256 ")) {
    cut = 0;
  } else if (auto p = image.find("\n#sha256 "); p != std::string_view::npos) {
    cut = p + 1;
  }
  return to_hex(compute_checksum(image.substr(0, cut)));
}

}  // namespace picofw
