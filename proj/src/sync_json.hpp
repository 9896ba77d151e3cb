#pragma once

#include <json.hpp>

#include "picofw/sync.hpp"

namespace picofw {

nlohmann::json to_json(const StatsSnapshot& s);
StatsSnapshot stats_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FleetSummary& f);
FleetSummary fleet_from_json(const nlohmann::json& j);

}  // namespace picofw
