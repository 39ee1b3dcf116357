#pragma once

#include "huproso3/flow.hpp"
#include "huproso3/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>

// Checkpoint container:
//   "HPSO3CK\0" | u32 version | u64-length-prefixed JSON header |
//   parameter arrays (float64, column-major, header order) |
//   optional Adam first then second moments (same layout) | u64 FNV-1a of all preceding bytes.
// All integers and floats are little-endian.

namespace huproso3 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json flow_config_to_json(const FlowConfig& c);
FlowConfig flow_config_from_json(const nlohmann::json& j);

struct LoadedCheckpoint {
  FlowModel model;
  nlohmann::json meta;
  std::optional<AdamState> optimizer;
};

std::string serialize_checkpoint(const FlowModel& model, const nlohmann::json& meta = nlohmann::json::object(),
                                 const AdamState* optimizer = nullptr);
LoadedCheckpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const FlowModel& model,
                     const nlohmann::json& meta = nlohmann::json::object(), const AdamState* optimizer = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace huproso3
