#pragma once

/// @file checkpoint.hpp
/// @brief Checkpoint directories: `params.bin` (named float32 tensors) plus
/// `meta.json` describing the module, its configuration and training state.
///
/// params.bin layout (little-endian):
///   "EMDP" | u32 version | u32 entry count |
///   per entry: u32 name length, name bytes, u8 is_buffer, 4 x i32 shape, float32 data

#include <filesystem>
#include <json.hpp>
#include <string>

#include "emd/fer.hpp"
#include "emd/manipnet.hpp"

namespace emd {

constexpr int kCheckpointSchemaVersion = 1;

void save_params(const std::filesystem::path& path, const ParamSet<float>& params);
ParamSet<float> load_params(const std::filesystem::path& path);

nlohmann::json to_json(const FerConfig& cfg);
FerConfig fer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ManipConfig& cfg);
ManipConfig manip_config_from_json(const nlohmann::json& j);

void save_fer_checkpoint(const std::filesystem::path& dir, const FerModel& model, int epoch, double val_accuracy);
FerModel load_fer_checkpoint(const std::filesystem::path& dir);

struct ManipCheckpoint {
    ManipModel model;
    std::string fer_checkpoint_ref;  ///< path of the expression checkpoint used in training ("" if none)
    int epoch = 0;
    nlohmann::json metrics;
};

void save_manip_checkpoint(const std::filesystem::path& dir, const ManipModel& model, const std::string& fer_ref,
                           int epoch, const nlohmann::json& metrics);
ManipCheckpoint load_manip_checkpoint(const std::filesystem::path& dir);

}  // namespace emd
