#pragma once

/// @file cli_config.hpp
/// @brief Flat JSON view of the pipeline configuration used by the command line.
///
/// Keys: image_size, class_count, n_expression_train, n_expression_test,
/// n_manip_train, n_manip_test, manip_fraction, quality, seed, fer_variant,
/// branches, trunk_channels, branch_channels, feature_channels,
/// encoder_channels, fusion, spp_rates, spp_global_branch, decoder_channels,
/// clamp, lr, lr_manip, batch_size, adam_beta1, adam_beta2, adam_eps,
/// epochs_frozen_head, epochs, fer_epochs, val_fraction.
/// `image_size` feeds both networks' input size and `feature_channels` also
/// sets the manipulation stream's fusion width.

#include <filesystem>
#include <json.hpp>
#include <string>

#include "emd/experiments.hpp"

namespace emd {

nlohmann::json to_flat_json(const PipelineConfig& cfg);

/// Starts from the defaults and applies every key of `j`; unknown keys and
/// ill-typed values raise ConfigError. The result is validated.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

/// Reads a JSON object from disk (ConfigError if unreadable or malformed).
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies "key=value"; the value is parsed as JSON and falls back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace emd
