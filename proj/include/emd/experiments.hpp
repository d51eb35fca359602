#pragma once

/// @file experiments.hpp
/// @brief End-to-end runs, the training-size sweep and the ablation table.

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "emd/evaluation.hpp"
#include "emd/synthgen.hpp"
#include "emd/training.hpp"

namespace emd {

struct PipelineConfig {
    SynthConfig synth;
    FerConfig fer;
    ManipConfig manip;
    TrainConfig train;

    /// Module checks plus cross-module consistency (image sizes, class and channel counts).
    void validate() const;
};

/// Phase 1 with a validation split carved from `expression_train`.
FerTrainResult train_fer_on(const Dataset& expression_train, const PipelineConfig& cfg,
                            const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                            const ProgressFn& progress = {});

/// Phase 2 with a validation split carved from `manipulation_train`.
ManipTrainResult train_manip_on(const Dataset& manipulation_train, const FerModel* fer, const PipelineConfig& cfg,
                                const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                                const std::string& fer_ref = "", const ProgressFn& progress = {});

struct PipelineResult {
    FerTrainResult fer;  ///< empty model in without_fer mode
    ManipTrainResult manip;
    EvalReport report;
};

/// Both phases on the training splits, then evaluation on the manipulation test split.
PipelineResult run_pipeline(const Corpora& data, const PipelineConfig& cfg, const ProgressFn& progress = {});

struct SweepRow {
    int train_size = 0;
    double cls_accuracy = 0;
    double seg_accuracy = 0;
};

struct SweepTable {
    std::vector<SweepRow> rows;
    nlohmann::json to_json() const;
    /// "train_size,cls_acc,seg_acc"
    void write_csv(const std::filesystem::path& path) const;
};

/// One expression network is trained on the configured expression corpus and
/// shared by every row; each row then trains a fresh manipulation network on a
/// corpus generated with `n_manip_train = size`.
SweepTable training_size_sweep(const PipelineConfig& cfg, const std::vector<int>& sizes,
                               const ProgressFn& progress = {});

struct AblationVariant {
    FusionMode fusion = FusionMode::with_fer;
    FerVariant fer_variant = FerVariant::ensemble;

    std::string label() const;
};

AblationVariant parse_ablation_variant(const std::string& s);

struct AblationRow {
    AblationVariant variant;
    double cls_accuracy = 0;
    double seg_accuracy = 0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    nlohmann::json to_json() const;
    /// "variant,cls_acc,seg_acc"
    void write_csv(const std::filesystem::path& path) const;
};

/// Trains and evaluates every variant under the same seed and data.
AblationTable ablation_compare(const Corpora& data, const std::vector<AblationVariant>& variants,
                               const PipelineConfig& cfg, const ProgressFn& progress = {});

}  // namespace emd
