#pragma once

/// @file evaluation.hpp
/// @brief Accuracy metrics, ROC/AUC and the evaluation report.

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emd/datamodel.hpp"
#include "emd/fer.hpp"
#include "emd/manipnet.hpp"

namespace emd {

/// Fraction of samples with (score >= threshold) == label.
double classification_accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

/// Micro average over all pixels of [(S >= threshold) == M]. Each map is {1, 1, H, W}.
double pixel_accuracy(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks,
                      double threshold = 0.5);
/// Per-image pixel accuracy averaged over images.
double pixel_accuracy_macro(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks,
                            double threshold = 0.5);

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    bool operator==(const RocPoint&) const = default;
};

struct RocResult {
    std::vector<RocPoint> points;  ///< from (0,0) to (1,1)
    double auc = 0;
};

/// Descending-threshold sweep with tied scores grouped into one step; AUC by trapezoid.
RocResult roc_and_auc(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under an ROC polyline.
double trapezoid_auc(std::span<const RocPoint> points);

struct SampleRecord {
    std::string id;
    double score = 0;
    int predicted = 0;
    int label = 0;
    double pixel_accuracy = 0;
};

struct EvalReport {
    double classification_accuracy = 0;
    double pixel_accuracy = 0;        ///< micro average (headline)
    double pixel_accuracy_macro = 0;
    std::optional<RocResult> cls_roc;  ///< absent when the data has a single class
    std::optional<RocResult> seg_roc;  ///< pooled per-pixel over a seeded subsample; same caveat
    std::vector<SampleRecord> samples;
    nlohmann::json identifiers = nlohmann::json::object();

    nlohmann::json to_json() const;
    /// Throws ValidationError when a rate is outside [0, 1] or the ROC is malformed.
    void validate() const;
};

struct EvalOptions {
    std::size_t max_roc_pixels = 1000000;
    std::uint64_t seed = 7;
};

/// Runs the model on every sample of a manipulation dataset.
EvalReport evaluate(const ManipModel& model, const FerModel* fer, const Dataset& data, const EvalOptions& opts = {});

/// Writes the report JSON at `report_path` (after validation) and, when a
/// classification ROC exists, `roc.csv` next to it.
void write_report(const EvalReport& report, const std::filesystem::path& report_path);

/// "fpr,tpr" CSV of the classification ROC.
void write_roc_csv(const RocResult& roc, const std::filesystem::path& path);

}  // namespace emd
