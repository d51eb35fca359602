#pragma once

/// @file datamodel.hpp
/// @brief Sample and dataset types for the expression and manipulation
/// corpora, their validation, and the manifest-based directory format.
///
/// On disk a dataset is a directory holding `manifest.json`, `images/<id>.png`
/// (8-bit RGB) and, for manipulation data, `masks/<id>.png` (8-bit grayscale
/// with values 0 or 255). The manifest is the only source of labels and split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "emd/tensor.hpp"

namespace emd {

/// Channels-first RGB image with values in [0, 1]; stored as a {1, 3, H, W} tensor.
struct FaceImage {
    Tensor<float> pixels;

    FaceImage() = default;
    explicit FaceImage(int size) : pixels(Shape{1, 3, size, size}) {}
    FaceImage(int height, int width) : pixels(Shape{1, 3, height, width}) {}

    int height() const { return pixels.shape().h; }
    int width() const { return pixels.shape().w; }
    float& at(int c, int y, int x) { return pixels.at(0, c, y, x); }
    float at(int c, int y, int x) const { return pixels.at(0, c, y, x); }
    bool operator==(const FaceImage&) const = default;
};

/// H x W mask with values in {0, 1}.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;
    bool empty_support() const { return count() == 0; }
    bool operator==(const BinaryMask&) const = default;
};

struct ManipulationSample {
    std::string id;
    FaceImage image;
    BinaryMask mask;
    int label = 0;
};

struct ExpressionSample {
    std::string id;
    FaceImage image;
    int expression = 0;
};

enum class DatasetKind { expression, manipulation };
enum class Split { train, val, test };

std::string to_string(DatasetKind k);
std::string to_string(Split s);
DatasetKind parse_dataset_kind(const std::string& s);
Split parse_split(const std::string& s);

struct Dataset {
    DatasetKind kind = DatasetKind::manipulation;
    Split split = Split::train;
    int class_count = 0;  // expression datasets only
    std::vector<ExpressionSample> expression;
    std::vector<ManipulationSample> manipulation;

    std::size_t size() const {
        return kind == DatasetKind::expression ? expression.size() : manipulation.size();
    }
};

/// Returns one message per violated invariant; empty when the sample is valid.
/// `image_size` (when given) is the required H = W; `class_count` bounds expressions.
std::vector<std::string> validate_sample(const ManipulationSample& s, std::optional<int> image_size = std::nullopt);
std::vector<std::string> validate_sample(const ExpressionSample& s, int class_count,
                                         std::optional<int> image_size = std::nullopt);

/// Dataset-level checks (unique ids, uniform image size) plus every sample check.
std::vector<std::string> validate_dataset(const Dataset& d);

Dataset load_dataset(const std::filesystem::path& root);
std::filesystem::path save_dataset(const Dataset& d, const std::filesystem::path& root);

/// Deterministic train/val partition: `fraction` of the samples (at least one
/// when the dataset has two or more) move to the returned val split.
std::pair<Dataset, Dataset> split_validation(const Dataset& d, double fraction, std::uint64_t seed);

/// Images quantized to 8 bits per channel, as they would be after a PNG round trip.
FaceImage quantize_8bit(const FaceImage& img);

}  // namespace emd
