#pragma once

/// @file synthgen.hpp
/// @brief Procedural cartoon faces with controllable expressions, expression
/// manipulations with exact region masks, and a JPEG-like quality knob.
///
/// Coordinates in FaceSpec are normalized to the canvas ([0, 1] on both axes,
/// v pointing down). Rendering uses fixed 2x2 supersampling.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include "emd/datamodel.hpp"
#include "emd/rng.hpp"

namespace emd {

struct Rgb {
    float r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

/// Expression-bearing geometry.
struct ExpressionParams {
    double mouth_curve = 0;  ///< [-1, 1]; > 0 lifts the corners (smile), 0 is a straight line
    double mouth_open = 0;   ///< [0, 1]; lip separation
    double brow_angle = 0;   ///< [-0.6, 0.6] rad; > 0 raises the inner ends
    double brow_raise = 0;   ///< [-0.03, 0.07]; upward brow offset
    bool operator==(const ExpressionParams&) const = default;
};

struct FaceSpec {
    // style
    double face_cx = 0.5, face_cy = 0.52;  ///< face center, each in [0.47, 0.55]
    double face_rx = 0.33, face_ry = 0.41; ///< ellipse radii, [0.30, 0.36] x [0.38, 0.44]
    double eye_dx = 0.135;                 ///< half distance between eyes, [0.12, 0.15]
    double eye_r = 0.04;                   ///< [0.035, 0.045]
    double mouth_half_width = 0.12;        ///< [0.10, 0.14]
    Rgb skin{0.85f, 0.7f, 0.6f};
    Rgb background{0.3f, 0.4f, 0.5f};
    Rgb hair{0.2f, 0.15f, 0.1f};
    Rgb lips{0.65f, 0.3f, 0.3f};
    // expression
    int expression_class = 0;
    ExpressionParams expression;
};

/// Canonical parameters of expression classes 0..7 (neutral, happy, sad,
/// surprise, angry, fear, disgust, contempt).
ExpressionParams expression_prototype(int cls);
constexpr int kMaxExpressionClasses = 8;

/// Jitters a class prototype multiplicatively by factors in [0.8, 1.2], so
/// each class keeps a margin to the others and neutral stays exactly neutral.
ExpressionParams sample_expression(int cls, Rng& rng);
FaceSpec sample_face(int cls, Rng& rng);

FaceImage render_face(const FaceSpec& spec, int size);

/// Adds i.i.d. Gaussian noise and clips to [0, 1].
FaceImage add_sensor_noise(const FaceImage& img, double sigma, Rng& rng);

enum class EditRegion { mouth, mouth_and_brows };

struct ManipulationOptions {
    double sensor_noise = 0.04;    ///< noise of the untouched frame
    double edit_noise = 0.0;       ///< noise inside the re-rendered region
    double edit_blur = 1.0;        ///< 3x3 blur mix in [0, 1] applied to the re-rendered region
    /// Per-channel gain deviation of the re-rendered region, drawn with random
    /// sign and magnitude in [color_shift / 2, color_shift].
    double color_shift = 0.2;
    int quality = 100;
    /// Forces the edit region instead of drawing it from the rng.
    std::optional<EditRegion> region;
    /// Test hook: skip the differing-class precondition.
    bool allow_same_class = false;
};

struct Manipulation {
    FaceImage image;
    BinaryMask mask;
    EditRegion region = EditRegion::mouth;
};

/// Replaces the mouth (NeuralTextures-style) or mouth and brows
/// (Face2Face-style) of `target` with a re-render using the donor's expression.
/// The mask is the union of the edited regions' bounding boxes; pixels outside
/// it are copied from `target`. Regions whose parameters are unchanged are not edited.
Manipulation apply_expression_manipulation(const FaceImage& target, const FaceSpec& target_spec,
                                           const FaceSpec& donor_spec, Rng& rng,
                                           const ManipulationOptions& opts = {});

/// Blockwise 8x8 DCT quantization in YCbCr using the standard JPEG tables
/// scaled by quality; quality 100 is the identity.
FaceImage degrade_quality(const FaceImage& img, int quality);

struct SynthConfig {
    int image_size = 64;
    int class_count = 4;
    int n_expression_train = 600;
    int n_expression_test = 120;
    int n_manip_train = 512;
    int n_manip_test = 128;
    double manip_fraction = 0.5;
    int quality = 100;
    std::uint64_t seed = 7;

    void validate() const;
};

struct Corpora {
    Dataset expression_train;
    Dataset expression_test;
    Dataset manipulation_train;
    Dataset manipulation_test;
};

Corpora generate_corpora(const SynthConfig& config);

/// Builds one split; exposed for sweeps that need a single corpus.
Dataset generate_expression_split(const SynthConfig& config, Split split, int count);
Dataset generate_manipulation_split(const SynthConfig& config, Split split, int count);

}  // namespace emd
