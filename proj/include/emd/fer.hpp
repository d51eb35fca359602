#pragma once

/// @file fer.hpp
/// @brief Expression recognition stream: a shared convolutional trunk feeding
/// B independent branches, each with a GAP + linear + softmax classifier.
///
/// The manipulation stream consumes one branch's pre-pool feature map, picked
/// by majority vote over the branches' detected classes and then by the
/// highest probability for the voted class. All ties go to the smallest index.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emd/datamodel.hpp"
#include "emd/params.hpp"

namespace emd {

enum class FerVariant { ensemble, simple };

std::string to_string(FerVariant v);
FerVariant parse_fer_variant(const std::string& s);

struct FerConfig {
    FerVariant variant = FerVariant::ensemble;
    int branches = 3;  ///< ignored (treated as 1) for the simple variant
    int class_count = 4;
    int trunk_channels = 16;
    int branch_channels = 32;
    int feature_channels = 32;
    int input_size = 64;

    int branch_count() const { return variant == FerVariant::simple ? 1 : branches; }
    /// Spatial size of the branch feature maps (three 2x poolings).
    int feature_size() const { return input_size / 8; }
    void validate() const;
};

using FeatureMap = Tensor<float>;  ///< {1, K, h, w}

struct BranchOutput {
    FeatureMap feature;
    std::vector<double> probs;
};

struct FerModel {
    FerConfig config;
    ParamSet<float> params;
};

constexpr double kProbClamp = 1e-7;

template <class T>
ParamSet<T> init_fer_params(const FerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamSet<T> ps;
    add_conv(ps, "trunk.0", cfg.trunk_channels, 3, 3, false, seed);
    add_batch_norm(ps, "trunk.0.bn", cfg.trunk_channels);
    add_conv(ps, "trunk.1", cfg.trunk_channels, cfg.trunk_channels, 3, false, seed);
    add_batch_norm(ps, "trunk.1.bn", cfg.trunk_channels);
    for (int b = 0; b < cfg.branch_count(); ++b) {
        const std::string p = "branch." + std::to_string(b);
        add_conv(ps, p + ".0", cfg.branch_channels, cfg.trunk_channels, 5, false, seed);
        add_batch_norm(ps, p + ".0.bn", cfg.branch_channels);
        add_conv(ps, p + ".1", cfg.feature_channels, cfg.branch_channels, 3, false, seed);
        add_batch_norm(ps, p + ".1.bn", cfg.feature_channels);
        add_linear(ps, p + ".cls", cfg.class_count, cfg.feature_channels, seed);
    }
    return ps;
}

FerModel init_fer(const FerConfig& cfg, std::uint64_t seed);

template <class T>
struct FerGraph {
    std::vector<Var> features;  ///< per branch, {N, K_f, h, w}
    std::vector<Var> probs;     ///< per branch, {N, C, 1, 1}
};

template <class T>
FerGraph<T> fer_graph(Binder<T>& b, const FerConfig& cfg, Var images) {
    auto& g = b.graph();
    const Shape s = g.value(images).shape();
    if (s.c != 3 || s.h != cfg.input_size || s.w != cfg.input_size) {
        throw PreconditionError("fer: input " + s.str() + " does not match input_size " +
                                std::to_string(cfg.input_size));
    }
    Var x = g.max_pool2(conv_bn_act(b, images, "trunk.0"));
    x = g.max_pool2(conv_bn_act(b, x, "trunk.1"));
    FerGraph<T> out;
    for (int i = 0; i < cfg.branch_count(); ++i) {
        const std::string p = "branch." + std::to_string(i);
        Var f = conv_bn_act(b, x, p + ".0");
        f = g.max_pool2(conv_bn_act(b, f, p + ".1"));
        out.features.push_back(f);
        out.probs.push_back(g.softmax(linear(b, g.global_avg_pool(f), p + ".cls")));
    }
    return out;
}

/// Combined loss: sum over branches of the batch-mean cross-entropy, with the
/// true-class probability clamped below at kProbClamp. Runs batch norm with
/// batch statistics (training mode); running statistics are written back only
/// when `update_buffers` is set. Gradients accumulate into `params` when
/// `with_grads` is set.
template <class T>
T fer_loss_and_grad(const FerConfig& cfg, ParamSet<T>& params, const Tensor<T>& images,
                    const std::vector<int>& labels, bool with_grads, bool update_buffers = false) {
    if (labels.empty()) throw PreconditionError("fer_loss: empty batch");
    Graph<T> g(true);
    Binder<T> b(g, params, with_grads, update_buffers);
    const FerGraph<T> fg = fer_graph(b, cfg, g.input(images));
    Var loss = g.nll_clamped(fg.probs[0], labels, T(kProbClamp));
    for (std::size_t i = 1; i < fg.probs.size(); ++i) loss = g.add(loss, g.nll_clamped(fg.probs[i], labels, T(kProbClamp)));
    if (with_grads) g.backward(loss);
    return g.value(loss)[0];
}

/// Inference-mode forward for one image.
std::vector<BranchOutput> fer_forward(const FerModel& model, const FaceImage& image);

/// Inference-mode forward for a batch {N, 3, H, W}; result[n][b].
std::vector<std::vector<BranchOutput>> fer_forward_batch(const FerModel& model, const Tensor<float>& images);

/// Loss from explicit probabilities, indexed [branch][sample][class].
double fer_loss(const std::vector<std::vector<std::vector<double>>>& branch_probs, const std::vector<int>& labels);

/// Loss of the model on a batch of samples (batch-statistics mode, no side effects).
double fer_loss(const FerModel& model, std::span<const ExpressionSample> batch);

std::vector<int> detect_branch_classes(std::span<const BranchOutput> outputs);
int frequent_class(std::span<const int> detections);
std::pair<FeatureMap, int> pool_branch_feature(std::span<const BranchOutput> outputs, int c_freq);

/// Selected branch index for a set of branch outputs (detect -> vote -> pool).
int select_branch(std::span<const BranchOutput> outputs);

FeatureMap select_expression_features(const FerModel& model, const FaceImage& image);

/// Pooled features for a batch, stacked to {N, K_f, h, w}.
Tensor<float> select_expression_features_batch(const FerModel& model, const Tensor<float>& images);

/// Class activation map of the selected branch, upsampled to the input size and
/// min-max normalized to [0, 1] ({1, 1, H, W}; constant maps give zeros).
Tensor<float> compute_cam(const FerModel& model, const FaceImage& image, int cls);

/// CAM core: sum_k weights[k] * feature[k], bilinearly resized and normalized.
Tensor<float> cam_from_features(const FeatureMap& feature, std::span<const float> weights, int out_h, int out_w);

/// Standalone bilinear resize (half-pixel centers).
Tensor<float> resize_bilinear(const Tensor<float>& x, int out_h, int out_w);

}  // namespace emd
