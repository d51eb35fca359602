#pragma once

/// @file manipnet.hpp
/// @brief Manipulation stream: separable-convolution encoder, latent fusion of
/// expression features, a classification head and a pyramid-pooling decoder.
///
///   image -> encoder stages (2x pooling each) -> FM
///   F = FM ++ resize(FF)  ->  post-fusion separable block -> latent
///   latent -> GAP -> linear -> sigmoid                      (score a)
///   latent -> SPP -> upsample -> ++ stage-0 skip -> conv -> upsample -> sigmoid   (S)

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emd/fer.hpp"
#include "emd/params.hpp"

namespace emd {

enum class FusionMode { with_fer, without_fer };

std::string to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);

struct ManipConfig {
    int input_size = 64;
    std::vector<int> encoder_channels{16, 32, 64};
    FusionMode fusion = FusionMode::with_fer;
    int fer_feature_channels = 32;
    std::vector<int> spp_rates{1, 2, 4};
    bool spp_global_branch = true;
    int decoder_channels = 32;
    double clamp = 1e-7;

    int fusion_size() const { return input_size >> encoder_channels.size(); }
    int skip_size() const { return input_size / 2; }
    int latent_channels() const { return encoder_channels.back(); }
    void validate() const;
};

struct ManipModel {
    ManipConfig config;
    ParamSet<float> params;
};

struct ManipOutput {
    double score = 0.5;         ///< a in (0, 1)
    Tensor<float> segmentation; ///< {1, 1, H, W}, values in [0, 1]
    FeatureMap latent;
};

/// Parameter-name prefixes of the layers trained while the encoder is frozen.
bool is_head_parameter(const std::string& name);

template <class T>
ParamSet<T> init_manip_params(const ManipConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamSet<T> ps;
    const auto& enc = cfg.encoder_channels;
    add_conv(ps, "enc.0", enc[0], 3, 3, false, seed);
    add_batch_norm(ps, "enc.0.bn", enc[0]);
    for (std::size_t i = 1; i < enc.size(); ++i) {
        const std::string p = "enc." + std::to_string(i);
        add_separable(ps, p, enc[i], enc[i - 1], 3, seed);
        add_batch_norm(ps, p + ".bn", enc[i]);
    }
    // The post-fusion block draws from its own stream.
    const int latent = cfg.latent_channels();
    add_separable(ps, "fuse", latent, enc.back() + cfg.fer_feature_channels, 3, derive_seed(seed, "post-fusion"));
    add_batch_norm(ps, "fuse.bn", latent);
    add_linear(ps, "cls", 1, latent, seed);

    const int dc = cfg.decoder_channels;
    for (std::size_t r = 0; r < cfg.spp_rates.size(); ++r) {
        const std::string p = "spp.r" + std::to_string(r);
        add_separable(ps, p, dc, latent, 3, seed);
        add_batch_norm(ps, p + ".bn", dc);
    }
    if (cfg.spp_global_branch) add_conv(ps, "spp.pool", dc, latent, 1, true, seed);
    const int branches = static_cast<int>(cfg.spp_rates.size()) + (cfg.spp_global_branch ? 1 : 0);
    add_conv(ps, "spp.proj", dc, branches * dc, 1, false, seed);
    add_batch_norm(ps, "spp.proj.bn", dc);
    add_separable(ps, "dec", dc, dc + enc[0], 3, seed);
    add_batch_norm(ps, "dec.bn", dc);
    add_linear(ps, "dec.out", 1, dc, seed);
    return ps;
}

ManipModel init_manip(const ManipConfig& cfg, std::uint64_t seed);

template <class T>
struct EncoderFeatures {
    Var low_level;  ///< stage-0 output, {N, enc[0], H/2, W/2}
    Var fm;         ///< last pre-fusion stage, {N, enc.back(), H/2^S, W/2^S}
};

template <class T>
EncoderFeatures<T> encode_front_graph(Binder<T>& b, const ManipConfig& cfg, Var images) {
    auto& g = b.graph();
    const Shape s = g.value(images).shape();
    if (s.c != 3 || s.h != cfg.input_size || s.w != cfg.input_size) {
        throw PreconditionError("manipnet: input " + s.str() + " does not match input_size " +
                                std::to_string(cfg.input_size));
    }
    EncoderFeatures<T> out;
    Var x = g.max_pool2(conv_bn_act(b, images, "enc.0"));
    out.low_level = x;
    for (std::size_t i = 1; i < cfg.encoder_channels.size(); ++i) {
        x = g.max_pool2(separable_bn_act(b, x, "enc." + std::to_string(i)));
    }
    out.fm = x;
    return out;
}

/// Channel concatenation FM ++ FF after resizing FF to FM's grid.
template <class T>
Var fuse_graph(Graph<T>& g, Var fm, Var ff) {
    const Shape s = g.value(fm).shape();
    return g.concat_channels({fm, g.resize_bilinear(ff, s.h, s.w)});
}

template <class T>
Var encode_back_graph(Binder<T>& b, Var fused) {
    return separable_bn_act(b, fused, "fuse");
}

template <class T>
Var classify_graph(Binder<T>& b, Var latent) {
    auto& g = b.graph();
    return g.sigmoid(linear(b, g.global_avg_pool(latent), "cls"));
}

/// Atrous pyramid over the latent features; returns the projected map.
template <class T>
Var spp_graph(Binder<T>& b, const ManipConfig& cfg, Var latent) {
    auto& g = b.graph();
    const Shape s = g.value(latent).shape();
    std::vector<Var> branches;
    for (std::size_t r = 0; r < cfg.spp_rates.size(); ++r) {
        branches.push_back(separable_bn_act(b, latent, "spp.r" + std::to_string(r), cfg.spp_rates[r]));
    }
    if (cfg.spp_global_branch) {
        Var pooled = g.silu(g.conv2d(g.global_avg_pool(latent), b.weight("spp.pool.w"), b.weight("spp.pool.b")));
        branches.push_back(g.resize_bilinear(pooled, s.h, s.w));
    }
    return conv_bn_act(b, branches.size() == 1 ? branches.front() : g.concat_channels(branches), "spp.proj");
}

/// Returns the per-pixel manipulation probability {N, 1, H, W}.
template <class T>
Var decode_graph(Binder<T>& b, const ManipConfig& cfg, Var latent, Var low_level) {
    auto& g = b.graph();
    const Shape ls = g.value(low_level).shape();
    Var x = g.resize_bilinear(spp_graph(b, cfg, latent), ls.h, ls.w);
    x = separable_bn_act(b, g.concat_channels({x, low_level}), "dec");
    Var logits = linear(b, x, "dec.out");
    return g.sigmoid(g.resize_bilinear(logits, cfg.input_size, cfg.input_size));
}

template <class T>
struct ManipGraph {
    EncoderFeatures<T> encoder;
    Var fused;
    Var latent;
    Var score;         ///< {N, 1, 1, 1}
    Var segmentation;  ///< {N, 1, H, W}
};

/// Full manipulation stream given pooled expression features `ff`
/// ({N, K_f, h, w}); without_fer mode substitutes zeros of the same shape.
template <class T>
ManipGraph<T> manip_graph(Binder<T>& b, const ManipConfig& cfg, Var images, Var ff) {
    auto& g = b.graph();
    ManipGraph<T> m;
    m.encoder = encode_front_graph(b, cfg, images);
    const Shape fs = g.value(ff).shape();
    if (fs.c != cfg.fer_feature_channels || fs.n != g.value(images).shape().n) {
        throw ConfigError("manipnet: expression features " + fs.str() + " do not match fer_feature_channels " +
                          std::to_string(cfg.fer_feature_channels));
    }
    if (cfg.fusion == FusionMode::without_fer) ff = g.input(Tensor<T>(fs));
    m.fused = fuse_graph(g, m.encoder.fm, ff);
    m.latent = encode_back_graph(b, m.fused);
    m.score = classify_graph(b, m.latent);
    m.segmentation = decode_graph(b, cfg, m.latent, m.encoder.low_level);
    return m;
}

/// L_MANI = L_cls + L_seg on a batch, with gradients into `params` when requested.
/// Batch norm uses batch statistics; running statistics are written back only
/// when `update_buffers` is set.
template <class T>
T mani_loss_and_grad(const ManipConfig& cfg, ParamSet<T>& params, const Tensor<T>& images, const Tensor<T>& ff,
                     const std::vector<int>& labels, const Tensor<T>& masks, bool with_grads,
                     bool update_buffers = false, typename Binder<T>::Filter trainable = {}) {
    Graph<T> g(true);
    Binder<T> b(g, params, with_grads, update_buffers, std::move(trainable));
    const ManipGraph<T> m = manip_graph(b, cfg, g.input(images), g.input(ff));
    Tensor<T> y(Shape{static_cast<int>(labels.size()), 1, 1, 1});
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = static_cast<T>(labels[i]);
    Var loss = g.add(g.bce_clamped(m.score, y, T(cfg.clamp)), g.bce_clamped(m.segmentation, masks, T(cfg.clamp)));
    if (with_grads) g.backward(loss);
    return g.value(loss)[0];
}

// ------------------------------------------------------- single-image API

FeatureMap encode_front(const ManipModel& model, const FaceImage& image);
FeatureMap fuse_features(const FeatureMap& fm, const FeatureMap& ff);
FeatureMap encode_back(const ManipModel& model, const FeatureMap& fused);
double classify(const ManipModel& model, const FeatureMap& latent);
/// `low_level` is the encoder's stage-0 map for the same image.
Tensor<float> decode_segment(const ManipModel& model, const FeatureMap& latent, const FeatureMap& low_level);
FeatureMap encode_low_level(const ManipModel& model, const FaceImage& image);

/// Full forward; `fer` is only read in with_fer mode and may be null otherwise.
ManipOutput forward(const ManipModel& model, const FerModel* fer, const FaceImage& image);

/// Batched inference: scores and {N, 1, H, W} maps for precomputed features.
struct BatchPrediction {
    std::vector<double> scores;
    Tensor<float> segmentation;
};
BatchPrediction predict_batch(const ManipModel& model, const Tensor<float>& images, const Tensor<float>& ff);

// ----------------------------------------------------------------- losses

/// Batch mean of -[y log a + (1 - y) log(1 - a)], a clamped to [eps, 1 - eps].
double cls_loss(std::span<const double> scores, std::span<const int> labels, double eps = 1e-7);
/// Mean over pixels and batch of the binary cross-entropy between S and M.
double seg_loss(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks, double eps = 1e-7);
double seg_loss(const std::vector<std::vector<double>>& s, const std::vector<std::vector<int>>& m, double eps = 1e-7);
double mani_loss(double cls_term, double seg_term);

}  // namespace emd
