#include "emd/manipnet.hpp"

#include <algorithm>
#include <cmath>

namespace emd {

std::string to_string(FusionMode m) { return m == FusionMode::with_fer ? "with_fer" : "without_fer"; }

FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "with_fer") return FusionMode::with_fer;
    if (s == "without_fer") return FusionMode::without_fer;
    throw ConfigError("unknown fusion mode '" + s + "'");
}

void ManipConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("manip config: " + m); };
    if (encoder_channels.empty()) fail("encoder_channels must not be empty");
    for (int c : encoder_channels)
        if (c <= 0) fail("encoder channel counts must be positive");
    if (input_size <= 0 || input_size % (1 << encoder_channels.size()) != 0) {
        fail("input_size must be divisible by 2^(number of encoder stages)");
    }
    if (fusion_size() < 4) fail("fusion stage spatial size must be at least 4x4");
    if (fer_feature_channels <= 0 || decoder_channels <= 0) fail("channel counts must be positive");
    if (spp_rates.empty() && !spp_global_branch) fail("spp needs at least one branch");
    for (int r : spp_rates)
        if (r < 1) fail("spp rates must be >= 1");
    if (!(clamp > 0 && clamp < 0.5)) fail("clamp must be in (0, 0.5)");
}

bool is_head_parameter(const std::string& name) {
    for (const char* prefix : {"fuse.", "cls.", "spp.", "dec."}) {
        if (name.rfind(prefix, 0) == 0) return true;
    }
    return false;
}

ManipModel init_manip(const ManipConfig& cfg, std::uint64_t seed) {
    return ManipModel{cfg, init_manip_params<float>(cfg, seed)};
}

FeatureMap encode_front(const ManipModel& model, const FaceImage& image) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    return g.value(encode_front_graph(b, model.config, g.input(image.pixels)).fm);
}

FeatureMap encode_low_level(const ManipModel& model, const FaceImage& image) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    return g.value(encode_front_graph(b, model.config, g.input(image.pixels)).low_level);
}

FeatureMap fuse_features(const FeatureMap& fm, const FeatureMap& ff) {
    if (!fm.all_finite() || !ff.all_finite()) throw PreconditionError("fuse_features: non-finite input");
    if (fm.shape().n != ff.shape().n) throw PreconditionError("fuse_features: batch mismatch");
    Graph<float> g(false);
    return g.value(fuse_graph(g, g.input(fm), g.input(ff)));
}

FeatureMap encode_back(const ManipModel& model, const FeatureMap& fused) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    return g.value(encode_back_graph(b, g.input(fused)));
}

double classify(const ManipModel& model, const FeatureMap& latent) {
    if (!latent.all_finite()) throw PreconditionError("classify: non-finite latent");
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    return g.value(classify_graph(b, g.input(latent)))[0];
}

Tensor<float> decode_segment(const ManipModel& model, const FeatureMap& latent, const FeatureMap& low_level) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    return g.value(decode_graph(b, model.config, g.input(latent), g.input(low_level)));
}

namespace {

Tensor<float> expression_features(const ManipModel& model, const FerModel* fer, const Tensor<float>& images) {
    const ManipConfig& cfg = model.config;
    if (cfg.fusion == FusionMode::with_fer) {
        if (!fer) throw ConfigError("with_fer mode requires an expression model");
        if (fer->config.feature_channels != cfg.fer_feature_channels) {
            throw ConfigError("expression model feature channels (" + std::to_string(fer->config.feature_channels) +
                              ") != fer_feature_channels (" + std::to_string(cfg.fer_feature_channels) + ")");
        }
        return select_expression_features_batch(*fer, images);
    }
    return Tensor<float>(Shape{images.shape().n, cfg.fer_feature_channels, cfg.fusion_size(), cfg.fusion_size()});
}

}  // namespace

ManipOutput forward(const ManipModel& model, const FerModel* fer, const FaceImage& image) {
    const Tensor<float> ff = expression_features(model, fer, image.pixels);
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    const ManipGraph<float> m = manip_graph(b, model.config, g.input(image.pixels), g.input(ff));
    ManipOutput out;
    out.score = g.value(m.score)[0];
    out.segmentation = g.value(m.segmentation);
    out.latent = g.value(m.latent);
    return out;
}

BatchPrediction predict_batch(const ManipModel& model, const Tensor<float>& images, const Tensor<float>& ff) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    const ManipGraph<float> m = manip_graph(b, model.config, g.input(images), g.input(ff));
    BatchPrediction out;
    const Tensor<float>& scores = g.value(m.score);
    out.scores.assign(scores.vec().begin(), scores.vec().end());
    out.segmentation = g.value(m.segmentation);
    return out;
}

double cls_loss(std::span<const double> scores, std::span<const int> labels, double eps) {
    if (scores.size() != labels.size() || scores.empty()) throw PreconditionError("cls_loss: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double a = std::clamp(scores[i], eps, 1.0 - eps);
        s -= labels[i] * std::log(a) + (1 - labels[i]) * std::log(1.0 - a);
    }
    return s / static_cast<double>(scores.size());
}

double seg_loss(const std::vector<std::vector<double>>& s, const std::vector<std::vector<int>>& m, double eps) {
    if (s.size() != m.size() || s.empty()) throw PreconditionError("seg_loss: batch size mismatch");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i].size() != m[i].size()) throw PreconditionError("seg_loss: shape mismatch");
        for (std::size_t k = 0; k < s[i].size(); ++k) {
            const double p = std::clamp(s[i][k], eps, 1.0 - eps);
            total -= m[i][k] * std::log(p) + (1 - m[i][k]) * std::log(1.0 - p);
        }
        count += s[i].size();
    }
    return total / static_cast<double>(count);
}

double seg_loss(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks, double eps) {
    if (segmentations.size() != masks.size()) throw PreconditionError("seg_loss: batch size mismatch");
    std::vector<std::vector<double>> s;
    std::vector<std::vector<int>> m;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Shape sh = segmentations[i].shape();
        if (sh.h != masks[i].height || sh.w != masks[i].width || sh.numel() != sh.plane()) {
            throw PreconditionError("seg_loss: segmentation " + sh.str() + " does not match mask " +
                                    std::to_string(masks[i].height) + "x" + std::to_string(masks[i].width));
        }
        s.emplace_back(segmentations[i].vec().begin(), segmentations[i].vec().end());
        m.emplace_back(masks[i].values.begin(), masks[i].values.end());
    }
    return seg_loss(s, m, eps);
}

double mani_loss(double cls_term, double seg_term) {
    if (!std::isfinite(cls_term) || !std::isfinite(seg_term)) throw PreconditionError("mani_loss: non-finite term");
    return cls_term + seg_term;
}

}  // namespace emd
