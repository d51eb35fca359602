#include "emd/fer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace emd {

std::string to_string(FerVariant v) { return v == FerVariant::simple ? "simple" : "ensemble"; }

FerVariant parse_fer_variant(const std::string& s) {
    if (s == "ensemble") return FerVariant::ensemble;
    if (s == "simple") return FerVariant::simple;
    throw ConfigError("unknown fer variant '" + s + "'");
}

void FerConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("fer config: " + m); };
    if (branches < 1 || branches > 9) fail("branches must be in [1, 9]");
    if (class_count < 2) fail("class_count must be at least 2");
    if (trunk_channels <= 0 || branch_channels <= 0 || feature_channels <= 0) fail("channel counts must be positive");
    if (input_size < 8 || input_size % 8 != 0) fail("input_size must be a positive multiple of 8");
}

FerModel init_fer(const FerConfig& cfg, std::uint64_t seed) {
    return FerModel{cfg, init_fer_params<float>(cfg, seed)};
}

std::vector<std::vector<BranchOutput>> fer_forward_batch(const FerModel& model, const Tensor<float>& images) {
    Graph<float> g(false);
    Binder<float> b(g, model.params);
    const FerGraph<float> fg = fer_graph(b, model.config, g.input(images));
    const int n = images.shape().n;
    const int branches = static_cast<int>(fg.features.size());
    std::vector<std::vector<BranchOutput>> out(n, std::vector<BranchOutput>(branches));
    for (int br = 0; br < branches; ++br) {
        const Tensor<float>& feat = g.value(fg.features[br]);
        const Tensor<float>& probs = g.value(fg.probs[br]);
        for (int i = 0; i < n; ++i) {
            out[i][br].feature = feat.sample(i);
            out[i][br].probs.resize(model.config.class_count);
            for (int c = 0; c < model.config.class_count; ++c) out[i][br].probs[c] = probs.at(i, c, 0, 0);
        }
    }
    return out;
}

std::vector<BranchOutput> fer_forward(const FerModel& model, const FaceImage& image) {
    return std::move(fer_forward_batch(model, image.pixels).front());
}

double fer_loss(const std::vector<std::vector<std::vector<double>>>& branch_probs, const std::vector<int>& labels) {
    if (labels.empty()) throw PreconditionError("fer_loss: empty batch");
    double total = 0.0;
    for (const auto& branch : branch_probs) {
        if (branch.size() != labels.size()) throw PreconditionError("fer_loss: sample count mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= static_cast<int>(branch[i].size())) {
                throw PreconditionError("fer_loss: label out of range");
            }
            s -= std::log(std::max(branch[i][labels[i]], kProbClamp));
        }
        total += s / static_cast<double>(labels.size());
    }
    return total;
}

double fer_loss(const FerModel& model, std::span<const ExpressionSample> batch) {
    if (batch.empty()) throw PreconditionError("fer_loss: empty batch");
    std::vector<const Tensor<float>*> imgs;
    std::vector<int> labels;
    for (const auto& s : batch) {
        if (s.expression < 0 || s.expression >= model.config.class_count) {
            throw PreconditionError("fer_loss: label out of range");
        }
        imgs.push_back(&s.image.pixels);
        labels.push_back(s.expression);
    }
    ParamSet<float> params = model.params;
    return fer_loss_and_grad<float>(model.config, params, stack_batch(imgs), labels, false);
}

std::vector<int> detect_branch_classes(std::span<const BranchOutput> outputs) {
    if (outputs.empty()) throw PreconditionError("detect_branch_classes: no branches");
    std::vector<int> out;
    out.reserve(outputs.size());
    for (const auto& o : outputs) {
        // max_element returns the first maximum, i.e. the smallest index on ties.
        out.push_back(static_cast<int>(std::max_element(o.probs.begin(), o.probs.end()) - o.probs.begin()));
    }
    return out;
}

int frequent_class(std::span<const int> detections) {
    if (detections.empty()) throw PreconditionError("frequent_class: no detections");
    const int hi = *std::max_element(detections.begin(), detections.end());
    std::vector<int> counts(static_cast<std::size_t>(hi) + 1, 0);
    for (int d : detections) {
        if (d < 0) throw PreconditionError("frequent_class: negative class index");
        ++counts[d];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::pair<FeatureMap, int> pool_branch_feature(std::span<const BranchOutput> outputs, int c_freq) {
    if (outputs.empty()) throw PreconditionError("pool_branch_feature: no branches");
    if (c_freq < 0 || c_freq >= static_cast<int>(outputs.front().probs.size())) {
        throw PreconditionError("pool_branch_feature: class " + std::to_string(c_freq) + " out of range");
    }
    int best = 0;
    for (int b = 1; b < static_cast<int>(outputs.size()); ++b) {
        if (outputs[b].probs[c_freq] > outputs[best].probs[c_freq]) best = b;
    }
    return {outputs[best].feature, best};
}

int select_branch(std::span<const BranchOutput> outputs) {
    const std::vector<int> det = detect_branch_classes(outputs);
    return pool_branch_feature(outputs, frequent_class(det)).second;
}

FeatureMap select_expression_features(const FerModel& model, const FaceImage& image) {
    const auto outputs = fer_forward(model, image);
    return pool_branch_feature(outputs, frequent_class(detect_branch_classes(outputs))).first;
}

Tensor<float> select_expression_features_batch(const FerModel& model, const Tensor<float>& images) {
    const auto outputs = fer_forward_batch(model, images);
    std::vector<FeatureMap> pooled;
    pooled.reserve(outputs.size());
    for (const auto& o : outputs) pooled.push_back(o[select_branch(o)].feature);
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& p : pooled) ptrs.push_back(&p);
    return stack_batch(ptrs);
}

Tensor<float> resize_bilinear(const Tensor<float>& x, int out_h, int out_w) {
    Graph<float> g(false);
    return g.value(g.resize_bilinear(g.input(x), out_h, out_w));
}

Tensor<float> cam_from_features(const FeatureMap& feature, std::span<const float> weights, int out_h, int out_w) {
    const Shape s = feature.shape();
    if (static_cast<int>(weights.size()) != s.c) throw PreconditionError("cam: weight count != feature channels");
    Tensor<float> map(Shape{1, 1, s.h, s.w});
    for (int k = 0; k < s.c; ++k) {
        const float* p = feature.plane(0, k);
        for (std::size_t i = 0; i < s.plane(); ++i) map[i] += weights[k] * p[i];
    }
    Tensor<float> up = resize_bilinear(map, out_h, out_w);
    const auto [lo, hi] = std::minmax_element(up.vec().begin(), up.vec().end());
    const float mn = *lo, range = *hi - *lo;
    for (float& v : up.vec()) v = range > 0 ? std::clamp((v - mn) / range, 0.0f, 1.0f) : 0.0f;
    return up;
}

Tensor<float> compute_cam(const FerModel& model, const FaceImage& image, int cls) {
    if (cls < 0 || cls >= model.config.class_count) throw PreconditionError("compute_cam: class out of range");
    const auto outputs = fer_forward(model, image);
    const int branch = select_branch(outputs);
    const Tensor<float>& w = model.params.value("branch." + std::to_string(branch) + ".cls.w");
    const int k = model.config.feature_channels;
    std::span<const float> row(w.data() + static_cast<std::size_t>(cls) * k, static_cast<std::size_t>(k));
    return cam_from_features(outputs[branch].feature, row, image.height(), image.width());
}

}  // namespace emd
