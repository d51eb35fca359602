#include "emd/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "emd/checkpoint.hpp"
#include "emd/rng.hpp"

namespace emd {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(lr >= 0) || !(lr_manip >= 0)) fail("learning rates must be non-negative");
    if (batch_size < 1) fail("batch_size must be at least 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) fail("betas must be in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction must be in [0, 1)");
    if (epochs_frozen_head < 0 || epochs < 0 || fer_epochs < 0) fail("epoch counts must be non-negative");
}

nlohmann::json TrainReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : epochs) {
        nlohmann::json r{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}};
        if (e.val_pixel_accuracy) r["val_pixel_accuracy"] = *e.val_pixel_accuracy;
        rows.push_back(std::move(r));
    }
    return {{"epochs", rows}, {"selected_epoch", selected_epoch}, {"wall_time_s", wall_time_s}};
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, const std::string& phase, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, phase + "-epoch-" + std::to_string(epoch));
    rng.shuffle(order);
    return order;
}

template <class Sample>
std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, int batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
    }
    return out;
}

Tensor<float> stack_images(const std::vector<ExpressionSample>& s, const std::vector<std::size_t>& idx) {
    std::vector<const Tensor<float>*> p;
    for (std::size_t i : idx) p.push_back(&s[i].image.pixels);
    return stack_batch(p);
}

Tensor<float> stack_images(const std::vector<ManipulationSample>& s, const std::vector<std::size_t>& idx) {
    std::vector<const Tensor<float>*> p;
    for (std::size_t i : idx) p.push_back(&s[i].image.pixels);
    return stack_batch(p);
}

Tensor<float> stack_masks(const std::vector<ManipulationSample>& s, const std::vector<std::size_t>& idx) {
    const BinaryMask& first = s[idx.front()].mask;
    Tensor<float> out(Shape{static_cast<int>(idx.size()), 1, first.height, first.width});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const BinaryMask& m = s[idx[k]].mask;
        if (m.height != first.height || m.width != first.width) throw PreconditionError("mask sizes differ in batch");
        float* dst = out.plane(static_cast<int>(k), 0);
        for (std::size_t p = 0; p < m.values.size(); ++p) dst[p] = m.values[p] ? 1.0f : 0.0f;
    }
    return out;
}

Tensor<float> gather_rows(const Tensor<float>& all, const std::vector<std::size_t>& idx) {
    std::vector<Tensor<float>> rows;
    rows.reserve(idx.size());
    for (std::size_t i : idx) rows.push_back(all.sample(static_cast<int>(i)));
    std::vector<const Tensor<float>*> p;
    for (const auto& r : rows) p.push_back(&r);
    return stack_batch(p);
}

void require_expression(const Dataset& d, const char* what) {
    if (d.kind != DatasetKind::expression) throw PreconditionError(std::string(what) + " must be an expression dataset");
}

void require_manipulation(const Dataset& d, const char* what) {
    if (d.kind != DatasetKind::manipulation) {
        throw PreconditionError(std::string(what) + " must be a manipulation dataset");
    }
}

constexpr std::size_t kEvalChunk = 64;

struct ManipScores {
    double cls_accuracy = 0;
    double pixel_accuracy = 0;
};

ManipScores manip_scores(const ManipModel& model, const Dataset& data, const Tensor<float>& ff) {
    std::size_t correct = 0, px_correct = 0, px_total = 0;
    const auto& s = data.manipulation;
    for (std::size_t start = 0; start < s.size(); start += kEvalChunk) {
        std::vector<std::size_t> idx(std::min(kEvalChunk, s.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const BatchPrediction pred = predict_batch(model, stack_images(s, idx), gather_rows(ff, idx));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const ManipulationSample& smp = s[idx[k]];
            if ((pred.scores[k] >= 0.5 ? 1 : 0) == smp.label) ++correct;
            const float* seg = pred.segmentation.plane(static_cast<int>(k), 0);
            for (std::size_t p = 0; p < smp.mask.values.size(); ++p) {
                if ((seg[p] >= 0.5f) == (smp.mask.values[p] != 0)) ++px_correct;
            }
            px_total += smp.mask.values.size();
        }
    }
    ManipScores out;
    if (!s.empty()) out.cls_accuracy = static_cast<double>(correct) / static_cast<double>(s.size());
    if (px_total) out.pixel_accuracy = static_cast<double>(px_correct) / static_cast<double>(px_total);
    return out;
}

/// Replaces every running statistic with the average of the batch statistics
/// over `batch_count` forward passes made by `forward(graph, binder, k)`.
template <class Forward>
void recalibrate_batch_norm(ParamSet<float>& params, std::size_t batch_count, const Forward& forward) {
    for (auto& e : params.entries()) {
        if (e.buffer) e.value.fill(0.0f);
    }
    for (std::size_t k = 0; k < batch_count; ++k) {
        Graph<float> g(true);
        g.set_bn_momentum(1.0f / static_cast<float>(k + 1));
        Binder<float> b(g, params, false, true);
        forward(g, b, k);
    }
}

std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, int batch_size) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    return batches_of<int>(order, batch_size);
}

void check_finite_step(double loss, const ParamSet<float>& params, const std::string& phase, int epoch, int step) {
    if (!std::isfinite(loss) || !params.all_finite()) {
        throw DivergenceError(phase + " training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + " (loss " + std::to_string(loss) + ")");
    }
}

}  // namespace

double fer_accuracy(const FerModel& model, const Dataset& data) {
    require_expression(data, "fer_accuracy data");
    const auto& s = data.expression;
    if (s.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < s.size(); start += kEvalChunk) {
        std::vector<std::size_t> idx(std::min(kEvalChunk, s.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto outputs = fer_forward_batch(model, stack_images(s, idx));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const std::vector<int> det = detect_branch_classes(outputs[k]);
            if (frequent_class(det) == s[idx[k]].expression) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(s.size());
}

Tensor<float> dataset_expression_features(const Dataset& data, const FerModel* fer, const ManipConfig& cfg) {
    require_manipulation(data, "expression feature source");
    const auto& s = data.manipulation;
    const int n = static_cast<int>(s.size());
    if (cfg.fusion == FusionMode::without_fer || n == 0) {
        return Tensor<float>(Shape{n, cfg.fer_feature_channels, cfg.fusion_size(), cfg.fusion_size()});
    }
    if (!fer) throw ConfigError("with_fer mode requires an expression model");
    if (fer->config.feature_channels != cfg.fer_feature_channels) {
        throw ConfigError("expression model feature channels (" + std::to_string(fer->config.feature_channels) +
                          ") != fer_feature_channels (" + std::to_string(cfg.fer_feature_channels) + ")");
    }
    std::vector<Tensor<float>> chunks;
    for (std::size_t start = 0; start < s.size(); start += kEvalChunk) {
        std::vector<std::size_t> idx(std::min(kEvalChunk, s.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        chunks.push_back(select_expression_features_batch(*fer, stack_images(s, idx)));
    }
    std::vector<const Tensor<float>*> p;
    for (const auto& c : chunks) p.push_back(&c);
    return stack_batch(p);
}

FerTrainResult train_fer(const Dataset& train, const Dataset& val, const FerConfig& fer_cfg, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& checkpoint_dir, const ProgressFn& progress) {
    cfg.validate();
    fer_cfg.validate();
    require_expression(train, "training data");
    require_expression(val, "validation data");
    if (train.expression.empty()) throw PreconditionError("train_fer: empty training set");
    for (const auto& s : train.expression) {
        if (s.expression < 0 || s.expression >= fer_cfg.class_count) {
            throw ValidationError("sample " + s.id + ": expression out of range for class_count " +
                                  std::to_string(fer_cfg.class_count));
        }
    }

    const auto t0 = Clock::now();
    FerModel model = init_fer(fer_cfg, derive_seed(cfg.seed, "fer-init"));
    Adam<float> opt(model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    FerTrainResult result{model, {}};
    double best = -1.0;

    for (int epoch = 1; epoch <= cfg.fer_epochs; ++epoch) {
        const auto order = epoch_order(train.expression.size(), cfg.seed, "fer", epoch);
        double loss_sum = 0.0;
        int step = 0;
        for (const auto& idx : batches_of<ExpressionSample>(order, cfg.batch_size)) {
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(train.expression[i].expression);
            model.params.zero_grad();
            const double loss = fer_loss_and_grad<float>(fer_cfg, model.params, stack_images(train.expression, idx),
                                                         labels, true, true);
            opt.step(model.params);
            check_finite_step(loss, model.params, "fer", epoch, ++step);
            loss_sum += loss;
        }
        const auto seq = sequential_batches(train.expression.size(), cfg.batch_size);
        recalibrate_batch_norm(model.params, seq.size(), [&](Graph<float>& g, Binder<float>& b, std::size_t k) {
            fer_graph(b, fer_cfg, g.input(stack_images(train.expression, seq[k])));
        });
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / std::max(1, step);
        rec.val_accuracy = val.expression.empty() ? fer_accuracy(model, train) : fer_accuracy(model, val);
        result.report.epochs.push_back(rec);
        if (progress) progress("fer", rec);
        if (rec.val_accuracy > best) {
            best = rec.val_accuracy;
            result.model = model;
            result.report.selected_epoch = epoch;
            if (checkpoint_dir) save_fer_checkpoint(*checkpoint_dir, model, epoch, rec.val_accuracy);
        }
    }
    if (cfg.fer_epochs == 0) {
        result.model = model;
        if (checkpoint_dir) save_fer_checkpoint(*checkpoint_dir, model, 0, 0.0);
    }
    result.report.wall_time_s = seconds_since(t0);
    return result;
}

ManipTrainResult train_manip(const Dataset& train, const Dataset& val, const FerModel* fer,
                             const ManipConfig& manip_cfg, const TrainConfig& cfg,
                             const std::optional<std::filesystem::path>& checkpoint_dir, const std::string& fer_ref,
                             const ProgressFn& progress) {
    cfg.validate();
    manip_cfg.validate();
    require_manipulation(train, "training data");
    require_manipulation(val, "validation data");
    if (train.manipulation.empty()) throw PreconditionError("train_manip: empty training set");
    if (manip_cfg.fusion == FusionMode::with_fer && fer && fer->config.input_size != manip_cfg.input_size) {
        throw ConfigError("expression model input_size differs from manipulation input_size");
    }

    const auto t0 = Clock::now();
    // The expression network is frozen, so its pooled features are computed once.
    const Tensor<float> ff_train = dataset_expression_features(train, fer, manip_cfg);
    const Tensor<float> ff_val = dataset_expression_features(val, fer, manip_cfg);

    ManipModel model = init_manip(manip_cfg, derive_seed(cfg.seed, "manip-init"));
    Adam<float> opt(model.params, cfg.lr_manip, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    ManipTrainResult result{model, {}};
    double best_cls = -1.0, best_px = -1.0;

    const int total = cfg.epochs_frozen_head + cfg.epochs;
    for (int epoch = 1; epoch <= total; ++epoch) {
        const bool head_only = epoch <= cfg.epochs_frozen_head;
        Binder<float>::Filter filter;
        if (head_only) filter = is_head_parameter;
        const auto order = epoch_order(train.manipulation.size(), cfg.seed, "manip", epoch);
        double loss_sum = 0.0;
        int step = 0;
        for (const auto& idx : batches_of<ManipulationSample>(order, cfg.batch_size)) {
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(train.manipulation[i].label);
            model.params.zero_grad();
            const double loss = mani_loss_and_grad<float>(
                manip_cfg, model.params, stack_images(train.manipulation, idx), gather_rows(ff_train, idx), labels,
                stack_masks(train.manipulation, idx), true, true, filter);
            opt.step(model.params, filter);
            check_finite_step(loss, model.params, "manip", epoch, ++step);
            loss_sum += loss;
        }
        const auto seq = sequential_batches(train.manipulation.size(), cfg.batch_size);
        recalibrate_batch_norm(model.params, seq.size(), [&](Graph<float>& g, Binder<float>& b, std::size_t k) {
            manip_graph(b, manip_cfg, g.input(stack_images(train.manipulation, seq[k])),
                        g.input(gather_rows(ff_train, seq[k])));
        });
        const ManipScores sc = val.manipulation.empty() ? manip_scores(model, train, ff_train)
                                                        : manip_scores(model, val, ff_val);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / std::max(1, step);
        rec.val_accuracy = sc.cls_accuracy;
        rec.val_pixel_accuracy = sc.pixel_accuracy;
        result.report.epochs.push_back(rec);
        if (progress) progress(head_only ? "manip-head" : "manip", rec);
        // Classification accuracy decides; pixel accuracy breaks ties.
        if (sc.cls_accuracy > best_cls || (sc.cls_accuracy == best_cls && sc.pixel_accuracy > best_px)) {
            best_cls = sc.cls_accuracy;
            best_px = sc.pixel_accuracy;
            result.model = model;
            result.report.selected_epoch = epoch;
            if (checkpoint_dir) {
                save_manip_checkpoint(*checkpoint_dir, model, fer_ref, epoch,
                                      {{"val_accuracy", sc.cls_accuracy}, {"val_pixel_accuracy", sc.pixel_accuracy}});
            }
        }
    }
    if (total == 0) {
        result.model = model;
        if (checkpoint_dir) save_manip_checkpoint(*checkpoint_dir, model, fer_ref, 0, nlohmann::json::object());
    }
    result.report.wall_time_s = seconds_since(t0);
    return result;
}

OverfitResult overfit_fer(std::span<const ExpressionSample> batch, const FerConfig& fer_cfg, const TrainConfig& cfg,
                          int steps) {
    if (batch.empty()) throw PreconditionError("overfit_fer: empty batch");
    FerModel model = init_fer(fer_cfg, derive_seed(cfg.seed, "fer-init"));
    std::vector<const Tensor<float>*> p;
    std::vector<int> labels;
    for (const auto& s : batch) {
        p.push_back(&s.image.pixels);
        labels.push_back(s.expression);
    }
    const Tensor<float> images = stack_batch(p);
    Adam<float> opt(model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    OverfitResult r;
    for (int i = 0; i < steps; ++i) {
        model.params.zero_grad();
        const double loss = fer_loss_and_grad<float>(fer_cfg, model.params, images, labels, true, true);
        if (i == 0) r.initial_loss = loss;
        opt.step(model.params);
    }
    r.final_loss = fer_loss_and_grad<float>(fer_cfg, model.params, images, labels, false);
    if (steps == 0) r.initial_loss = r.final_loss;
    return r;
}

OverfitResult overfit_manip(std::span<const ManipulationSample> batch, const FerModel* fer,
                            const ManipConfig& manip_cfg, const TrainConfig& cfg, int steps) {
    if (batch.empty()) throw PreconditionError("overfit_manip: empty batch");
    Dataset d;
    d.kind = DatasetKind::manipulation;
    d.manipulation.assign(batch.begin(), batch.end());
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const Tensor<float> ff = dataset_expression_features(d, fer, manip_cfg);
    const Tensor<float> images = stack_images(d.manipulation, idx);
    const Tensor<float> masks = stack_masks(d.manipulation, idx);
    std::vector<int> labels;
    for (const auto& s : batch) labels.push_back(s.label);

    ManipModel model = init_manip(manip_cfg, derive_seed(cfg.seed, "manip-init"));
    Adam<float> opt(model.params, cfg.lr_manip, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    OverfitResult r;
    for (int i = 0; i < steps; ++i) {
        model.params.zero_grad();
        const double loss = mani_loss_and_grad<float>(manip_cfg, model.params, images, ff, labels, masks, true, true);
        if (i == 0) r.initial_loss = loss;
        opt.step(model.params);
    }
    r.final_loss = mani_loss_and_grad<float>(manip_cfg, model.params, images, ff, labels, masks, false);
    if (steps == 0) r.initial_loss = r.final_loss;
    return r;
}

double finite_diff_gradcheck(const LossFn& loss, ParamSet<double>& params, int probe_count, double step,
                             std::uint64_t seed) {
    if (probe_count < 1 || !(step > 0)) throw PreconditionError("gradcheck: need probes >= 1 and step > 0");
    std::vector<std::size_t> weights;
    std::size_t total = 0;
    for (const auto& e : params.entries()) {
        weights.push_back(e.buffer ? 0 : e.value.size());
        total += weights.back();
    }
    if (total == 0) throw PreconditionError("gradcheck: no trainable parameters");

    params.zero_grad();
    loss(params, true);
    Rng rng(seed, "gradcheck");
    double worst = 0.0;
    for (int probe = 0; probe < probe_count; ++probe) {
        std::size_t pick = rng.below(total), ei = 0;
        while (pick >= weights[ei]) pick -= weights[ei++];
        auto& e = params.entries()[ei];
        const double analytic = e.grad[pick];
        const double orig = e.value[pick];
        e.value[pick] = orig + step;
        const double up = loss(params, false);
        e.value[pick] = orig - step;
        const double down = loss(params, false);
        e.value[pick] = orig;
        const double numeric = (up - down) / (2.0 * step);
        if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
            throw DivergenceError("gradcheck: non-finite gradient for " + e.name);
        }
        worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric)));
    }
    return worst;
}

}  // namespace emd
