#pragma once

/// @file training.hpp
/// @brief Two-phase training: the expression network first, then the
/// manipulation network with the expression network frozen.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "emd/datamodel.hpp"
#include "emd/fer.hpp"
#include "emd/manipnet.hpp"

namespace emd {

struct TrainConfig {
    double lr = 1e-3;           ///< expression network step size
    double lr_manip = 1e-3;     ///< manipulation network step size
    int batch_size = 16;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs_frozen_head = 3; ///< head-only epochs before full training of the manipulation network
    int epochs = 20;            ///< full-training epochs of the manipulation network
    int fer_epochs = 20;
    double val_fraction = 0.1;  ///< share of each training split held out for model selection
    std::uint64_t seed = 7;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    double val_accuracy = 0;
    std::optional<double> val_pixel_accuracy;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    int selected_epoch = 0;
    double wall_time_s = 0;

    nlohmann::json to_json() const;
};

template <class T>
class Adam {
public:
    Adam(const ParamSet<T>& params, double lr, double beta1, double beta2, double eps)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& e : params.entries()) {
            state_.push_back({Tensor<T>(e.value.shape()), Tensor<T>(e.value.shape()), 0});
        }
    }

    /// Updates every non-buffer entry accepted by `trainable` from its grad.
    void step(ParamSet<T>& params, const std::function<bool(const std::string&)>& trainable = {}) {
        auto& entries = params.entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto& e = entries[i];
            if (e.buffer || (trainable && !trainable(e.name))) continue;
            State& s = state_[i];
            ++s.t;
            const double c1 = 1.0 - std::pow(b1_, s.t);
            const double c2 = 1.0 - std::pow(b2_, s.t);
            for (std::size_t k = 0; k < e.value.size(); ++k) {
                const double g = e.grad[k];
                const double m = b1_ * s.m[k] + (1.0 - b1_) * g;
                const double v = b2_ * s.v[k] + (1.0 - b2_) * g * g;
                s.m[k] = static_cast<T>(m);
                s.v[k] = static_cast<T>(v);
                e.value[k] -= static_cast<T>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
            }
        }
    }

private:
    struct State {
        Tensor<T> m, v;
        int t = 0;
    };
    double lr_, b1_, b2_, eps_;
    std::vector<State> state_;
};

/// Optional progress sink: (phase, epoch, record).
using ProgressFn = std::function<void(const std::string&, const EpochRecord&)>;

struct FerTrainResult {
    FerModel model;
    TrainReport report;
};

/// Phase 1. Keeps the parameters of the epoch with the best validation
/// accuracy (ensemble vote); writes a checkpoint to `checkpoint_dir` on every
/// improvement when given.
FerTrainResult train_fer(const Dataset& train, const Dataset& val, const FerConfig& fer_cfg, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                         const ProgressFn& progress = {});

struct ManipTrainResult {
    ManipModel model;
    TrainReport report;
};

/// Phase 2. Only the manipulation parameters change; `fer` is read-only and
/// may be null in without_fer mode. The first `epochs_frozen_head` epochs update
/// only the post-fusion block and the heads.
ManipTrainResult train_manip(const Dataset& train, const Dataset& val, const FerModel* fer, const ManipConfig& manip_cfg,
                             const TrainConfig& cfg,
                             const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                             const std::string& fer_ref = "", const ProgressFn& progress = {});

/// Fraction of samples whose ensemble vote equals the label.
double fer_accuracy(const FerModel& model, const Dataset& data);

/// Pooled expression features for every sample of a manipulation dataset,
/// or zeros in without_fer mode; {N, K_f, h, w}.
Tensor<float> dataset_expression_features(const Dataset& data, const FerModel* fer, const ManipConfig& cfg);

struct OverfitResult {
    double initial_loss = 0;
    double final_loss = 0;
};

/// Repeated Adam steps on one fixed batch; the final loss is measured after the last step.
OverfitResult overfit_fer(std::span<const ExpressionSample> batch, const FerConfig& fer_cfg, const TrainConfig& cfg,
                          int steps);
OverfitResult overfit_manip(std::span<const ManipulationSample> batch, const FerModel* fer,
                            const ManipConfig& manip_cfg, const TrainConfig& cfg, int steps);

/// loss(params, with_grads): returns the loss and, when asked, accumulates
/// the analytic gradient into params' grad tensors.
using LossFn = std::function<double(ParamSet<double>&, bool)>;

/// Max relative error |analytic - numeric| / max(1e-8, |numeric|) over
/// `probe_count` random scalar parameters, numeric gradients by central differences.
double finite_diff_gradcheck(const LossFn& loss, ParamSet<double>& params, int probe_count, double step,
                             std::uint64_t seed = 0);

}  // namespace emd
