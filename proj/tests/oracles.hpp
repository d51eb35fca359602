#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance runner. Each one is written independently of the library code
// it checks.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "emd/evaluation.hpp"
#include "emd/fer.hpp"
#include "emd/manipnet.hpp"
#include "emd/synthgen.hpp"
#include "emd/training.hpp"
#include "support.hpp"

namespace emd::test {

inline BranchOutput mock_branch(std::vector<double> probs, float tag) {
    BranchOutput b;
    b.feature = Tensor<float>(Shape{1, 2, 2, 2}, tag);
    b.probs = std::move(probs);
    return b;
}

/// Random distribution; with `ties` the entries take one of four levels, so equal maxima are common.
inline std::vector<double> random_probs(int c, Rng& rng, bool ties) {
    std::vector<double> p(c);
    for (auto& v : p) v = ties ? static_cast<double>(rng.below(4)) + 1.0 : rng.uniform(0.01, 1.0);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) v /= s;
    return p;
}

inline int scan_argmax(const std::vector<double>& p) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(p.size()); ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

inline int histogram_mode(const std::vector<int>& d, int classes) {
    std::vector<int> h(classes, 0);
    for (int v : d) ++h[v];
    int best = 0;
    for (int c = 1; c < classes; ++c)
        if (h[c] > h[best]) best = c;
    return best;
}

inline int scan_branch(const std::vector<BranchOutput>& outs, int c) {
    int best = 0;
    for (int b = 1; b < static_cast<int>(outs.size()); ++b)
        if (outs[b].probs[c] > outs[best].probs[c]) best = b;
    return best;
}

/// Up to nine branches over two to eleven classes.
inline std::vector<BranchOutput> random_ensemble(Rng& rng, bool ties) {
    const int branches = 1 + static_cast<int>(rng.below(9));
    const int classes = 2 + static_cast<int>(rng.below(10));
    std::vector<BranchOutput> outs;
    for (int b = 0; b < branches; ++b) outs.push_back(mock_branch(random_probs(classes, rng, ties), float(b)));
    return outs;
}

struct SelectionMismatches {
    int detect = 0;
    int mode = 0;
    int pool = 0;
    int tie_cases = 0;
};

/// Runs the three selection steps against the scans above on `count` random
/// ensembles; every other ensemble is built from tied probability levels.
inline SelectionMismatches selection_oracle_run(int count, std::uint64_t seed) {
    Rng rng(seed);
    SelectionMismatches r;
    for (int i = 0; i < count; ++i) {
        const bool ties = i % 2 == 1;
        const auto outs = random_ensemble(rng, ties);
        const int classes = static_cast<int>(outs[0].probs.size());
        const auto det = detect_branch_classes(outs);
        for (std::size_t b = 0; b < outs.size(); ++b) r.detect += det[b] != scan_argmax(outs[b].probs);
        const int voted = frequent_class(det);
        r.mode += voted != histogram_mode(det, classes);
        r.pool += pool_branch_feature(outs, voted).second != scan_branch(outs, voted);

        // Detection lists drawn directly, independent of any ensemble.
        std::vector<int> d(1 + rng.below(9));
        for (auto& v : d) v = static_cast<int>(rng.below(classes));
        r.mode += frequent_class(d) != histogram_mode(d, classes);
        if (ties) ++r.tie_cases;
    }
    return r;
}

/// Probability that a random positive outscores a random negative, ties counted as one half.
inline double mann_whitney(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            ++pairs;
        }
    }
    return wins / static_cast<double>(pairs);
}

/// Largest |trapezoid AUC - Mann-Whitney| over `sets` random score/label sets
/// of 100 samples; every other set uses coarse scores so ties cross classes.
inline double auc_duality_gap(int sets, std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0;
    for (int set = 0; set < sets; ++set) {
        const int n = 100;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            s[i] = set % 2 ? std::floor(rng.uniform() * 8) / 8 : rng.uniform();
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        worst = std::max(worst, std::abs(roc_and_auc(s, y).auc - mann_whitney(s, y)));
    }
    return worst;
}

/// Two-sample toy problem for manipulation-loss gradient checks: random
/// images and expression features, one empty mask and one 12x12 box.
struct ManipGradFixture {
    ManipConfig cfg = toy_manip_config();
    ParamSet<double> params;
    Tensor<double> images, ff, masks;
    std::vector<int> labels{0, 1};

    explicit ManipGradFixture(std::uint64_t seed) : params(init_manip_params<double>(cfg, seed)) {
        Rng rng(seed + 1);
        images = random_tensor<double>(Shape{2, 3, cfg.input_size, cfg.input_size}, rng, 0, 1);
        ff = random_tensor<double>(Shape{2, cfg.fer_feature_channels, 4, 4}, rng);
        masks = Tensor<double>(Shape{2, 1, cfg.input_size, cfg.input_size});
        for (int y = 8; y < 20; ++y)
            for (int x = 10; x < 22; ++x) masks.at(1, 0, y, x) = 1;
    }
    LossFn loss() {
        return [this](ParamSet<double>& p, bool grads) {
            return mani_loss_and_grad(cfg, p, images, ff, labels, masks, grads);
        };
    }
};

/// Expression-loss gradient check on random images at toy width.
inline double fer_gradcheck_error() {
    const FerConfig cfg = toy_fer_config();
    ParamSet<double> params = init_fer_params<double>(cfg, 21);
    Rng rng(22);
    const Tensor<double> images = random_tensor<double>(Shape{2, 3, cfg.input_size, cfg.input_size}, rng, 0.0, 1.0);
    const std::vector<int> labels{0, 2};
    return finite_diff_gradcheck(
        [&](ParamSet<double>& p, bool grads) { return fer_loss_and_grad(cfg, p, images, labels, grads); }, params,
        50, 1e-4, 23);
}

/// Manipulation-loss gradient check on the kink-free fixture.
inline double manip_gradcheck_error() {
    ManipGradFixture fx(20);
    return finite_diff_gradcheck(fx.loss(), fx.params, 50, 1e-4, 22);
}

struct MaskExactness {
    int violations = 0;   ///< changed pixels outside the mask
    int manipulated = 0;  ///< samples whose mask has support
};

/// Renders `count` noisy 8-bit frames, edits each with a donor of another
/// class and counts pixels that moved by more than 2/255 outside the mask.
inline MaskExactness mask_exactness_run(int count) {
    MaskExactness r;
    for (int i = 0; i < count; ++i) {
        Rng rng(0xABC, "mask-exactness-" + std::to_string(i));
        const int cls = static_cast<int>(rng.below(4));
        const FaceSpec target = sample_face(cls, rng);
        const FaceSpec donor = sample_face((cls + 1 + static_cast<int>(rng.below(3))) % 4, rng);
        const FaceImage frame = quantize_8bit(add_sensor_noise(render_face(target, 64), 0.04, rng));
        const Manipulation m = apply_expression_manipulation(frame, target, donor, rng);
        r.manipulated += !m.mask.empty_support();
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    if (std::abs(m.image.at(c, y, x) - frame.at(c, y, x)) > 2.0f / 255.0f && !m.mask.at(y, x))
                        ++r.violations;
    }
    return r;
}

}  // namespace emd::test
