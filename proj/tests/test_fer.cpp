#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "emd/errors.hpp"
#include "emd/fer.hpp"
#include "emd/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace emd;
using emd::test::mock_branch;
using emd::test::random_ensemble;
using emd::test::random_tensor;
using emd::test::toy_fer_config;

namespace {

FerModel zero_classifier_model(const FerConfig& cfg) {
    FerModel m = init_fer(cfg, 3);
    for (auto& e : m.params.entries())
        if (e.name.find(".cls.") != std::string::npos) e.value.fill(0.0f);
    return m;
}

}  // namespace

TEST_CASE("detect_branch_classes: unique maximum and smallest-index ties") {
    const std::vector<BranchOutput> a{mock_branch({0.1, 0.7, 0.2}, 0)};
    CHECK(detect_branch_classes(a) == std::vector<int>{1});
    const std::vector<BranchOutput> b{mock_branch({0.4, 0.4, 0.2}, 0)};
    CHECK(detect_branch_classes(b) == std::vector<int>{0});
}

TEST_CASE("frequent_class: majority and smallest-index ties") {
    CHECK(frequent_class(std::vector<int>{1, 1, 2}) == 1);
    CHECK(frequent_class(std::vector<int>{2, 0}) == 0);
    CHECK_THROWS_AS(frequent_class(std::vector<int>{}), PreconditionError);
}

TEST_CASE("pool_branch_feature picks the most confident branch for the voted class") {
    const std::vector<BranchOutput> two{mock_branch({0.4, 0.6}, 1.0f), mock_branch({0.1, 0.9}, 2.0f)};
    const auto [feature, index] = pool_branch_feature(two, 1);
    CHECK(index == 1);
    CHECK(feature[0] == 2.0f);

    const std::vector<BranchOutput> one{mock_branch({0.9, 0.1}, 7.0f)};
    CHECK(pool_branch_feature(one, 1).second == 0);
    CHECK(pool_branch_feature(one, 1).first[0] == 7.0f);
}

TEST_CASE("hand-built three-branch ensemble selects the analytic branch") {
    // Detections: 2, 0, 2 -> vote 2; probabilities for class 2 are 0.5, 0.1, 0.6 -> branch 2.
    const std::vector<BranchOutput> outs{mock_branch({0.2, 0.3, 0.5}, 0), mock_branch({0.8, 0.1, 0.1}, 1),
                                         mock_branch({0.3, 0.1, 0.6}, 2)};
    CHECK(detect_branch_classes(outs) == std::vector<int>{2, 0, 2});
    CHECK(select_branch(outs) == 2);
}

TEST_CASE("selection steps match brute-force oracles on 1000 random ensembles") {
    const auto r = emd::test::selection_oracle_run(1000, 2024);
    CHECK(r.detect == 0);
    CHECK(r.mode == 0);
    CHECK(r.pool == 0);
    CHECK(r.tie_cases == 500);
}

TEST_CASE("selection is invariant under a monotone transform and under branch permutation") {
    Rng rng(77);
    for (int i = 0; i < 200; ++i) {
        const auto outs = random_ensemble(rng, false);
        auto cubed = outs;
        for (auto& b : cubed)
            for (auto& p : b.probs) p = std::pow(p, 3.0) + 2.0;
        CHECK(detect_branch_classes(cubed) == detect_branch_classes(outs));
        CHECK(select_branch(cubed) == select_branch(outs));

        std::vector<int> perm(outs.size());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        std::vector<BranchOutput> shuffled;
        for (int p : perm) shuffled.push_back(outs[p]);
        const int voted = frequent_class(detect_branch_classes(outs));
        CHECK(frequent_class(detect_branch_classes(shuffled)) == voted);
        const auto direct = pool_branch_feature(outs, voted);
        const auto permuted = pool_branch_feature(shuffled, voted);
        CHECK(perm[permuted.second] == direct.second);
    }
}

TEST_CASE("fer_loss examples from explicit probabilities") {
    CHECK(fer_loss({{{0.0, 1.0, 0.0, 0.0}}}, {1}) == 0.0);
    CHECK(std::abs(fer_loss({{{0.25, 0.25, 0.25, 0.25}}}, {2}) - std::log(4.0)) < 1e-9);
    const std::vector<std::vector<double>> uniform(2, std::vector<double>(4, 0.25));
    CHECK(std::abs(fer_loss({uniform, uniform}, {0, 3}) - 2.0 * std::log(4.0)) < 1e-9);
    CHECK(std::abs(fer_loss({uniform, uniform}, {0, 3}) - 2.7725887) < 1e-6);
    CHECK_THROWS_AS(fer_loss(std::vector<std::vector<std::vector<double>>>{{}}, {}), PreconditionError);

    // Saturated wrong answers hit the clamp, never infinity: 0 <= L <= B * -log(eps).
    const std::vector<std::vector<double>> wrong(1, std::vector<double>{1.0, 0.0});
    const double worst = fer_loss({wrong, wrong, wrong}, {1});
    CHECK(std::isfinite(worst));
    CHECK(worst == doctest::Approx(-3.0 * std::log(kProbClamp)));
}

TEST_CASE("fer_forward contract") {
    const FerConfig cfg = toy_fer_config();
    Rng rng(5);
    const FerModel model = init_fer(cfg, 1);
    const FaceImage img = emd::test::random_image(cfg.input_size, rng);
    const auto outs = fer_forward(model, img);
    REQUIRE(outs.size() == 2);
    for (const auto& o : outs) {
        CHECK(std::abs(std::accumulate(o.probs.begin(), o.probs.end(), 0.0) - 1.0) < 1e-6);
        CHECK(o.feature.shape() == Shape{1, cfg.feature_channels, cfg.feature_size(), cfg.feature_size()});
    }
    const auto again = fer_forward(model, img);
    for (std::size_t b = 0; b < outs.size(); ++b) {
        CHECK(again[b].probs == outs[b].probs);
        CHECK(again[b].feature == outs[b].feature);
    }

    const FerModel zeroed = zero_classifier_model(cfg);
    for (const auto& o : fer_forward(zeroed, FaceImage(cfg.input_size))) {
        for (double p : o.probs) CHECK(p == doctest::Approx(1.0 / cfg.class_count).epsilon(1e-6));
    }

    CHECK_THROWS_AS(fer_forward(model, FaceImage(cfg.input_size * 2)), PreconditionError);

    FerConfig simple = cfg;
    simple.variant = FerVariant::simple;
    simple.branches = 5;
    CHECK(fer_forward(init_fer(simple, 1), img).size() == 1);
}

TEST_CASE("select_expression_features equals the step-by-step composition") {
    const FerConfig cfg = toy_fer_config();
    const FerModel model = init_fer(cfg, 9);
    Rng rng(6);
    for (int i = 0; i < 10; ++i) {
        const FaceImage img = emd::test::random_image(cfg.input_size, rng);
        const auto outs = fer_forward(model, img);
        const int voted = frequent_class(detect_branch_classes(outs));
        CHECK(select_expression_features(model, img) == pool_branch_feature(outs, voted).first);
    }

    FerConfig one = cfg;
    one.branches = 1;
    const FerModel single = init_fer(one, 9);
    const FaceImage img = emd::test::random_image(cfg.input_size, rng);
    CHECK(select_expression_features(single, img) == fer_forward(single, img)[0].feature);
}

TEST_CASE("batched and single-image expression features agree") {
    const FerConfig cfg = toy_fer_config();
    const FerModel model = init_fer(cfg, 4);
    Rng rng(12);
    std::vector<FaceImage> imgs;
    std::vector<const Tensor<float>*> ptrs;
    for (int i = 0; i < 3; ++i) imgs.push_back(emd::test::random_image(cfg.input_size, rng));
    for (const auto& im : imgs) ptrs.push_back(&im.pixels);
    const Tensor<float> batch = select_expression_features_batch(model, stack_batch(ptrs));
    for (int i = 0; i < 3; ++i) {
        const FeatureMap one = select_expression_features(model, imgs[i]);
        for (std::size_t k = 0; k < one.size(); ++k) CHECK(batch.sample(i)[k] == doctest::Approx(one[k]).epsilon(1e-5));
    }
}

TEST_CASE("class activation maps") {
    const Tensor<float> constant(Shape{1, 3, 2, 2}, 0.7f);
    const std::vector<float> w{0.5f, -1.0f, 2.0f};
    const auto flat = cam_from_features(constant, w, 8, 8);
    for (float v : flat.vec()) CHECK(v == 0.0f);

    // One active channel holding a ramp [0, 1, 2, 3]; half-pixel upsampling to
    // eight columns gives 0, .25, .75, ..., 2.75, 3 before normalization.
    Tensor<float> ramp(Shape{1, 2, 1, 4});
    for (int x = 0; x < 4; ++x) ramp.at(0, 0, 0, x) = static_cast<float>(x);
    for (int x = 0; x < 4; ++x) ramp.at(0, 1, 0, x) = 100.0f;
    const auto cam = cam_from_features(ramp, std::vector<float>{1.0f, 0.0f}, 1, 8);
    const std::vector<double> expected{0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3};
    for (int x = 0; x < 8; ++x) CHECK(cam[x] == doctest::Approx(expected[x] / 3.0).epsilon(1e-6));

    const FerConfig cfg = toy_fer_config();
    const FerModel model = init_fer(cfg, 2);
    Rng rng(3);
    const auto map = compute_cam(model, emd::test::random_image(cfg.input_size, rng), 1);
    CHECK(map.shape() == Shape{1, 1, cfg.input_size, cfg.input_size});
    for (float v : map.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("fer loss gradient matches central differences at toy width") {
    const double err = emd::test::fer_gradcheck_error();
    MESSAGE("fer gradcheck max relative error " << err);
    CHECK(err < 1e-4);
}

TEST_CASE("FerConfig validation") {
    FerConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.branches = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = FerConfig{};
    cfg.feature_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(parse_fer_variant("simple") == FerVariant::simple);
    CHECK_THROWS(parse_fer_variant("bogus"));
}
