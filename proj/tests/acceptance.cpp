// Acceptance runner: prints one PASS/FAIL line per criterion A1 to A10 and
// exits nonzero when any criterion fails. The end-to-end criteria drive the
// emd binary exactly as a user would; the rest call the library directly.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <sys/wait.h>
#include <thread>

#include "emd/parallel.hpp"
#include "emd/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace emd;
namespace fs = std::filesystem;

namespace {

int failures = 0;
std::map<int, std::string> summary;

void report(const std::string& id, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    const std::string line = id + (pass ? " PASS  " : " FAIL  ") + detail;
    summary[std::stoi(id.substr(1))] = line;
    std::cout << line << std::endl;
}

std::string fmt(double v, int digits = 6) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

struct Cli {
    fs::path work;

    /// Runs emd single-threaded; stderr goes to `log` inside the work dir.
    std::pair<int, std::string> run(const std::string& args, const std::string& log) const {
        const std::string cmd =
            std::string(EMD_BINARY) + " --threads 1 " + args + " 2>>" + (work / log).string();
        std::string out;
        FILE* p = ::popen(cmd.c_str(), "r");
        if (!p) return {-1, ""};
        std::array<char, 256> buf{};
        while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
        const int status = ::pclose(p);
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
    }
    bool ok(const std::string& args, const std::string& log) const { return run(args, log).first == 0; }
};

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

struct RunOutcome {
    bool ok = false;
    double seconds = 0;
    nlohmann::json report;
};

/// gen-data, train-fer, train and eval for one seed with default settings.
RunOutcome with_fer_run(const Cli& cli, const fs::path& dir, int seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string d = dir.string(), set = " --set seed=" + std::to_string(seed);
    const std::string log = dir.filename().string() + ".log";
    RunOutcome r;
    r.ok = cli.ok("gen-data --out " + d + "/data" + set, log) &&
           cli.ok("train-fer --data " + d + "/data --out " + d + "/fer" + set, log) &&
           cli.ok("train --data " + d + "/data --fer " + d + "/fer --out " + d + "/with" + set, log) &&
           cli.ok("eval --data " + d + "/data --ckpt " + d + "/with --report " + d + "/with_eval/report.json", log);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r.ok) r.report = read_json(dir / "with_eval" / "report.json");
    return r;
}

/// The without_fer ablation on data already generated by with_fer_run.
RunOutcome without_fer_run(const Cli& cli, const fs::path& dir, int seed) {
    const std::string d = dir.string(), set = " --set seed=" + std::to_string(seed);
    const std::string log = dir.filename().string() + ".log";
    RunOutcome r;
    r.ok = cli.ok("train --no-fer --data " + d + "/data --out " + d + "/without" + set, log) &&
           cli.ok("eval --data " + d + "/data --ckpt " + d + "/without --report " + d + "/without_eval/report.json",
                  log);
    if (r.ok) r.report = read_json(dir / "without_eval" / "report.json");
    return r;
}

void check_losses() {
    int bad = 0;
    auto expect = [&](double got, double want, double tol) { bad += !(std::abs(got - want) <= tol); };
    const double ln2 = std::log(2.0), ln4 = std::log(4.0), eps = 1e-7;
    const std::vector<std::vector<double>> uniform(2, std::vector<double>(4, 0.25));
    const std::vector<std::vector<double>> wrong(1, std::vector<double>{1.0, 0.0});
    expect(fer_loss({{{0.0, 1.0, 0.0, 0.0}}}, {1}), 0.0, 1e-9);
    expect(fer_loss({{{0.25, 0.25, 0.25, 0.25}}}, {2}), ln4, 1e-9);
    expect(fer_loss({uniform, uniform}, {0, 3}), 2 * ln4, 1e-9);
    expect(fer_loss({wrong, wrong, wrong}, {1}), -3.0 * std::log(kProbClamp), 1e-9);
    expect(cls_loss(std::vector<double>{0.5}, std::vector<int>{1}), ln2, 1e-9);
    expect(cls_loss(std::vector<double>{1.0 - eps}, std::vector<int>{1}), eps, 1e-9);
    expect(seg_loss({{1.0, 0.0, 0.0, 1.0}}, {{1, 0, 0, 1}}), 0.0, 1e-6);
    expect(seg_loss({{0.5, 0.5, 0.5}}, {{1, 0, 1}}), ln2, 1e-9);
    expect(seg_loss({{0.5, 0.5}, {0.5, 0.5}}, {{0, 0}, {1, 1}}), ln2, 1e-9);
    expect(mani_loss(0, 0), 0.0, 1e-9);
    expect(mani_loss(0.6931, 0.6931), 1.3862, 1e-9);
    const int trivial_bad = bad;

    const double cls = cls_loss(std::vector<double>{0.9, 0.2}, std::vector<int>{1, 0});
    const double seg = seg_loss({{0.9, 0.1, 0.8, 0.3}}, {{1, 0, 1, 0}});
    expect(cls, 0.1642520, 1e-6);
    expect(seg, 0.1976349, 1e-6);
    report("A3", bad == 0,
           "loss examples: " + std::to_string(11 - trivial_bad) + "/11 exact at 1e-9; hand values cls " + fmt(cls, 8) +
               " seg " + fmt(seg, 8) + " at 1e-6");
}

void check_gradients() {
    const double fer = emd::test::fer_gradcheck_error();
    const double manip = emd::test::manip_gradcheck_error();
    report("A4", fer < 1e-4 && manip < 1e-4,
           "gradcheck max relative error, 50 probes: expression " + fmt(fer, 3) + ", manipulation " + fmt(manip, 3) +
               " (< 1e-4)");
}

void check_selection() {
    const auto r = emd::test::selection_oracle_run(1000, 2024);
    report("A5", r.detect == 0 && r.mode == 0 && r.pool == 0,
           "selection oracles on 1000 ensembles (" + std::to_string(r.tie_cases) + " with ties): mismatches detect " +
               std::to_string(r.detect) + ", vote " + std::to_string(r.mode) + ", pool " + std::to_string(r.pool));
}

void check_auc() {
    const double gap = emd::test::auc_duality_gap(100, 41);
    report("A6", gap <= 1e-9, "trapezoid AUC vs Mann-Whitney on 100 sets: max gap " + fmt(gap, 3) + " (<= 1e-9)");
}

FerConfig small_fer() {
    FerConfig c;
    c.branches = 2;
    c.trunk_channels = 8;
    c.branch_channels = 8;
    c.feature_channels = 8;
    c.input_size = 32;
    return c;
}

ManipConfig small_manip() {
    ManipConfig c;
    c.input_size = 32;
    c.encoder_channels = {8, 8, 16};
    c.fer_feature_channels = 8;
    c.spp_rates = {1, 2};
    c.decoder_channels = 8;
    return c;
}

void check_freeze(const Corpora& c) {
    TrainConfig t;
    t.batch_size = 8;
    t.fer_epochs = 2;
    t.epochs_frozen_head = 1;
    t.epochs = 1;
    t.val_fraction = 0.25;
    const FerTrainResult fer = train_fer(c.expression_train, c.expression_test, small_fer(), t);
    const ParamSet<float> copy = fer.model.params;
    const std::uint64_t hash = fer.model.params.fingerprint();
    train_manip(c.manipulation_train, c.manipulation_test, &fer.model, small_manip(), t);
    const bool frozen = fer.model.params == copy && fer.model.params.fingerprint() == hash;

    ManipConfig mc = small_manip();
    mc.fusion = FusionMode::without_fer;
    const FerModel other = init_fer(small_fer(), 99);
    const ManipTrainResult a = train_manip(c.manipulation_train, c.manipulation_test, &fer.model, mc, t);
    const ManipTrainResult b = train_manip(c.manipulation_train, c.manipulation_test, &other, mc, t);
    bool same = a.model.params == b.model.params && a.report.epochs.size() == b.report.epochs.size();
    for (std::size_t i = 0; same && i < a.report.epochs.size(); ++i) {
        same = a.report.epochs[i].train_loss == b.report.epochs[i].train_loss;
    }
    report("A7", frozen && same,
           std::string("expression weights ") + (frozen ? "byte-identical" : "CHANGED") +
               " after phase two; without_fer trajectories " + (same ? "identical" : "DIFFER") +
               " under two expression networks");
}

void check_masks() {
    const auto r = emd::test::mask_exactness_run(200);
    report("A9", r.violations == 0 && r.manipulated == 200,
           "mask exactness on 200 manipulated samples: " + std::to_string(r.violations) +
               " pixels changed outside the mask at 2/255");
}

void check_overfit(const Corpora& c) {
    FerConfig fc;
    fc.input_size = 32;
    const OverfitResult f =
        overfit_fer(std::span(c.expression_train.expression.data(), 8), fc, TrainConfig{}, 100);
    ManipConfig mc;
    mc.input_size = 32;
    mc.decoder_channels = 64;
    mc.fusion = FusionMode::without_fer;
    const OverfitResult m =
        overfit_manip(std::span(c.manipulation_train.manipulation.data(), 8), nullptr, mc, TrainConfig{}, 150);
    const double rf = f.final_loss / f.initial_loss, rm = m.final_loss / m.initial_loss;
    report("A10", rf < 0.1 && rm < 0.1,
           "one-batch overfit: expression " + fmt(f.initial_loss, 4) + " -> " + fmt(f.final_loss, 4) + " (" +
               fmt(100 * rf, 3) + "% in 100 steps), manipulation " + fmt(m.initial_loss, 4) + " -> " +
               fmt(m.final_loss, 4) + " (" + fmt(100 * rm, 3) + "% in 150 steps)");
}

double metric(const nlohmann::json& r, const char* key) { return r.at(key).get<double>(); }

}  // namespace

int main() {
    set_thread_count(1);
    std::cout << "acceptance criteria\n";
    check_losses();
    check_gradients();
    check_selection();
    check_auc();
    check_masks();
    const Corpora small = generate_corpora(emd::test::tiny_synth(32));
    check_freeze(small);
    check_overfit(small);

    emd::test::ScratchDir work("acceptance");
    const Cli cli{work.path()};

    const RunOutcome a1 = with_fer_run(cli, work / "seed7", 7);
    if (!a1.ok) {
        report("A1", false, "pipeline step failed; see the log in " + (work / "seed7.log").string());
    } else {
        const double cls = metric(a1.report, "classification_accuracy");
        const double pix = metric(a1.report, "pixel_accuracy");
        report("A1", cls >= 0.95 && pix >= 0.90 && a1.seconds <= 900,
               "default pipeline seed 7: classification " + fmt(cls, 5) + " (>= 0.95), pixel " + fmt(pix, 5) +
                   " (>= 0.90), " + fmt(a1.seconds, 4) + " s (<= 900 s) on " +
                   std::to_string(std::thread::hardware_concurrency()) + " core(s)");

        // A pristine test frame from the trained model should score below one half.
        const auto manifest = read_json(work / "seed7" / "data" / "manip_test" / "manifest.json");
        for (const auto& s : manifest.at("samples")) {
            if (s.at("label") != 0) continue;
            const fs::path img = work / "seed7" / "data" / "manip_test" / s.at("image").get<std::string>();
            const auto [code, out] = cli.run("infer --image " + img.string() + " --ckpt " +
                                                 (work / "seed7" / "with").string() + " --mask-out " +
                                                 (work / "mask.png").string(),
                                             "infer.log");
            const double score = code == 0 && out.rfind("score=", 0) == 0 ? std::stod(out.substr(6)) : 1.0;
            std::cout << "     infer on pristine frame " << s.at("id").get<std::string>() << ": score=" << fmt(score)
                      << (score < 0.5 ? " (< 0.5)" : " (NOT below 0.5)") << std::endl;
            if (score >= 0.5) ++failures;
            break;
        }
    }

    const RunOutcome again = with_fer_run(cli, work / "seed7-repeat", 7);
    bool same = a1.ok && again.ok;
    if (same) {
        for (const char* k : {"classification_accuracy", "pixel_accuracy", "pixel_accuracy_macro"}) {
            same = same && a1.report.at(k) == again.report.at(k);
        }
        same = same && a1.report.at("roc") == again.report.at("roc") &&
               a1.report.at("segmentation_roc") == again.report.at("segmentation_roc") &&
               a1.report.at("samples") == again.report.at("samples");
    }
    report("A8", same,
           std::string("repeat of the seed 7 pipeline with one thread: report metrics ") +
               (same ? "identical" : "DIFFER"));

    double d_pix = 0, d_cls = 0;
    bool ran = a1.ok;
    std::ostringstream per_seed;
    for (int seed : {7, 8, 9}) {
        const fs::path dir = work / ("seed" + std::to_string(seed));
        const RunOutcome with = seed == 7 ? a1 : with_fer_run(cli, dir, seed);
        const RunOutcome without = with.ok ? without_fer_run(cli, dir, seed) : RunOutcome{};
        if (!with.ok || !without.ok) {
            ran = false;
            break;
        }
        const double wp = metric(with.report, "pixel_accuracy"), op = metric(without.report, "pixel_accuracy");
        const double wc = metric(with.report, "classification_accuracy");
        const double oc = metric(without.report, "classification_accuracy");
        d_pix += (wp - op) / 3;
        d_cls += (wc - oc) / 3;
        per_seed << " seed " << seed << ": pixel " << fmt(wp, 5) << " vs " << fmt(op, 5) << ", cls " << fmt(wc, 4)
                 << " vs " << fmt(oc, 4) << ";";
    }
    report("A2", ran && d_pix >= 0.01 && d_cls >= -0.01,
           ran ? "with minus without, mean of 3 seeds: pixel " + fmt(d_pix, 4) + " (>= 0.01), classification " +
                     fmt(d_cls, 4) + " (>= -0.01);" + per_seed.str()
               : std::string("a pipeline step failed"));

    std::cout << "\nsummary\n";
    for (const auto& [n, line] : summary) std::cout << line << '\n';
    std::cout << (failures ? std::to_string(failures) + " criterion check(s) failed" : "all criteria passed")
              << std::endl;
    return failures ? 1 : 0;
}
