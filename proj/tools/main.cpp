// emd: command-line driver for data generation, training, evaluation,
// single-image inference and the sweep/ablation experiments.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "emd/checkpoint.hpp"
#include "emd/cli_config.hpp"
#include "emd/image_io.hpp"
#include "emd/parallel.hpp"

namespace fs = std::filesystem;
using namespace emd;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kRuntime = 4 };

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.path, "JSON config file with flat keys");
    cmd->add_option("--set", args.overrides, "Override a config key (key=value), repeatable");
}

PipelineConfig load_config(const ConfigArgs& args) {
    nlohmann::json j = args.path.empty() ? nlohmann::json::object() : read_config_file(args.path);
    for (const auto& o : args.overrides) apply_override(j, o);
    return pipeline_config_from_json(j);
}

/// A directory holding a manifest is used as-is; otherwise `sub` inside it.
Dataset load_split(const fs::path& dir, const std::string& sub) {
    if (fs::exists(dir / "manifest.json")) return load_dataset(dir);
    return load_dataset(dir / sub);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

ProgressFn stderr_progress() {
    return [](const std::string& phase, const EpochRecord& r) {
        std::ostringstream line;
        line << phase << " epoch " << r.epoch << ": loss " << r.train_loss << ", val acc " << r.val_accuracy;
        if (r.val_pixel_accuracy) line << ", val pixel acc " << *r.val_pixel_accuracy;
        std::cerr << line.str() << '\n';
    };
}

void check_expression_data(const Dataset& d, const PipelineConfig& cfg) {
    if (d.kind != DatasetKind::expression) throw ValidationError("expected an expression dataset");
    if (d.class_count != cfg.fer.class_count) {
        throw ConfigError("dataset has " + std::to_string(d.class_count) + " classes but class_count is " +
                          std::to_string(cfg.fer.class_count));
    }
}

void check_image_size(const Dataset& d, int size) {
    auto check = [size](const FaceImage& img, const std::string& id) {
        if (img.height() != size || img.width() != size) {
            throw ConfigError("sample " + id + " is " + std::to_string(img.height()) + "x" +
                              std::to_string(img.width()) + " but image_size is " + std::to_string(size));
        }
    };
    for (const auto& s : d.expression) check(s.image, s.id);
    for (const auto& s : d.manipulation) check(s.image, s.id);
}

std::optional<FerModel> fer_for(const ManipCheckpoint& ckpt) {
    if (ckpt.model.config.fusion == FusionMode::without_fer) return std::nullopt;
    if (ckpt.fer_checkpoint_ref.empty()) throw ConfigError("with_fer checkpoint has no expression checkpoint reference");
    return load_fer_checkpoint(ckpt.fer_checkpoint_ref);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Expression manipulation detection: synthetic data, two-phase training, evaluation"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (1 gives bitwise reproducible runs)")
        ->check(CLI::NonNegativeNumber);

    ConfigArgs gen_cfg, fer_cfg, train_cfg, sweep_cfg, ablate_cfg;
    std::string out, data, fer_ckpt, ckpt, report, image, mask_out, cam_out, sizes, variants;
    bool no_fer = false;

    auto* gen = app.add_subcommand("gen-data", "Write expression and manipulation train/test datasets");
    add_config_options(gen, gen_cfg);
    gen->add_option("--out", out, "Output directory")->required();

    auto* tfer = app.add_subcommand("train-fer", "Train the expression network (phase 1)");
    add_config_options(tfer, fer_cfg);
    tfer->add_option("--data", data, "Data directory")->required();
    tfer->add_option("--out", out, "Checkpoint directory")->required();

    auto* train = app.add_subcommand("train", "Train the manipulation network with the expression network frozen");
    add_config_options(train, train_cfg);
    train->add_option("--data", data, "Data directory")->required();
    train->add_option("--fer", fer_ckpt, "Expression checkpoint directory");
    train->add_option("--out", out, "Checkpoint directory")->required();
    train->add_flag("--no-fer", no_fer, "Ablation without expression features");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manipulation test set");
    eval->add_option("--data", data, "Data directory")->required();
    eval->add_option("--ckpt", ckpt, "Manipulation checkpoint directory")->required();
    eval->add_option("--report", report, "Report path (roc.csv is written beside it)")->required();

    auto* infer = app.add_subcommand("infer", "Score one image and write its mask and CAM");
    infer->add_option("--image", image, "Input PNG")->required();
    infer->add_option("--ckpt", ckpt, "Manipulation checkpoint directory")->required();
    infer->add_option("--mask-out", mask_out, "Predicted mask PNG")->required();
    infer->add_option("--cam-out", cam_out, "Class activation map PNG");

    auto* sweep = app.add_subcommand("sweep", "Accuracy versus manipulation training-set size");
    add_config_options(sweep, sweep_cfg);
    sweep->add_option("--sizes", sizes, "Comma-separated ascending sizes")->required();
    sweep->add_option("--out", out, "Output directory")->required();

    auto* ablate = app.add_subcommand("ablate", "Compare fusion and expression-network variants");
    add_config_options(ablate, ablate_cfg);
    ablate->add_option("--data", data, "Data directory")->required();
    ablate->add_option("--variants", variants, "Comma-separated: with_fer:ensemble, with_fer:simple, without_fer")
        ->default_val("with_fer:ensemble,with_fer:simple,without_fer");
    ablate->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }
    if (threads > 0) set_thread_count(threads);

    try {
        if (gen->parsed()) {
            const PipelineConfig cfg = load_config(gen_cfg);
            const Corpora c = generate_corpora(cfg.synth);
            save_dataset(c.expression_train, fs::path(out) / "expr_train");
            save_dataset(c.expression_test, fs::path(out) / "expr_test");
            save_dataset(c.manipulation_train, fs::path(out) / "manip_train");
            save_dataset(c.manipulation_test, fs::path(out) / "manip_test");
        } else if (tfer->parsed()) {
            const PipelineConfig cfg = load_config(fer_cfg);
            const Dataset d = load_split(data, "expr_train");
            check_expression_data(d, cfg);
            check_image_size(d, cfg.synth.image_size);
            const FerTrainResult r = train_fer_on(d, cfg, fs::path(out), stderr_progress());
            write_json(fs::path(out) / "train_report.json", r.report.to_json());
        } else if (train->parsed()) {
            PipelineConfig cfg = load_config(train_cfg);
            if (no_fer) cfg.manip.fusion = FusionMode::without_fer;
            const Dataset d = load_split(data, "manip_train");
            if (d.kind != DatasetKind::manipulation) throw ValidationError("expected a manipulation dataset");
            check_image_size(d, cfg.synth.image_size);
            std::optional<FerModel> fer;
            std::string ref;
            if (cfg.manip.fusion == FusionMode::with_fer) {
                if (fer_ckpt.empty()) throw ConfigError("--fer is required unless --no-fer is given");
                fer = load_fer_checkpoint(fer_ckpt);
                cfg.manip.fer_feature_channels = fer->config.feature_channels;
                ref = fs::absolute(fer_ckpt).lexically_normal().string();
            }
            const ManipTrainResult r =
                train_manip_on(d, fer ? &*fer : nullptr, cfg, fs::path(out), ref, stderr_progress());
            write_json(fs::path(out) / "train_report.json", r.report.to_json());
        } else if (eval->parsed()) {
            const ManipCheckpoint c = load_manip_checkpoint(ckpt);
            const std::optional<FerModel> fer = fer_for(c);
            const Dataset d = load_split(data, "manip_test");
            if (d.kind != DatasetKind::manipulation) throw ValidationError("expected a manipulation dataset");
            check_image_size(d, c.model.config.input_size);
            EvalReport rep = evaluate(c.model, fer ? &*fer : nullptr, d);
            rep.identifiers = {{"checkpoint", ckpt},
                               {"fer_checkpoint", c.fer_checkpoint_ref},
                               {"fusion", to_string(c.model.config.fusion)},
                               {"params_fingerprint", c.model.params.fingerprint()},
                               {"epoch", c.epoch},
                               {"data", data}};
            write_report(rep, report);
        } else if (infer->parsed()) {
            const ManipCheckpoint c = load_manip_checkpoint(ckpt);
            const std::optional<FerModel> fer = fer_for(c);
            if (!cam_out.empty() && !fer) throw ConfigError("--cam-out needs a with_fer checkpoint");
            const FaceImage img = to_face_image(read_png(image, 3));
            if (img.height() != c.model.config.input_size || img.width() != c.model.config.input_size) {
                throw ValidationError("image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                                      ", model expects " + std::to_string(c.model.config.input_size));
            }
            const ManipOutput o = forward(c.model, fer ? &*fer : nullptr, img);
            Tensor<float> mask = o.segmentation;
            for (float& v : mask.vec()) v = v >= 0.5f ? 1.0f : 0.0f;
            write_png(mask_out, gray_to_raw(mask));
            if (!cam_out.empty()) {
                const auto outputs = fer_forward(*fer, img);
                const int cls = frequent_class(detect_branch_classes(outputs));
                write_png(cam_out, gray_to_raw(compute_cam(*fer, img, cls)));
            }
            std::printf("score=%.9g\n", o.score);
        } else if (sweep->parsed()) {
            const PipelineConfig cfg = load_config(sweep_cfg);
            std::vector<int> ns;
            for (const auto& s : split_list(sizes)) {
                try {
                    ns.push_back(std::stoi(s));
                } catch (const std::exception&) {
                    throw ConfigError("--sizes: '" + s + "' is not an integer");
                }
            }
            const SweepTable t = training_size_sweep(cfg, ns, stderr_progress());
            write_json(fs::path(out) / "sweep.json", t.to_json());
            t.write_csv(fs::path(out) / "sweep.csv");
        } else if (ablate->parsed()) {
            const PipelineConfig cfg = load_config(ablate_cfg);
            Corpora c;
            c.expression_train = load_split(data, "expr_train");
            c.manipulation_train = load_dataset(fs::path(data) / "manip_train");
            c.manipulation_test = load_dataset(fs::path(data) / "manip_test");
            check_expression_data(c.expression_train, cfg);
            std::vector<AblationVariant> vs;
            for (const auto& s : split_list(variants)) vs.push_back(parse_ablation_variant(s));
            const AblationTable t = ablation_compare(c, vs, cfg, stderr_progress());
            write_json(fs::path(out) / "ablation.json", t.to_json());
            t.write_csv(fs::path(out) / "ablation.csv");
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const ValidationError& e) {
        std::cerr << "data validation error: " << e.what() << '\n';
        return kData;
    } catch (const FormatError& e) {
        std::cerr << "data format error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kOk;
}
