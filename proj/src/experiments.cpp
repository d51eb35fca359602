#include "emd/experiments.hpp"

#include <fstream>
#include <map>

namespace emd {

void PipelineConfig::validate() const {
    synth.validate();
    fer.validate();
    manip.validate();
    train.validate();
    if (fer.input_size != synth.image_size || manip.input_size != synth.image_size) {
        throw ConfigError("fer and manip input_size must equal image_size (" + std::to_string(synth.image_size) + ")");
    }
    if (fer.class_count != synth.class_count) throw ConfigError("fer class_count must equal the corpus class_count");
    if (manip.fusion == FusionMode::with_fer && manip.fer_feature_channels != fer.feature_channels) {
        throw ConfigError("fer_feature_channels must equal the expression network's feature_channels");
    }
}

FerTrainResult train_fer_on(const Dataset& expression_train, const PipelineConfig& cfg,
                            const std::optional<std::filesystem::path>& checkpoint_dir, const ProgressFn& progress) {
    auto [train, val] = split_validation(expression_train, cfg.train.val_fraction, cfg.train.seed);
    return train_fer(train, val, cfg.fer, cfg.train, checkpoint_dir, progress);
}

ManipTrainResult train_manip_on(const Dataset& manipulation_train, const FerModel* fer, const PipelineConfig& cfg,
                                const std::optional<std::filesystem::path>& checkpoint_dir, const std::string& fer_ref,
                                const ProgressFn& progress) {
    auto [train, val] = split_validation(manipulation_train, cfg.train.val_fraction, cfg.train.seed);
    return train_manip(train, val, fer, cfg.manip, cfg.train, checkpoint_dir, fer_ref, progress);
}

PipelineResult run_pipeline(const Corpora& data, const PipelineConfig& cfg, const ProgressFn& progress) {
    cfg.validate();
    PipelineResult r;
    const bool with_fer = cfg.manip.fusion == FusionMode::with_fer;
    if (with_fer) r.fer = train_fer_on(data.expression_train, cfg, std::nullopt, progress);
    const FerModel* fer = with_fer ? &r.fer.model : nullptr;
    r.manip = train_manip_on(data.manipulation_train, fer, cfg, std::nullopt, "", progress);
    r.report = evaluate(r.manip.model, fer, data.manipulation_test, EvalOptions{1000000, cfg.train.seed});
    return r;
}

nlohmann::json SweepTable::to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"train_size", r.train_size}, {"cls_acc", r.cls_accuracy}, {"seg_acc", r.seg_accuracy}});
    }
    return {{"rows", out}};
}

void SweepTable::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "train_size,cls_acc,seg_acc\n";
    for (const auto& r : rows) out << r.train_size << ',' << r.cls_accuracy << ',' << r.seg_accuracy << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

SweepTable training_size_sweep(const PipelineConfig& cfg, const std::vector<int>& sizes, const ProgressFn& progress) {
    cfg.validate();
    if (sizes.empty()) throw PreconditionError("sweep: no sizes given");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 2) throw PreconditionError("sweep: sizes must be at least 2");
        if (i > 0 && sizes[i] < sizes[i - 1]) throw PreconditionError("sweep: sizes must be ascending");
    }
    const bool with_fer = cfg.manip.fusion == FusionMode::with_fer;
    const Dataset test = generate_manipulation_split(cfg.synth, Split::test, cfg.synth.n_manip_test);
    FerTrainResult fer;
    if (with_fer) {
        fer = train_fer_on(generate_expression_split(cfg.synth, Split::train, cfg.synth.n_expression_train), cfg,
                           std::nullopt, progress);
    }
    SweepTable table;
    for (int n : sizes) {
        PipelineConfig row_cfg = cfg;
        row_cfg.synth.n_manip_train = n;
        const Dataset train = generate_manipulation_split(row_cfg.synth, Split::train, n);
        const FerModel* f = with_fer ? &fer.model : nullptr;
        const ManipTrainResult m = train_manip_on(train, f, row_cfg, std::nullopt, "", progress);
        const EvalReport rep = evaluate(m.model, f, test, EvalOptions{1000000, cfg.train.seed});
        table.rows.push_back({n, rep.classification_accuracy, rep.pixel_accuracy});
    }
    return table;
}

std::string AblationVariant::label() const {
    if (fusion == FusionMode::without_fer) return "without_fer";
    return "with_fer:" + to_string(fer_variant);
}

AblationVariant parse_ablation_variant(const std::string& s) {
    if (s == "without_fer") return {FusionMode::without_fer, FerVariant::ensemble};
    const std::string prefix = "with_fer:";
    if (s == "with_fer") return {FusionMode::with_fer, FerVariant::ensemble};
    if (s.rfind(prefix, 0) == 0) return {FusionMode::with_fer, parse_fer_variant(s.substr(prefix.size()))};
    throw ConfigError("unknown ablation variant '" + s + "' (expected without_fer, with_fer:ensemble or with_fer:simple)");
}

nlohmann::json AblationTable::to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"variant", r.variant.label()},
                       {"fusion", to_string(r.variant.fusion)},
                       {"fer_variant", r.variant.fusion == FusionMode::with_fer
                                           ? nlohmann::json(to_string(r.variant.fer_variant))
                                           : nlohmann::json(nullptr)},
                       {"cls_acc", r.cls_accuracy},
                       {"seg_acc", r.seg_accuracy}});
    }
    return {{"rows", out}};
}

void AblationTable::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "variant,cls_acc,seg_acc\n";
    for (const auto& r : rows) out << r.variant.label() << ',' << r.cls_accuracy << ',' << r.seg_accuracy << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

AblationTable ablation_compare(const Corpora& data, const std::vector<AblationVariant>& variants,
                               const PipelineConfig& cfg, const ProgressFn& progress) {
    if (variants.size() < 2) throw PreconditionError("ablation: at least two variants are required");
    // Expression networks are shared between variants that use the same architecture.
    std::map<FerVariant, FerModel> fers;
    AblationTable table;
    for (const auto& v : variants) {
        PipelineConfig vc = cfg;
        vc.manip.fusion = v.fusion;
        vc.fer.variant = v.fer_variant;
        vc.validate();
        const FerModel* fer = nullptr;
        if (v.fusion == FusionMode::with_fer) {
            auto it = fers.find(v.fer_variant);
            if (it == fers.end()) {
                it = fers.emplace(v.fer_variant, train_fer_on(data.expression_train, vc, std::nullopt, progress).model)
                         .first;
            }
            fer = &it->second;
        }
        const ManipTrainResult m = train_manip_on(data.manipulation_train, fer, vc, std::nullopt, "", progress);
        const EvalReport rep = evaluate(m.model, fer, data.manipulation_test, EvalOptions{1000000, cfg.train.seed});
        table.rows.push_back({v, rep.classification_accuracy, rep.pixel_accuracy});
    }
    return table;
}

}  // namespace emd
