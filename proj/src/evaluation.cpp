#include "emd/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "emd/rng.hpp"
#include "emd/training.hpp"

namespace emd {

double classification_accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.empty() || scores.size() != labels.size()) {
        throw PreconditionError("classification_accuracy: need equal, nonempty score and label lists");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) hits += ((scores[i] >= threshold ? 1 : 0) == labels[i]);
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

namespace {

std::pair<std::size_t, std::size_t> count_pixels(const Tensor<float>& s, const BinaryMask& m, double threshold) {
    const Shape sh = s.shape();
    if (sh.n != 1 || sh.c != 1 || sh.h != m.height || sh.w != m.width) {
        throw PreconditionError("pixel_accuracy: map " + sh.str() + " does not match mask " +
                                std::to_string(m.height) + "x" + std::to_string(m.width));
    }
    std::size_t hits = 0;
    for (std::size_t p = 0; p < m.values.size(); ++p) hits += ((s[p] >= threshold) == (m.values[p] != 0));
    return {hits, m.values.size()};
}

}  // namespace

double pixel_accuracy(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks,
                      double threshold) {
    if (segmentations.size() != masks.size() || masks.empty()) throw PreconditionError("pixel_accuracy: size mismatch");
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto [h, t] = count_pixels(segmentations[i], masks[i], threshold);
        hits += h;
        total += t;
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

double pixel_accuracy_macro(std::span<const Tensor<float>> segmentations, std::span<const BinaryMask> masks,
                            double threshold) {
    if (segmentations.size() != masks.size() || masks.empty()) throw PreconditionError("pixel_accuracy: size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto [h, t] = count_pixels(segmentations[i], masks[i], threshold);
        sum += t ? static_cast<double>(h) / static_cast<double>(t) : 0.0;
    }
    return sum / static_cast<double>(masks.size());
}

double trapezoid_auc(std::span<const RocPoint> points) {
    double area = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        area += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) * 0.5;
    }
    return area;
}

RocResult roc_and_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw PreconditionError("roc_and_auc: size mismatch");
    std::size_t pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw PreconditionError("roc_and_auc: labels must be 0 or 1");
        pos += static_cast<std::size_t>(l);
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw PreconditionError("roc_and_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocResult r;
    r.points.push_back({0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] ? tp : fp) += 1;
            ++i;
        }
        r.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
    }
    r.auc = trapezoid_auc(r.points);
    return r;
}

namespace {

nlohmann::json roc_json(const std::optional<RocResult>& roc) {
    if (!roc) return nullptr;
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : roc->points) pts.push_back({p.fpr, p.tpr});
    return {{"points", pts}, {"auc", roc->auc}};
}

void check_roc(const std::optional<RocResult>& roc, const std::string& what) {
    if (!roc) return;
    const auto& p = roc->points;
    if (p.size() < 2 || !(p.front() == RocPoint{0, 0}) || !(p.back() == RocPoint{1, 1})) {
        throw ValidationError(what + " ROC must run from (0,0) to (1,1)");
    }
    for (std::size_t i = 1; i < p.size(); ++i) {
        if (p[i].fpr < p[i - 1].fpr || p[i].tpr < p[i - 1].tpr) throw ValidationError(what + " ROC is not monotone");
    }
    if (std::abs(trapezoid_auc(p) - roc->auc) > 1e-9) throw ValidationError(what + " AUC disagrees with its ROC");
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& s : samples) {
        recs.push_back({{"id", s.id},
                        {"score", s.score},
                        {"predicted_label", s.predicted},
                        {"label", s.label},
                        {"pixel_accuracy", s.pixel_accuracy}});
    }
    return {{"classification_accuracy", classification_accuracy},
            {"pixel_accuracy", pixel_accuracy},
            {"pixel_accuracy_macro", pixel_accuracy_macro},
            {"roc", roc_json(cls_roc)},
            {"segmentation_roc", roc_json(seg_roc)},
            {"segmentation_roc_pooling", "per-pixel"},
            {"samples", recs},
            {"identifiers", identifiers}};
}

void EvalReport::validate() const {
    for (double v : {classification_accuracy, pixel_accuracy, pixel_accuracy_macro}) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("report rate outside [0, 1]");
    }
    for (const auto& s : samples) {
        if (!(s.score >= 0.0 && s.score <= 1.0) || !(s.pixel_accuracy >= 0.0 && s.pixel_accuracy <= 1.0)) {
            throw ValidationError("sample " + s.id + ": rate outside [0, 1]");
        }
    }
    check_roc(cls_roc, "classification");
    check_roc(seg_roc, "segmentation");
}

EvalReport evaluate(const ManipModel& model, const FerModel* fer, const Dataset& data, const EvalOptions& opts) {
    if (data.kind != DatasetKind::manipulation) throw PreconditionError("evaluate: need a manipulation dataset");
    if (data.manipulation.empty()) throw PreconditionError("evaluate: empty dataset");
    const auto& s = data.manipulation;
    const Tensor<float> ff = dataset_expression_features(data, fer, model.config);

    EvalReport rep;
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<Tensor<float>> maps;
    std::vector<BinaryMask> masks;
    constexpr std::size_t chunk = 64;
    for (std::size_t start = 0; start < s.size(); start += chunk) {
        const std::size_t end = std::min(s.size(), start + chunk);
        std::vector<const Tensor<float>*> imgs;
        std::vector<Tensor<float>> rows;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&s[i].image.pixels);
            rows.push_back(ff.sample(static_cast<int>(i)));
        }
        std::vector<const Tensor<float>*> fptr;
        for (const auto& r : rows) fptr.push_back(&r);
        const BatchPrediction pred = predict_batch(model, stack_batch(imgs), stack_batch(fptr));
        for (std::size_t i = start; i < end; ++i) {
            const int k = static_cast<int>(i - start);
            scores.push_back(pred.scores[k]);
            labels.push_back(s[i].label);
            maps.push_back(pred.segmentation.sample(k));
            masks.push_back(s[i].mask);
        }
    }

    rep.classification_accuracy = classification_accuracy(scores, labels);
    rep.pixel_accuracy = pixel_accuracy(maps, masks);
    rep.pixel_accuracy_macro = pixel_accuracy_macro(maps, masks);
    for (std::size_t i = 0; i < s.size(); ++i) {
        rep.samples.push_back({s[i].id, scores[i], scores[i] >= 0.5 ? 1 : 0, labels[i],
                               pixel_accuracy(std::span(&maps[i], 1), std::span(&masks[i], 1))});
    }
    const auto positives = std::count(labels.begin(), labels.end(), 1);
    if (positives > 0 && positives < static_cast<long>(labels.size())) rep.cls_roc = roc_and_auc(scores, labels);

    // Pooled per-pixel ROC; large sets are subsampled with a fixed seed.
    std::size_t total = 0;
    for (const auto& m : masks) total += m.values.size();
    std::vector<double> px_scores;
    std::vector<int> px_labels;
    auto take = [&](std::size_t flat) {
        std::size_t img = 0;
        while (flat >= masks[img].values.size()) flat -= masks[img++].values.size();
        px_scores.push_back(maps[img][flat]);
        px_labels.push_back(masks[img].values[flat] ? 1 : 0);
    };
    if (total <= opts.max_roc_pixels) {
        for (std::size_t i = 0; i < masks.size(); ++i) {
            for (std::size_t p = 0; p < masks[i].values.size(); ++p) {
                px_scores.push_back(maps[i][p]);
                px_labels.push_back(masks[i].values[p] ? 1 : 0);
            }
        }
    } else {
        Rng rng(opts.seed, "segmentation-roc");
        for (std::size_t k = 0; k < opts.max_roc_pixels; ++k) take(rng.below(total));
    }
    const auto ones = std::count(px_labels.begin(), px_labels.end(), 1);
    if (ones > 0 && ones < static_cast<long>(px_labels.size())) rep.seg_roc = roc_and_auc(px_scores, px_labels);
    return rep;
}

void write_roc_csv(const RocResult& roc, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "fpr,tpr\n";
    for (const auto& p : roc.points) out << p.fpr << ',' << p.tpr << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

void write_report(const EvalReport& report, const std::filesystem::path& report_path) {
    report.validate();
    if (report_path.has_parent_path()) std::filesystem::create_directories(report_path.parent_path());
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write " + report_path.string());
    out << report.to_json().dump(2) << '\n';
    if (!out) throw IoError("write failed: " + report_path.string());
    if (report.cls_roc) write_roc_csv(*report.cls_roc, report_path.parent_path() / "roc.csv");
}

}  // namespace emd
