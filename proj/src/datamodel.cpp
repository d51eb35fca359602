#include "emd/datamodel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "emd/errors.hpp"
#include "emd/image_io.hpp"
#include "emd/parallel.hpp"
#include "emd/rng.hpp"

namespace emd {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

std::string to_string(DatasetKind k) { return k == DatasetKind::expression ? "expression" : "manipulation"; }

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

DatasetKind parse_dataset_kind(const std::string& s) {
    if (s == "expression") return DatasetKind::expression;
    if (s == "manipulation") return DatasetKind::manipulation;
    throw FormatError("unknown dataset kind '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw FormatError("unknown split '" + s + "'");
}

namespace {

void check_image(const FaceImage& img, std::optional<int> image_size, std::vector<std::string>& out) {
    const Shape s = img.pixels.shape();
    if (s.n != 1 || s.c != 3 || s.h <= 0 || s.w <= 0) {
        out.push_back("image must be 3 x H x W with positive H, W");
        return;
    }
    if (image_size && (s.h != *image_size || s.w != *image_size)) {
        out.push_back("image size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " does not match configured " + std::to_string(*image_size));
    }
    bool non_finite = false, out_of_range = false;
    for (float v : img.pixels.vec()) {
        if (!std::isfinite(v)) non_finite = true;
        else if (v < 0.0f || v > 1.0f) out_of_range = true;
    }
    if (non_finite) out.push_back("non-finite pixel");
    if (out_of_range) out.push_back("pixel out of [0,1]");
}

}  // namespace

std::vector<std::string> validate_sample(const ManipulationSample& s, std::optional<int> image_size) {
    std::vector<std::string> out;
    if (s.id.empty()) out.push_back("empty id");
    check_image(s.image, image_size, out);
    if (s.mask.height != s.image.height() || s.mask.width != s.image.width() ||
        s.mask.values.size() != static_cast<std::size_t>(s.mask.height) * s.mask.width) {
        out.push_back("mask size does not match image");
    }
    if (std::any_of(s.mask.values.begin(), s.mask.values.end(), [](auto v) { return v > 1; })) {
        out.push_back("mask value not in {0,1}");
    }
    if (s.label != 0 && s.label != 1) {
        out.push_back("label must be 0 or 1");
    } else if (s.label == 1 && s.mask.empty_support()) {
        out.push_back("label=1 requires nonempty mask");
    } else if (s.label == 0 && !s.mask.empty_support()) {
        out.push_back("label=0 requires all-zero mask");
    }
    return out;
}

std::vector<std::string> validate_sample(const ExpressionSample& s, int class_count, std::optional<int> image_size) {
    std::vector<std::string> out;
    if (s.id.empty()) out.push_back("empty id");
    check_image(s.image, image_size, out);
    if (s.expression < 0 || s.expression >= class_count) {
        out.push_back("expression " + std::to_string(s.expression) + " out of range [0," +
                      std::to_string(class_count) + ")");
    }
    return out;
}

std::vector<std::string> validate_dataset(const Dataset& d) {
    std::vector<std::string> out;
    std::set<std::string> ids;
    std::optional<int> size;
    auto visit = [&](const std::string& id, const FaceImage& img, std::vector<std::string> errs) {
        if (!ids.insert(id).second) out.push_back(id + ": duplicate id");
        if (!size && img.height() > 0) size = img.height();
        if (img.height() != img.width() || (size && img.height() != *size)) {
            out.push_back(id + ": image size differs from the dataset's");
        }
        for (auto& e : errs) out.push_back(id + ": " + e);
    };
    if (d.kind == DatasetKind::expression) {
        if (!d.manipulation.empty()) out.push_back("expression dataset holds manipulation samples");
        if (d.class_count <= 0) out.push_back("class_count must be positive");
        for (const auto& s : d.expression) visit(s.id, s.image, validate_sample(s, d.class_count));
    } else {
        if (!d.expression.empty()) out.push_back("manipulation dataset holds expression samples");
        for (const auto& s : d.manipulation) visit(s.id, s.image, validate_sample(s));
    }
    return out;
}

FaceImage quantize_8bit(const FaceImage& img) {
    FaceImage out = img;
    for (float& v : out.pixels.vec()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
}

// ---------------------------------------------------------------- storage

namespace {

json read_manifest(const fs::path& root) {
    const fs::path path = root / "manifest.json";
    std::ifstream in(path);
    if (!in) throw FormatError("missing manifest: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
}

template <class F>
auto field(const json& j, const char* key, F&& convert) {
    try {
        return convert(j.at(key));
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest field '") + key + "': " + e.what());
    }
}

struct Entry {
    std::string id;
    std::string image;
    std::optional<std::string> mask;
    std::optional<int> label;
    std::optional<int> expression;
};

}  // namespace

Dataset load_dataset(const fs::path& root) {
    const json manifest = read_manifest(root);
    Dataset d;
    d.kind = parse_dataset_kind(field(manifest, "kind", [](const json& v) { return v.get<std::string>(); }));
    d.split = parse_split(field(manifest, "split", [](const json& v) { return v.get<std::string>(); }));
    if (d.kind == DatasetKind::expression) {
        d.class_count = field(manifest, "class_count", [](const json& v) { return v.get<int>(); });
    }
    std::vector<Entry> entries;
    for (const json& s : field(manifest, "samples", [](const json& v) { return v; })) {
        Entry e;
        e.id = field(s, "id", [](const json& v) { return v.get<std::string>(); });
        e.image = field(s, "image", [](const json& v) { return v.get<std::string>(); });
        if (s.contains("mask") && !s["mask"].is_null()) e.mask = s["mask"].get<std::string>();
        if (s.contains("label") && !s["label"].is_null()) e.label = s["label"].get<int>();
        if (s.contains("expression") && !s["expression"].is_null()) e.expression = s["expression"].get<int>();
        if (d.kind == DatasetKind::manipulation && (!e.mask || !e.label)) {
            throw FormatError("manipulation sample " + e.id + " needs mask and label");
        }
        if (d.kind == DatasetKind::expression && !e.expression) {
            throw FormatError("expression sample " + e.id + " needs an expression");
        }
        entries.push_back(std::move(e));
    }

    const std::size_t n = entries.size();
    std::vector<std::string> io_errors(n);
    if (d.kind == DatasetKind::expression) d.expression.resize(n);
    else d.manipulation.resize(n);
    parallel_for(n, [&](std::size_t i) {
        const Entry& e = entries[i];
        try {
            FaceImage img = to_face_image(read_png(root / e.image, 3));
            if (d.kind == DatasetKind::expression) {
                d.expression[i] = ExpressionSample{e.id, std::move(img), *e.expression};
            } else {
                BinaryMask mask;
                try {
                    mask = to_mask(read_png(root / *e.mask, 1));
                } catch (const ValidationError& v) {
                    io_errors[i] = std::string("V") + v.what();
                    return;
                }
                d.manipulation[i] = ManipulationSample{e.id, std::move(img), std::move(mask), *e.label};
            }
        } catch (const IoError& err) {
            io_errors[i] = std::string("I") + err.what();
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        if (!io_errors[i].empty() && io_errors[i][0] == 'I') {
            throw IoError("sample " + entries[i].id + ": " + io_errors[i].substr(1));
        }
    }
    std::vector<std::string> violations;
    for (std::size_t i = 0; i < n; ++i) {
        if (!io_errors[i].empty()) violations.push_back(entries[i].id + ": " + io_errors[i].substr(1));
    }
    if (violations.empty()) violations = validate_dataset(d);
    if (!violations.empty()) {
        std::string msg = "invalid dataset " + root.string() + ":";
        for (const auto& v : violations) msg += "\n  " + v;
        throw ValidationError(msg);
    }
    return d;
}

fs::path save_dataset(const Dataset& d, const fs::path& root) {
    auto violations = validate_dataset(d);
    if (!violations.empty()) throw ValidationError("refusing to save invalid dataset: " + violations.front());
    std::error_code ec;
    fs::create_directories(root / "images", ec);
    if (!ec && d.kind == DatasetKind::manipulation) fs::create_directories(root / "masks", ec);
    if (ec) throw IoError("cannot create dataset directory " + root.string() + ": " + ec.message());

    json samples = json::array();
    if (d.kind == DatasetKind::expression) {
        for (const auto& s : d.expression) {
            samples.push_back({{"id", s.id}, {"image", "images/" + s.id + ".png"}, {"mask", nullptr},
                               {"label", nullptr}, {"expression", s.expression}});
        }
    } else {
        for (const auto& s : d.manipulation) {
            samples.push_back({{"id", s.id}, {"image", "images/" + s.id + ".png"},
                               {"mask", "masks/" + s.id + ".png"}, {"label", s.label}, {"expression", nullptr}});
        }
    }
    parallel_for(d.size(), [&](std::size_t i) {
        if (d.kind == DatasetKind::expression) {
            const auto& s = d.expression[i];
            write_png(root / "images" / (s.id + ".png"), to_raw(s.image));
        } else {
            const auto& s = d.manipulation[i];
            write_png(root / "images" / (s.id + ".png"), to_raw(s.image));
            write_png(root / "masks" / (s.id + ".png"), to_raw(s.mask));
        }
    });
    json manifest = {{"kind", to_string(d.kind)},
                     {"class_count", d.kind == DatasetKind::expression ? json(d.class_count) : json(nullptr)},
                     {"split", to_string(d.split)},
                     {"samples", samples}};
    const fs::path path = root / "manifest.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("cannot write " + path.string());
    return path;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& d, double fraction, std::uint64_t seed) {
    const std::size_t n = d.size();
    std::size_t n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    if (fraction > 0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed, "validation-split");
    rng.shuffle(order);
    std::vector<bool> is_val(n, false);
    for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

    Dataset train = d, val = d;
    train.expression.clear();
    train.manipulation.clear();
    val.expression.clear();
    val.manipulation.clear();
    train.split = Split::train;
    val.split = Split::val;
    for (std::size_t i = 0; i < n; ++i) {
        Dataset& dst = is_val[i] ? val : train;
        if (d.kind == DatasetKind::expression) dst.expression.push_back(d.expression[i]);
        else dst.manipulation.push_back(d.manipulation[i]);
    }
    return {std::move(train), std::move(val)};
}

}  // namespace emd
