#include "emd/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "emd/errors.hpp"
#include "emd/parallel.hpp"

namespace emd {

namespace {

// Fixed layout relative to the face center.
constexpr double kEyeOffsetY = -0.10;
constexpr double kBrowOffsetY = -0.07;
constexpr double kBrowHalfLength = 0.055;
constexpr double kBrowHalfThickness = 0.014;
constexpr double kMouthOffsetY = 0.20;
constexpr double kMouthCurveScale = 0.05;
constexpr double kMouthOpenScale = 0.035;
constexpr double kLipHalfThickness = 0.011;
constexpr double kBoxMargin = 0.06;

struct Box {
    double u0, v0, u1, v1;
    bool contains(double u, double v) const { return u >= u0 && u <= u1 && v >= v0 && v <= v1; }
    Box hull(const Box& o) const {
        return {std::min(u0, o.u0), std::min(v0, o.v0), std::max(u1, o.u1), std::max(v1, o.v1)};
    }
};

double eye_y(const FaceSpec& s) { return s.face_cy + kEyeOffsetY; }
double mouth_y(const FaceSpec& s) { return s.face_cy + kMouthOffsetY; }

struct BrowSegment {
    double u0, v0, u1, v1;
};

/// side = -1 for the left brow, +1 for the right one.
BrowSegment brow(const FaceSpec& s, int side) {
    const double bu = s.face_cx + side * s.eye_dx;
    const double bv = eye_y(s) + kBrowOffsetY - s.expression.brow_raise;
    const double a = s.expression.brow_angle;
    const double du = kBrowHalfLength * std::cos(a);
    const double dv = kBrowHalfLength * std::sin(a);
    // Inner end (towards the face center) moves up for positive angles.
    const double inner_u = bu - side * du, inner_v = bv - dv;
    const double outer_u = bu + side * du, outer_v = bv + dv;
    return {inner_u, inner_v, outer_u, outer_v};
}

double segment_distance(double u, double v, const BrowSegment& s) {
    const double du = s.u1 - s.u0, dv = s.v1 - s.v0;
    const double len2 = du * du + dv * dv;
    double t = len2 > 0 ? ((u - s.u0) * du + (v - s.v0) * dv) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(u - (s.u0 + t * du), v - (s.v0 + t * dv));
}

Box brow_box(const FaceSpec& s, int side) {
    const BrowSegment b = brow(s, side);
    const double pad = kBrowHalfThickness + kBoxMargin;
    return {std::min(b.u0, b.u1) - pad, std::min(b.v0, b.v1) - pad, std::max(b.u0, b.u1) + pad,
            std::max(b.v0, b.v1) + pad};
}

Box mouth_box(const FaceSpec& s) {
    const double half_h = 0.5 * kMouthCurveScale * std::abs(s.expression.mouth_curve) +
                          kMouthOpenScale * s.expression.mouth_open + kLipHalfThickness + kBoxMargin;
    const double half_w = s.mouth_half_width + kLipHalfThickness + kBoxMargin;
    return {s.face_cx - half_w, mouth_y(s) - half_h, s.face_cx + half_w, mouth_y(s) + half_h};
}

Rgb scale(const Rgb& c, float k) { return {c.r * k, c.g * k, c.b * k}; }

Rgb shade(const FaceSpec& s, double u, double v) {
    Rgb color = scale(s.background, static_cast<float>(0.85 + 0.3 * v));
    const double fu = (u - s.face_cx) / s.face_rx, fv = (v - s.face_cy) / s.face_ry;
    const double r2 = fu * fu + fv * fv;
    if (r2 > 1.0) return color;
    color = scale(s.skin, static_cast<float>(1.0 - 0.12 * r2));

    // Eyes.
    for (int side : {-1, 1}) {
        const double eu = (u - (s.face_cx + side * s.eye_dx)) / s.eye_r;
        const double ev = (v - eye_y(s)) / s.eye_r;
        if ((eu / 1.6) * (eu / 1.6) + ev * ev <= 1.0) {
            color = (eu * eu + ev * ev <= 0.75 * 0.75) ? Rgb{0.15f, 0.1f, 0.08f} : Rgb{0.95f, 0.95f, 0.93f};
        }
    }
    // Brows.
    for (int side : {-1, 1}) {
        if (segment_distance(u, v, brow(s, side)) <= kBrowHalfThickness) color = s.hair;
    }
    // Nose.
    const BrowSegment nose{s.face_cx, eye_y(s) + 0.05, s.face_cx, mouth_y(s) - 0.09};
    if (segment_distance(u, v, nose) <= 0.008) color = scale(s.skin, 0.78f);

    // Mouth: parabolic centerline, lips separated by the opening.
    const double t = (u - s.face_cx) / s.mouth_half_width;
    if (std::abs(t) <= 1.0) {
        const double center = mouth_y(s) - s.expression.mouth_curve * kMouthCurveScale * (t * t - 0.5);
        const double gap = s.expression.mouth_open * kMouthOpenScale * (1.0 - t * t);
        const double upper = center - gap, lower = center + gap;
        if (v > upper && v < lower) color = Rgb{0.25f, 0.05f, 0.05f};
        if (std::abs(v - upper) <= kLipHalfThickness || std::abs(v - lower) <= kLipHalfThickness) color = s.lips;
    }
    return color;
}

Rgb random_color(Rng& rng, double lo, double hi) {
    return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
            static_cast<float>(rng.uniform(lo, hi))};
}

FaceImage blur3(const FaceImage& img) {
    FaceImage out = img;
    const int h = img.height(), w = img.width();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float s = 0;
                int n = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        s += img.at(c, yy, xx);
                        ++n;
                    }
                out.at(c, y, x) = s / static_cast<float>(n);
            }
    return out;
}

// Standard JPEG (ITU T.81 Annex K) quantization tables.
constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr std::array<int, 64> kChromaTable = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99,
    99, 99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

std::array<double, 64> scaled_table(const std::array<int, 64>& base, int quality) {
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> out{};
    for (int i = 0; i < 64; ++i) out[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
    return out;
}

const std::array<double, 64>& dct_basis() {
    static const std::array<double, 64> basis = [] {
        std::array<double, 64> b{};
        for (int k = 0; k < 8; ++k)
            for (int n = 0; n < 8; ++n) {
                const double a = k == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8);
                b[k * 8 + n] = a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
            }
        return b;
    }();
    return basis;
}

void quantize_block(std::array<double, 64>& block, const std::array<double, 64>& table) {
    const auto& b = dct_basis();
    std::array<double, 64> tmp{}, coef{};
    // coef = B * X * B^T
    for (int k = 0; k < 8; ++k)
        for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int n = 0; n < 8; ++n) s += b[k * 8 + n] * block[n * 8 + x];
            tmp[k * 8 + x] = s;
        }
    for (int k = 0; k < 8; ++k)
        for (int l = 0; l < 8; ++l) {
            double s = 0;
            for (int x = 0; x < 8; ++x) s += tmp[k * 8 + x] * b[l * 8 + x];
            coef[k * 8 + l] = std::round(s / table[k * 8 + l]) * table[k * 8 + l];
        }
    // X = B^T * coef * B
    for (int n = 0; n < 8; ++n)
        for (int l = 0; l < 8; ++l) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += b[k * 8 + n] * coef[k * 8 + l];
            tmp[n * 8 + l] = s;
        }
    for (int n = 0; n < 8; ++n)
        for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int l = 0; l < 8; ++l) s += tmp[n * 8 + l] * b[l * 8 + x];
            block[n * 8 + x] = s;
        }
}

}  // namespace

ExpressionParams expression_prototype(int cls) {
    static constexpr std::array<ExpressionParams, kMaxExpressionClasses> kPrototypes = {{
        {0.0, 0.0, 0.0, 0.0},      // neutral
        {0.9, 0.25, 0.0, 0.01},    // happy
        {-0.8, 0.0, 0.4, 0.0},     // sad
        {0.0, 0.95, 0.0, 0.05},    // surprise
        {-0.3, 0.0, -0.45, -0.02}, // angry
        {-0.2, 0.5, 0.35, 0.04},   // fear
        {-0.5, 0.2, -0.25, -0.01}, // disgust
        {0.4, 0.0, -0.15, 0.0},    // contempt
    }};
    if (cls < 0 || cls >= kMaxExpressionClasses) {
        throw PreconditionError("expression class " + std::to_string(cls) + " has no prototype");
    }
    return kPrototypes[cls];
}

ExpressionParams sample_expression(int cls, Rng& rng) {
    ExpressionParams p = expression_prototype(cls);
    p.mouth_curve *= rng.uniform(0.8, 1.2);
    p.mouth_open *= rng.uniform(0.8, 1.2);
    p.brow_angle *= rng.uniform(0.8, 1.2);
    p.brow_raise *= rng.uniform(0.8, 1.2);
    return p;
}

FaceSpec sample_face(int cls, Rng& rng) {
    FaceSpec s;
    s.face_cx = rng.uniform(0.47, 0.53);
    s.face_cy = rng.uniform(0.49, 0.55);
    s.face_rx = rng.uniform(0.30, 0.36);
    s.face_ry = rng.uniform(0.38, 0.44);
    s.eye_dx = rng.uniform(0.12, 0.15);
    s.eye_r = rng.uniform(0.035, 0.045);
    s.mouth_half_width = rng.uniform(0.10, 0.14);
    const double tone = rng.uniform(0.45, 0.95);
    s.skin = {static_cast<float>(tone), static_cast<float>(tone * rng.uniform(0.72, 0.85)),
              static_cast<float>(tone * rng.uniform(0.6, 0.75))};
    s.background = random_color(rng, 0.1, 0.9);
    s.hair = random_color(rng, 0.05, 0.3);
    s.lips = {static_cast<float>(rng.uniform(0.5, 0.75)), static_cast<float>(rng.uniform(0.2, 0.35)),
              static_cast<float>(rng.uniform(0.2, 0.35))};
    s.expression_class = cls;
    s.expression = sample_expression(cls, rng);
    return s;
}

FaceImage render_face(const FaceSpec& spec, int size) {
    if (size <= 0) throw PreconditionError("render_face: size must be positive");
    FaceImage img(size);
    const double inv = 1.0 / size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float r = 0, g = 0, b = 0;
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx) {
                    const Rgb c = shade(spec, (x + 0.25 + 0.5 * sx) * inv, (y + 0.25 + 0.5 * sy) * inv);
                    r += c.r;
                    g += c.g;
                    b += c.b;
                }
            img.at(0, y, x) = std::clamp(0.25f * r, 0.0f, 1.0f);
            img.at(1, y, x) = std::clamp(0.25f * g, 0.0f, 1.0f);
            img.at(2, y, x) = std::clamp(0.25f * b, 0.0f, 1.0f);
        }
    return img;
}

FaceImage add_sensor_noise(const FaceImage& img, double sigma, Rng& rng) {
    FaceImage out = img;
    for (float& v : out.pixels.vec()) v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
    return out;
}

FaceImage degrade_quality(const FaceImage& img, int quality) {
    if (quality < 1 || quality > 100) throw PreconditionError("quality must be in [1,100]");
    if (quality == 100) return img;
    const int h = img.height(), w = img.width();
    const auto luma = scaled_table(kLumaTable, quality);
    const auto chroma = scaled_table(kChromaTable, quality);
    std::array<std::vector<double>, 3> planes;
    for (auto& p : planes) p.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double r = 255.0 * img.at(0, y, x), g = 255.0 * img.at(1, y, x), b = 255.0 * img.at(2, y, x);
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    for (int p = 0; p < 3; ++p) {
        const auto& table = p == 0 ? luma : chroma;
        for (int by = 0; by < h; by += 8)
            for (int bx = 0; bx < w; bx += 8) {
                std::array<double, 64> block{};
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) {
                        const int yy = std::min(by + y, h - 1), xx = std::min(bx + x, w - 1);
                        block[y * 8 + x] = planes[p][static_cast<std::size_t>(yy) * w + xx];
                    }
                quantize_block(block, table);
                for (int y = 0; y < 8 && by + y < h; ++y)
                    for (int x = 0; x < 8 && bx + x < w; ++x)
                        planes[p][static_cast<std::size_t>(by + y) * w + bx + x] = block[y * 8 + x];
            }
    }
    FaceImage out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const double Y = planes[0][i] + 128.0, cb = planes[1][i], cr = planes[2][i];
            const double rgb[3] = {Y + 1.402 * cr, Y - 0.344136 * cb - 0.714136 * cr, Y + 1.772 * cb};
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>(std::clamp(rgb[c] / 255.0, 0.0, 1.0));
        }
    return out;
}

Manipulation apply_expression_manipulation(const FaceImage& target, const FaceSpec& target_spec,
                                           const FaceSpec& donor_spec, Rng& rng, const ManipulationOptions& opts) {
    if (!opts.allow_same_class && donor_spec.expression_class == target_spec.expression_class) {
        throw PreconditionError("donor and target share expression class " +
                                std::to_string(target_spec.expression_class));
    }
    const int h = target.height(), w = target.width();
    Manipulation result;
    result.region = opts.region ? *opts.region : (rng.bernoulli(0.5) ? EditRegion::mouth : EditRegion::mouth_and_brows);

    FaceSpec edited = target_spec;
    std::vector<Box> boxes;
    const ExpressionParams& te = target_spec.expression;
    const ExpressionParams& de = donor_spec.expression;
    if (te.mouth_curve != de.mouth_curve || te.mouth_open != de.mouth_open) {
        edited.expression.mouth_curve = de.mouth_curve;
        edited.expression.mouth_open = de.mouth_open;
        boxes.push_back(mouth_box(target_spec).hull(mouth_box(edited)));
    }
    if (result.region == EditRegion::mouth_and_brows &&
        (te.brow_angle != de.brow_angle || te.brow_raise != de.brow_raise)) {
        edited.expression.brow_angle = de.brow_angle;
        edited.expression.brow_raise = de.brow_raise;
        for (int side : {-1, 1}) boxes.push_back(brow_box(target_spec, side).hull(brow_box(edited, side)));
    }
    edited.expression_class = donor_spec.expression_class;

    result.mask = BinaryMask(h, w);
    result.image = target;
    if (boxes.empty()) return result;

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = (x + 0.5) / w, v = (y + 0.5) / h;
            for (const Box& b : boxes) {
                if (b.contains(u, v)) {
                    result.mask.at(y, x) = 1;
                    break;
                }
            }
        }

    // Re-rendered content carries its own blending trace: softer edges, a gain
    // mismatch and weaker noise than the surrounding frame.
    const FaceImage clean = render_face(edited, h);
    const FaceImage blurred = blur3(clean);
    FaceImage patch(h, w);
    std::array<float, 3> gain{};
    for (float& g : gain) {
        const double magnitude = rng.uniform(0.5 * opts.color_shift, opts.color_shift);
        g = static_cast<float>(1.0 + (rng.bernoulli(0.5) ? magnitude : -magnitude));
    }
    const float mix = static_cast<float>(opts.edit_blur);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                patch.at(c, y, x) = gain[c] * ((1 - mix) * clean.at(c, y, x) + mix * blurred.at(c, y, x));
    patch = quantize_8bit(degrade_quality(add_sensor_noise(patch, opts.edit_noise, rng), opts.quality));

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (result.mask.at(y, x)) result.image.at(c, y, x) = patch.at(c, y, x);
    return result;
}

void SynthConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
    if (image_size < 16 || image_size % 8 != 0) fail("image_size must be a multiple of 8 and at least 16");
    if (class_count < 2 || class_count > kMaxExpressionClasses) fail("class_count must be in [2, 8]");
    if (n_expression_train <= 0 || n_expression_test <= 0 || n_manip_train <= 0 || n_manip_test <= 0) {
        fail("sample counts must be positive");
    }
    if (!(manip_fraction > 0.0 && manip_fraction < 1.0)) fail("manip_fraction must be in (0,1)");
    if (quality < 1 || quality > 100) fail("quality must be in [1,100]");
}

namespace {

std::string sample_id(const char* kind, Split split, int i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s-%s-%05d", kind, to_string(split).c_str(), i);
    return buf;
}

FaceImage observed_frame(const FaceSpec& spec, const SynthConfig& config, Rng& rng, double noise) {
    return quantize_8bit(
        degrade_quality(add_sensor_noise(render_face(spec, config.image_size), noise, rng), config.quality));
}

}  // namespace

Dataset generate_expression_split(const SynthConfig& config, Split split, int count) {
    config.validate();
    Dataset d;
    d.kind = DatasetKind::expression;
    d.split = split;
    d.class_count = config.class_count;
    std::vector<int> classes(count);
    for (int i = 0; i < count; ++i) classes[i] = i % config.class_count;
    Rng order(config.seed, "expression-order-" + to_string(split));
    order.shuffle(classes);
    d.expression.resize(count);
    const ManipulationOptions defaults;
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        const std::string id = sample_id("expr", split, static_cast<int>(i));
        Rng rng(config.seed, id);
        const FaceSpec spec = sample_face(classes[i], rng);
        d.expression[i] = ExpressionSample{id, observed_frame(spec, config, rng, defaults.sensor_noise), classes[i]};
    });
    return d;
}

Dataset generate_manipulation_split(const SynthConfig& config, Split split, int count) {
    config.validate();
    Dataset d;
    d.kind = DatasetKind::manipulation;
    d.split = split;
    const int n_manip = static_cast<int>(std::lround(config.manip_fraction * count));
    std::vector<int> labels(count, 0);
    std::fill(labels.begin(), labels.begin() + n_manip, 1);
    Rng order(config.seed, "manipulation-order-" + to_string(split));
    order.shuffle(labels);
    d.manipulation.resize(count);
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        const std::string id = sample_id("manip", split, static_cast<int>(i));
        Rng rng(config.seed, id);
        const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.class_count)));
        const FaceSpec target = sample_face(cls, rng);
        ManipulationOptions opts;
        opts.quality = config.quality;
        const FaceImage frame = observed_frame(target, config, rng, opts.sensor_noise);
        ManipulationSample s{id, frame, BinaryMask(config.image_size, config.image_size), labels[i]};
        if (labels[i] == 1) {
            FaceSpec donor = target;
            donor.expression_class =
                (cls + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.class_count - 1)))) %
                config.class_count;
            donor.expression = sample_expression(donor.expression_class, rng);
            Manipulation m = apply_expression_manipulation(frame, target, donor, rng, opts);
            s.image = std::move(m.image);
            s.mask = std::move(m.mask);
        }
        d.manipulation[i] = std::move(s);
    });
    return d;
}

Corpora generate_corpora(const SynthConfig& config) {
    config.validate();
    return Corpora{generate_expression_split(config, Split::train, config.n_expression_train),
                   generate_expression_split(config, Split::test, config.n_expression_test),
                   generate_manipulation_split(config, Split::train, config.n_manip_train),
                   generate_manipulation_split(config, Split::test, config.n_manip_test)};
}

}  // namespace emd
