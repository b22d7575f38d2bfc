#pragma once

// Procedural factor images: an asymmetric glyph (shape) filled with one of a
// fixed set of colours modulated by a texture pattern, rendered at canonical
// pose on a dark background. Pose only changes through explicit rotation.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "looc/error.hpp"
#include "looc/image.hpp"
#include "looc/parallel.hpp"
#include "looc/rng.hpp"
#include "looc/tensor.hpp"
#include "looc/tensor_file.hpp"

namespace looc {

enum class Factor : std::uint8_t { Shape = 0, Color = 1, Texture = 2, Pose = 3 };

inline std::string to_string(Factor f) {
    switch (f) {
        case Factor::Shape: return "shape_id";
        case Factor::Color: return "color_id";
        case Factor::Texture: return "texture_id";
        case Factor::Pose: return "pose_id";
    }
    return "?";
}

inline Factor factor_from_string(const std::string& s) {
    if (s == "shape_id") return Factor::Shape;
    if (s == "color_id") return Factor::Color;
    if (s == "texture_id") return Factor::Texture;
    if (s == "pose_id") return Factor::Pose;
    throw ValidationError("unknown factor '" + s + "' (expected shape_id|color_id|texture_id|pose_id)");
}

struct FactorSpec {
    std::size_t n_shapes = 10;
    std::size_t n_colors = 8;
    std::size_t n_textures = 4;
    std::size_t image_size = 32;
    std::uint64_t seed = 7;

    void validate() const {
        if (n_shapes < 2 || n_colors < 2 || n_textures < 2)
            throw ValidationError("factor counts must all be >= 2");
        if (image_size != 16 && image_size != 32 && image_size != 64)
            throw ValidationError("image_size must be one of 16, 32, 64");
    }

    std::size_t n_classes(Factor f) const {
        switch (f) {
            case Factor::Shape: return n_shapes;
            case Factor::Color: return n_colors;
            case Factor::Texture: return n_textures;
            case Factor::Pose: return 4;
        }
        return 0;
    }

    bool operator==(const FactorSpec&) const = default;
};

struct FactorLabels {
    std::uint32_t shape_id = 0;
    std::uint32_t color_id = 0;
    std::uint32_t texture_id = 0;
    std::uint32_t pose_id = 0;

    std::uint32_t get(Factor f) const {
        switch (f) {
            case Factor::Shape: return shape_id;
            case Factor::Color: return color_id;
            case Factor::Texture: return texture_id;
            case Factor::Pose: return pose_id;
        }
        return 0;
    }

    bool operator==(const FactorLabels&) const = default;
};

struct FactorImage {
    Tensor pixels;  // [3,H,W]
    FactorLabels labels;
    std::uint64_t id = 0;  // position in the generated dataset

    bool operator==(const FactorImage&) const = default;
};

using Dataset = std::vector<FactorImage>;

namespace synth {

using Point = std::array<double, 2>;

// Glyph outlines in unit coordinates (x right, y down). None has 90 or 180
// degree rotational symmetry, so every quarter turn is visible.
inline const std::vector<std::vector<Point>>& glyph_bank() {
    static const std::vector<std::vector<Point>> bank = [] {
        std::vector<std::vector<Point>> g;
        g.push_back({{-0.6, -0.8}, {-0.1, -0.8}, {-0.1, 0.3}, {0.6, 0.3}, {0.6, 0.8}, {-0.6, 0.8}});  // L
        g.push_back({{-0.8, -0.8}, {0.8, -0.8}, {0.8, -0.35}, {0.25, -0.35}, {0.25, 0.8}, {-0.25, 0.8},
                     {-0.25, -0.35}, {-0.8, -0.35}});                                                // T
        g.push_back({{-0.8, -0.8}, {0.8, 0.8}, {-0.8, 0.8}});                                       // right triangle
        g.push_back({{0.0, -0.9}, {0.7, -0.1}, {0.3, -0.1}, {0.3, 0.85}, {-0.3, 0.85}, {-0.3, -0.1},
                     {-0.7, -0.1}});                                                                 // arrow
        g.push_back({{-0.6, -0.85}, {0.6, -0.85}, {0.6, -0.45}, {-0.15, -0.45}, {-0.15, -0.1}, {0.4, -0.1},
                     {0.4, 0.25}, {-0.15, 0.25}, {-0.15, 0.85}, {-0.6, 0.85}});                      // F
        g.push_back({{-0.35, -0.6}, {0.35, -0.6}, {0.85, 0.6}, {-0.85, 0.6}});                       // trapezoid
        g.push_back({{0.0, -0.9}, {0.75, -0.2}, {0.75, 0.8}, {-0.75, 0.8}, {-0.75, -0.2}});          // house
        g.push_back({{-0.6, -0.85}, {0.6, -0.85}, {0.6, 0.05}, {-0.1, 0.05}, {-0.1, 0.85}, {-0.6, 0.85}});  // flag
        {
            std::vector<Point> dome;  // half disc, flat side down
            for (int k = 0; k <= 12; ++k) {
                double a = std::numbers::pi + std::numbers::pi * k / 12.0;
                dome.push_back({0.85 * std::cos(a), 0.45 + 0.85 * std::sin(a)});
            }
            g.push_back(std::move(dome));
        }
        g.push_back({{-0.75, -0.8}, {-0.35, -0.8}, {-0.35, 0.35}, {0.35, 0.35}, {0.35, -0.8}, {0.75, -0.8},
                     {0.75, 0.8}, {-0.75, 0.8}});                                                    // U
        return g;
    }();
    return bank;
}

inline std::vector<Point> glyph(std::size_t shape_id, std::uint64_t seed) {
    const auto& bank = glyph_bank();
    if (shape_id < bank.size()) return bank[shape_id];
    // Irregular 7-gon from a per-shape stream.
    RngStream rng = RngStream(seed).child("glyph", {shape_id});
    std::vector<Point> pts;
    for (int k = 0; k < 7; ++k) {
        double a = 2 * std::numbers::pi * (k + rng.uniform(-0.3, 0.3)) / 7.0;
        double rad = rng.uniform(0.35, 0.9);
        pts.push_back({rad * std::cos(a), rad * std::sin(a)});
    }
    return pts;
}

inline bool inside(const std::vector<Point>& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
    }
    return in;
}

inline constexpr double kHueArc = 0.4;      // hues sit on 0 .. kHueArc of the colour circle
inline constexpr double kLumaLow = 0.45;    // luminance of colour 0
inline constexpr double kLumaSpread = 0.1;  // luminance rise from first to last colour
inline constexpr double kChroma = 0.35;

/// Colour c has hue kHueArc * c / n and luminance exactly
/// kLumaLow + kLumaSpread * c / (n - 1). Neighbouring hues lie closer than the
/// default hue jitter, so colour identity is not recoverable from a single
/// jittered view.
inline std::array<double, 3> palette(std::size_t color_id, std::size_t n_colors) {
    double r, g, b;
    image::hsv_to_rgb(kHueArc * static_cast<double>(color_id) / static_cast<double>(n_colors), 1.0, 1.0, r, g, b);
    const double l_hue = image::luma(r, g, b);
    const double target = kLumaLow + kLumaSpread * static_cast<double>(color_id) / static_cast<double>(n_colors - 1);
    return {target + kChroma * (r - l_hue), target + kChroma * (g - l_hue), target + kChroma * (b - l_hue)};
}

inline constexpr double kTextureLow = 0.55;
// Background brightens from top to bottom (floor below, dark sky above), so
// the canonical pose is visible in the pixels.
inline constexpr double kBackgroundTop = 0.08;
inline constexpr double kBackgroundBottom = 0.12;

inline double background(std::size_t row, std::size_t n) {
    return kBackgroundTop + (kBackgroundBottom - kBackgroundTop) * static_cast<double>(row) / static_cast<double>(n - 1);
}

}  // namespace synth

/// Renders one image at canonical pose. `rng` controls the integer position
/// jitter and texture phase.
inline Tensor render_factor_image(const FactorSpec& spec, const FactorLabels& labels, RngStream rng) {
    const std::size_t n = spec.image_size;
    const auto poly = synth::glyph(labels.shape_id, spec.seed);
    const auto rgb = synth::palette(labels.color_id, spec.n_colors);
    const long max_shift = static_cast<long>(n / 10);
    const long sx = static_cast<long>(rng.index(static_cast<std::size_t>(2 * max_shift + 1))) - max_shift;
    const long sy = static_cast<long>(rng.index(static_cast<std::size_t>(2 * max_shift + 1))) - max_shift;
    const std::size_t variant = labels.texture_id / 4;
    const std::size_t period = std::max<std::size_t>(4, n / 8) * (1 + variant);
    const std::size_t phase_r = rng.index(period), phase_c = rng.index(period);
    const double unit = 0.36 * static_cast<double>(n);

    Tensor img(Shape{3, n, n});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t ch = 0; ch < 3; ++ch) image::px(img, ch, r, c) = synth::background(r, n);
            double x = (static_cast<double>(c) + 0.5 - static_cast<double>(n) / 2.0 - static_cast<double>(sx)) / unit;
            double y = (static_cast<double>(r) + 0.5 - static_cast<double>(n) / 2.0 - static_cast<double>(sy)) / unit;
            // Texture draws happen for every pixel so the stream advances identically.
            double noise = rng.uniform(synth::kTextureLow, 1.0);
            if (!synth::inside(poly, x, y)) continue;
            const std::size_t rr = r + phase_r, cc = c + phase_c, half = period / 2;
            double m = 1.0;
            switch (labels.texture_id % 4) {
                case 0: m = (rr / half) % 2 ? synth::kTextureLow : 1.0; break;                  // stripes
                case 1: m = ((rr / half) + (cc / half)) % 2 ? synth::kTextureLow : 1.0; break;  // checker
                case 2: m = noise; break;                                                         // noise
                default: {                                                                        // dots
                    double dy = static_cast<double>(rr % period) - static_cast<double>(period) / 2.0 + 0.5;
                    double dx = static_cast<double>(cc % period) - static_cast<double>(period) / 2.0 + 0.5;
                    m = std::sqrt(dx * dx + dy * dy) < static_cast<double>(period) / 3.0 ? 1.0 : synth::kTextureLow;
                }
            }
            for (std::size_t ch = 0; ch < 3; ++ch) image::px(img, ch, r, c) = rgb[ch] * m;
        }
    }
    return img;
}

/// Every (shape, colour, texture) combination n_per_combo times, in that nesting
/// order. Image i draws from the stream (seed, "image", i), so serial and
/// threaded generation agree bit for bit.
inline Dataset generate_dataset(const FactorSpec& spec, std::size_t n_per_combo, std::size_t threads = worker_count()) {
    spec.validate();
    if (n_per_combo < 1) throw ValidationError("n_per_combo must be >= 1");
    Dataset out;
    out.reserve(spec.n_shapes * spec.n_colors * spec.n_textures * n_per_combo);
    for (std::uint32_t s = 0; s < spec.n_shapes; ++s)
        for (std::uint32_t c = 0; c < spec.n_colors; ++c)
            for (std::uint32_t t = 0; t < spec.n_textures; ++t)
                for (std::size_t k = 0; k < n_per_combo; ++k)
                    out.push_back(FactorImage{Tensor(), FactorLabels{s, c, t, 0}, out.size()});
    const RngStream root(spec.seed);
    parallel_for(out.size(), threads, [&](std::size_t i) {
        out[i].pixels = render_factor_image(spec, out[i].labels, root.child("image", {i}));
    });
    return out;
}

struct DatasetSplits {
    Dataset train, val, test;
};

/// Stratified by shape_id. Global split sizes are round(fraction * N); each
/// stratum receives floor(fraction * n_s) plus one extra for the strata with the
/// largest fractional remainders until the global size is met.
inline DatasetSplits split(const Dataset& data, std::array<double, 3> fractions, std::uint64_t seed) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw SplitError("split fractions must sum to 1");
    for (double f : fractions)
        if (f < 0.0) throw SplitError("split fractions must be non-negative");
    if (data.empty()) throw SplitError("cannot split an empty dataset");

    std::uint32_t max_shape = 0;
    for (const auto& im : data) max_shape = std::max(max_shape, im.labels.shape_id);
    std::vector<std::vector<std::size_t>> strata(max_shape + 1);
    for (std::size_t i = 0; i < data.size(); ++i) strata[data[i].labels.shape_id].push_back(i);
    for (std::size_t s = 0; s < strata.size(); ++s)
        if (strata[s].empty()) throw SplitError("empty stratum for shape_id " + std::to_string(s));

    const RngStream root = RngStream(seed).child("split");
    for (std::size_t s = 0; s < strata.size(); ++s) {
        RngStream rng = root.child("stratum", {s});
        rng.shuffle(strata[s]);
    }

    std::vector<std::size_t> remaining(strata.size());
    for (std::size_t s = 0; s < strata.size(); ++s) remaining[s] = strata[s].size();
    auto allocate = [&](double frac) {
        const auto target = static_cast<std::size_t>(std::llround(frac * static_cast<double>(data.size())));
        std::vector<std::size_t> q(strata.size());
        std::vector<std::pair<double, std::size_t>> rema;
        std::size_t given = 0;
        for (std::size_t s = 0; s < strata.size(); ++s) {
            double exact = frac * static_cast<double>(strata[s].size());
            q[s] = std::min(remaining[s], static_cast<std::size_t>(std::floor(exact + 1e-9)));
            given += q[s];
            rema.emplace_back(exact - std::floor(exact + 1e-9), s);
        }
        std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t k = 0; given < target && k < rema.size(); ++k) {
            std::size_t s = rema[k].second;
            if (q[s] < remaining[s]) {
                ++q[s];
                ++given;
            }
        }
        for (std::size_t s = 0; s < strata.size(); ++s) remaining[s] -= q[s];
        return q;
    };
    auto q_train = allocate(fractions[0]);
    auto q_val = allocate(fractions[1]);

    DatasetSplits out;
    std::vector<std::size_t> tr, va, te;
    for (std::size_t s = 0; s < strata.size(); ++s) {
        if (q_train[s] == 0) throw SplitError("stratum for shape_id " + std::to_string(s) + " has no training images");
        for (std::size_t k = 0; k < strata[s].size(); ++k) {
            std::size_t idx = strata[s][k];
            if (k < q_train[s]) tr.push_back(idx);
            else if (k < q_train[s] + q_val[s]) va.push_back(idx);
            else te.push_back(idx);
        }
    }
    // Keep dataset order inside each split.
    std::sort(tr.begin(), tr.end());
    std::sort(va.begin(), va.end());
    std::sort(te.begin(), te.end());
    for (auto i : tr) out.train.push_back(data[i]);
    for (auto i : va) out.val.push_back(data[i]);
    for (auto i : te) out.test.push_back(data[i]);
    return out;
}

/// Stacks pixels into [N,3,H,W].
inline Tensor stack_images(const std::vector<const Tensor*>& images) {
    if (images.empty()) throw DimensionError("stack of zero images");
    const Shape& s = images[0]->shape();
    Tensor out(Shape{images.size(), s[0], s[1], s[2]});
    const std::size_t per = images[0]->numel();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->shape() != s)
            throw DimensionError("mixed image sizes: " + shape_str(s) + " vs " + shape_str(images[i]->shape()));
        std::copy(images[i]->data().begin(), images[i]->data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

inline Tensor stack_images(const Dataset& data) {
    std::vector<const Tensor*> ptrs;
    for (const auto& im : data) ptrs.push_back(&im.pixels);
    return stack_images(ptrs);
}

inline std::vector<std::uint32_t> labels_of(const Dataset& data, Factor f) {
    std::vector<std::uint32_t> out;
    for (const auto& im : data) out.push_back(im.labels.get(f));
    return out;
}

/// Four explicitly rotated copies of every image, pose_id = quarter turns.
inline Dataset rotated_probe_set(const Dataset& data) {
    Dataset out;
    for (const auto& im : data)
        for (std::uint32_t q = 0; q < 4; ++q) {
            FactorImage r = im;
            r.pixels = image::rotate_quarters(im.pixels, static_cast<int>(q));
            r.labels.pose_id = q;
            out.push_back(std::move(r));
        }
    return out;
}

inline nlohmann::json to_json(const FactorSpec& s) {
    return {{"n_shapes", s.n_shapes}, {"n_colors", s.n_colors}, {"n_textures", s.n_textures},
            {"image_size", s.image_size}, {"seed", s.seed}};
}

/// images.looc (f64 [N,3,H,W]), labels.looc (u32 [N,4]), manifest.json.
inline void write_dataset_dir(const std::filesystem::path& dir, const Dataset& data, const FactorSpec& spec,
                              std::size_t n_per_combo) {
    std::filesystem::create_directories(dir);
    write_tensor_file(dir / "images.looc", stack_images(data));
    U32Array labels{Shape{data.size(), 4}, {}};
    for (const auto& im : data)
        for (Factor f : {Factor::Shape, Factor::Color, Factor::Texture, Factor::Pose})
            labels.data.push_back(im.labels.get(f));
    write_tensor_file(dir / "labels.looc", labels);
    nlohmann::json manifest = {{"format", "looc-dataset"}, {"version", 1}, {"spec", to_json(spec)},
                               {"n_per_combo", n_per_combo}, {"count", data.size()}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline Dataset read_dataset_dir(const std::filesystem::path& dir) {
    Tensor images = read_tensor_file(dir / "images.looc");
    U32Array labels = read_u32_file(dir / "labels.looc");
    if (images.rank() != 4 || labels.shape.size() != 2 || labels.shape[1] != 4 || labels.shape[0] != images.dim(0))
        throw FormatError("dataset directory " + dir.string() + ": images/labels shapes disagree", 0);
    const std::size_t n = images.dim(0), per = images.numel() / std::max<std::size_t>(n, 1);
    Dataset out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> px(images.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                               images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        FactorLabels l{labels.data[4 * i], labels.data[4 * i + 1], labels.data[4 * i + 2], labels.data[4 * i + 3]};
        out.push_back(FactorImage{Tensor(Shape{images.dim(1), images.dim(2), images.dim(3)}, std::move(px)), l, i});
    }
    return out;
}

}  // namespace looc
