#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

#include "looc/error.hpp"
#include "looc/image.hpp"
#include "looc/rng.hpp"
#include "looc/tensor.hpp"

namespace looc {

enum class AugKind : std::uint8_t { Crop, HFlip, Blur, ColorJitter, Rotation, Texture };

/// Designated kinds may own an embedding sub-space.
inline constexpr bool is_designated(AugKind k) {
    return k == AugKind::ColorJitter || k == AugKind::Rotation || k == AugKind::Texture;
}

inline constexpr std::array<AugKind, 3> kDesignatedKinds{AugKind::ColorJitter, AugKind::Rotation, AugKind::Texture};

inline std::string to_string(AugKind k) {
    switch (k) {
        case AugKind::Crop: return "crop";
        case AugKind::HFlip: return "hflip";
        case AugKind::Blur: return "blur";
        case AugKind::ColorJitter: return "color";
        case AugKind::Rotation: return "rotation";
        case AugKind::Texture: return "texture";
    }
    return "?";
}

inline AugKind aug_kind_from_string(std::string_view s) {
    for (AugKind k : {AugKind::Crop, AugKind::HFlip, AugKind::Blur, AugKind::ColorJitter, AugKind::Rotation,
                      AugKind::Texture})
        if (to_string(k) == s) return k;
    throw ValidationError("unknown augmentation '" + std::string(s) + "'");
}

/// Crop window: origin as a fraction of the image side, area fraction `scale`.
struct CropParams {
    double x0 = 0.0;
    double y0 = 0.0;
    double scale = 1.0;
    bool operator==(const CropParams&) const = default;
};

struct ColorParams {
    bool apply = false;
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    double hue = 0.0;  // shift on the unit hue circle
    bool grayscale = false;
    bool operator==(const ColorParams&) const = default;
};

struct RotationParams {
    bool apply = false;
    int angle = 90;  // one of 90, 180, 270
    bool operator==(const RotationParams&) const = default;
};

struct TextureParams {
    bool apply = false;
    int pattern_id = 0;
    double alpha = 0.5;
    bool operator==(const TextureParams&) const = default;
};

struct AugParams {
    CropParams crop;
    bool hflip = false;
    bool blur = false;
    ColorParams color;
    RotationParams rotation;
    TextureParams texture;

    static AugParams identity() { return AugParams{}; }
    bool operator==(const AugParams&) const = default;
};

struct AugConfig {
    double color_prob = 0.8;
    std::array<double, 4> color_strength{0.4, 0.4, 0.4, 0.1};  // brightness, contrast, saturation, hue
    double grayscale_prob = 0.2;
    double rotation_prob = 0.5;
    double texture_prob = 0.5;
    std::array<double, 2> crop_scale_range{0.5, 1.0};
    double blur_prob = 0.5;
    double hflip_prob = 0.5;
    std::array<double, 2> texture_alpha_range{0.3, 0.7};
    int texture_patterns = 4;

    void validate() const {
        for (double p : {color_prob, grayscale_prob, rotation_prob, texture_prob, blur_prob, hflip_prob})
            if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("augmentation probabilities must lie in [0,1]");
        for (std::size_t i = 0; i < 3; ++i)
            if (!(color_strength[i] >= 0.0 && color_strength[i] < 1.0))
                throw ValidationError("brightness/contrast/saturation strength must lie in [0,1)");
        if (!(color_strength[3] >= 0.0 && color_strength[3] <= 0.5))
            throw ValidationError("hue strength must lie in [0,0.5]");
        if (!(crop_scale_range[0] > 0.0 && crop_scale_range[0] <= crop_scale_range[1] && crop_scale_range[1] <= 1.0))
            throw ValidationError("crop_scale_range must satisfy 0 < lo <= hi <= 1");
        if (!(texture_alpha_range[0] >= 0.0 && texture_alpha_range[0] <= texture_alpha_range[1] &&
              texture_alpha_range[1] <= 1.0))
            throw ValidationError("texture_alpha_range must satisfy 0 <= lo <= hi <= 1");
        if (texture_patterns < 1) throw ValidationError("texture_patterns must be >= 1");
    }
};

/// Draws every kind from its own child stream, so resampling one kind never
/// shifts another kind's draws.
inline AugParams sample_params(const AugConfig& cfg, const RngStream& stream) {
    AugParams p;
    {
        RngStream r = stream.child("crop");
        double scale = cfg.crop_scale_range[0] == cfg.crop_scale_range[1]
                           ? cfg.crop_scale_range[0]
                           : r.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1]);
        double slack = 1.0 - std::sqrt(scale);
        p.crop = CropParams{slack > 0 ? r.uniform(0.0, slack) : 0.0, slack > 0 ? r.uniform(0.0, slack) : 0.0, scale};
    }
    p.hflip = stream.child("hflip").bernoulli(cfg.hflip_prob);
    p.blur = stream.child("blur").bernoulli(cfg.blur_prob);
    {
        RngStream r = stream.child("color");
        p.color.apply = r.bernoulli(cfg.color_prob);
        const auto& s = cfg.color_strength;
        double b = r.uniform(1 - s[0], 1 + s[0]);
        double c = r.uniform(1 - s[1], 1 + s[1]);
        double sat = r.uniform(1 - s[2], 1 + s[2]);
        double h = r.uniform(-s[3], s[3]);
        bool gray = r.bernoulli(cfg.grayscale_prob);
        if (p.color.apply) {
            p.color.brightness = b;
            p.color.contrast = c;
            p.color.saturation = sat;
            p.color.hue = h;
        }
        p.color.grayscale = gray;
    }
    {
        RngStream r = stream.child("rotation");
        p.rotation.apply = r.bernoulli(cfg.rotation_prob);
        p.rotation.angle = 90 * static_cast<int>(1 + r.index(3));
    }
    {
        RngStream r = stream.child("texture");
        p.texture.apply = r.bernoulli(cfg.texture_prob);
        p.texture.pattern_id = static_cast<int>(r.index(static_cast<std::size_t>(cfg.texture_patterns)));
        p.texture.alpha = r.uniform(cfg.texture_alpha_range[0], cfg.texture_alpha_range[1]);
    }
    return p;
}

/// Copies the `kind` slot of `src` onto `dst`; every other slot keeps dst's value.
inline AugParams copy_slot(AugParams dst, const AugParams& src, AugKind kind) {
    switch (kind) {
        case AugKind::ColorJitter: dst.color = src.color; break;
        case AugKind::Rotation: dst.rotation = src.rotation; break;
        case AugKind::Texture: dst.texture = src.texture; break;
        default: throw UsageError("copy_slot: '" + to_string(kind) + "' is not a designated augmentation");
    }
    return dst;
}

/// Turns off the `kind` slot (identity parameters).
inline AugParams clear_slot(AugParams p, AugKind kind) {
    switch (kind) {
        case AugKind::Crop: p.crop = CropParams{}; break;
        case AugKind::HFlip: p.hflip = false; break;
        case AugKind::Blur: p.blur = false; break;
        case AugKind::ColorJitter: p.color = ColorParams{}; break;
        case AugKind::Rotation: p.rotation.apply = false; break;
        case AugKind::Texture: p.texture.apply = false; break;
    }
    return p;
}

inline bool slot_equal(const AugParams& a, const AugParams& b, AugKind kind) {
    switch (kind) {
        case AugKind::Crop: return a.crop == b.crop;
        case AugKind::HFlip: return a.hflip == b.hflip;
        case AugKind::Blur: return a.blur == b.blur;
        case AugKind::ColorJitter: return a.color == b.color;
        case AugKind::Rotation: return a.rotation == b.rotation;
        case AugKind::Texture: return a.texture == b.texture;
    }
    return false;
}

namespace augment_detail {

inline void color_jitter(Tensor& img, const ColorParams& p) {
    const std::size_t h = img.dim(1), w = img.dim(2), plane = h * w;
    double* r = img.data().data();
    double* g = r + plane;
    double* b = g + plane;
    if (p.apply) {
        if (p.brightness != 1.0) {
            for (double& v : img.storage()) v = std::clamp(v * p.brightness, 0.0, 1.0);
        }
        if (p.contrast != 1.0) {
            double mean = 0.0;
            for (std::size_t i = 0; i < plane; ++i) mean += image::luma(r[i], g[i], b[i]);
            mean /= static_cast<double>(plane);
            for (double& v : img.storage()) v = std::clamp(p.contrast * v + (1 - p.contrast) * mean, 0.0, 1.0);
        }
        if (p.saturation != 1.0) {
            for (std::size_t i = 0; i < plane; ++i) {
                double l = image::luma(r[i], g[i], b[i]);
                r[i] = std::clamp(p.saturation * r[i] + (1 - p.saturation) * l, 0.0, 1.0);
                g[i] = std::clamp(p.saturation * g[i] + (1 - p.saturation) * l, 0.0, 1.0);
                b[i] = std::clamp(p.saturation * b[i] + (1 - p.saturation) * l, 0.0, 1.0);
            }
        }
        if (p.hue != 0.0) {
            for (std::size_t i = 0; i < plane; ++i) {
                double hh, s, v;
                image::rgb_to_hsv(r[i], g[i], b[i], hh, s, v);
                image::hsv_to_rgb(hh + p.hue, s, v, r[i], g[i], b[i]);
            }
        }
    }
    if (p.grayscale) {
        for (std::size_t i = 0; i < plane; ++i) {
            double l = image::luma(r[i], g[i], b[i]);
            r[i] = g[i] = b[i] = l;
        }
    }
}

}  // namespace augment_detail

/// Procedural overlay pattern used by texture randomisation, [3,n,n] in [0,1].
inline Tensor texture_pattern(int pattern_id, std::size_t n) {
    Tensor out(Shape{3, n, n});
    static constexpr std::array<std::array<double, 3>, 2> tints[4] = {
        {{{0.85, 0.25, 0.2}, {0.15, 0.2, 0.7}}},
        {{{0.9, 0.8, 0.3}, {0.2, 0.5, 0.3}}},
        {{{0.7, 0.7, 0.7}, {0.1, 0.1, 0.15}}},
        {{{0.3, 0.8, 0.9}, {0.6, 0.2, 0.6}}},
    };
    const int kind = pattern_id % 4;
    const double freq = 1.0 + static_cast<double>(pattern_id / 4);
    const double nn = static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            double y = static_cast<double>(r) / nn, x = static_cast<double>(c) / nn, t = 0.0;
            switch (kind) {
                case 0: t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * freq * 4.0 * (x + y)); break;  // diagonal bands
                case 1: {  // rings
                    double dx = x - 0.5, dy = y - 0.5;
                    t = 0.5 + 0.5 * std::cos(2 * std::numbers::pi * freq * 6.0 * std::sqrt(dx * dx + dy * dy));
                    break;
                }
                case 2: t = ((r / (2 * static_cast<std::size_t>(freq))) % 3 == 0 || (c / (2 * static_cast<std::size_t>(freq))) % 3 == 0) ? 1.0 : 0.0; break;  // grid
                default: t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * freq * (5.0 * x + 2.0 * std::sin(2 * std::numbers::pi * 3.0 * y))); break;  // waves
            }
            for (std::size_t ch = 0; ch < 3; ++ch)
                image::px(out, ch, r, c) = t * tints[kind][0][ch] + (1 - t) * tints[kind][1][ch];
        }
    return out;
}

/// Applies p in the fixed order Crop, HFlip, ColorJitter, Texture, Blur, Rotation.
/// Output is clamped to [0,1]; identity parameters reproduce the input bit for bit.
inline Tensor apply(const Tensor& pixels, const AugParams& p) {
    image::require_image(pixels, "augment::apply");
    const std::size_t n = image::height(pixels);
    if (image::width(pixels) != n) throw DimensionError("augment::apply needs square images");
    Tensor img = pixels;

    {
        const auto& c = p.crop;
        if (!(c.scale > 0.0 && c.scale <= 1.0) || c.x0 < 0.0 || c.y0 < 0.0)
            throw ParameterError("crop parameters out of range");
        const auto side = static_cast<std::size_t>(std::max(1.0, std::round(std::sqrt(c.scale) * static_cast<double>(n))));
        const auto left = static_cast<std::size_t>(std::floor(c.x0 * static_cast<double>(n)));
        const auto top = static_cast<std::size_t>(std::floor(c.y0 * static_cast<double>(n)));
        if (left + side > n || top + side > n)
            throw ParameterError("crop window outside image after rounding: origin (" + std::to_string(top) + "," +
                                 std::to_string(left) + ") side " + std::to_string(side) + " on " +
                                 std::to_string(n) + "px");
        if (!(side == n && left == 0 && top == 0)) img = image::crop_resize(img, top, left, side);
    }
    if (p.hflip) img = image::hflip(img);
    augment_detail::color_jitter(img, p.color);
    if (p.texture.apply && p.texture.alpha != 0.0) {
        if (p.texture.alpha < 0.0 || p.texture.alpha > 1.0) throw ParameterError("texture alpha outside [0,1]");
        Tensor pat = texture_pattern(p.texture.pattern_id, n);
        const double a = p.texture.alpha;
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] = (1 - a) * img[i] + a * pat[i];
    }
    if (p.blur) img = image::blur3(img);
    if (p.rotation.apply) {
        if (p.rotation.angle != 90 && p.rotation.angle != 180 && p.rotation.angle != 270)
            throw ParameterError("rotation angle must be 90, 180 or 270");
        img = image::rotate_quarters(std::move(img), p.rotation.angle / 90);
    }
    image::clamp01(img);
    return img;
}

}  // namespace looc
