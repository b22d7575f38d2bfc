#pragma once

// Pixel-level operations on [3,H,W] images with values in [0,1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

#include "looc/error.hpp"
#include "looc/tensor.hpp"

namespace looc::image {

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

inline void require_image(const Tensor& img, const char* op) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw DimensionError(std::string(op) + ": expected [3,H,W] image, got " + shape_str(img.shape()));
}

inline std::size_t height(const Tensor& img) { return img.dim(1); }
inline std::size_t width(const Tensor& img) { return img.dim(2); }

inline double& px(Tensor& img, std::size_t ch, std::size_t r, std::size_t c) {
    return img[(ch * img.dim(1) + r) * img.dim(2) + c];
}
inline double px(const Tensor& img, std::size_t ch, std::size_t r, std::size_t c) {
    return img[(ch * img.dim(1) + r) * img.dim(2) + c];
}

inline void clamp01(Tensor& img) {
    for (double& v : img.storage()) v = std::clamp(v, 0.0, 1.0);
}

inline double luma(double r, double g, double b) {
    return kLumaWeights[0] * r + kLumaWeights[1] * g + kLumaWeights[2] * b;
}

/// One 90-degree turn: pixel (r, c) moves to (c, H-1-r).
inline Tensor rotate90(const Tensor& img) {
    require_image(img, "rotate90");
    const std::size_t h = height(img);
    if (width(img) != h) throw DimensionError("rotate90 needs a square image");
    Tensor out(img.shape());
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < h; ++c) px(out, ch, c, h - 1 - r) = px(img, ch, r, c);
    return out;
}

inline Tensor rotate_quarters(Tensor img, int quarters) {
    quarters = ((quarters % 4) + 4) % 4;
    for (int k = 0; k < quarters; ++k) img = rotate90(img);
    return img;
}

inline Tensor hflip(const Tensor& img) {
    require_image(img, "hflip");
    Tensor out(img.shape());
    const std::size_t h = height(img), w = width(img);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) px(out, ch, r, w - 1 - c) = px(img, ch, r, c);
    return out;
}

/// 3x3 binomial kernel ([1,2,1] outer [1,2,1]) / 16 with replicated borders.
inline Tensor blur3(const Tensor& img) {
    require_image(img, "blur3");
    static constexpr double k[3] = {0.25, 0.5, 0.25};
    const std::size_t h = height(img), w = width(img);
    Tensor tmp(img.shape()), out(img.shape());
    auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double s = 0.0;
                for (int d = -1; d <= 1; ++d) s += k[d + 1] * px(img, ch, r, clampi(static_cast<long>(c) + d, w));
                px(tmp, ch, r, c) = s;
            }
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double s = 0.0;
                for (int d = -1; d <= 1; ++d) s += k[d + 1] * px(tmp, ch, clampi(static_cast<long>(r) + d, h), c);
                px(out, ch, r, c) = s;
            }
    }
    return out;
}

/// Crops the side x side window at (top, left) and resizes it back to the
/// input size with bilinear interpolation (corner-aligned).
inline Tensor crop_resize(const Tensor& img, std::size_t top, std::size_t left, std::size_t side) {
    require_image(img, "crop_resize");
    const std::size_t h = height(img), w = width(img);
    if (side == 0 || top + side > h || left + side > w)
        throw ParameterError("crop window (" + std::to_string(top) + "," + std::to_string(left) + ") side " +
                             std::to_string(side) + " lies outside " + shape_str(img.shape()));
    if (side == h && side == w) return img;
    Tensor out(img.shape());
    auto src = [&](std::size_t dst, std::size_t n) {
        return n <= 1 || side <= 1 ? 0.0 : static_cast<double>(dst) * static_cast<double>(side - 1) / static_cast<double>(n - 1);
    };
    for (std::size_t r = 0; r < h; ++r) {
        double sy = src(r, h);
        std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
        std::size_t y1 = std::min(y0 + 1, side - 1);
        double fy = sy - static_cast<double>(y0);
        for (std::size_t c = 0; c < w; ++c) {
            double sx = src(c, w);
            std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
            std::size_t x1 = std::min(x0 + 1, side - 1);
            double fx = sx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double a = px(img, ch, top + y0, left + x0), b = px(img, ch, top + y0, left + x1);
                double cc = px(img, ch, top + y1, left + x0), d = px(img, ch, top + y1, left + x1);
                px(out, ch, r, c) = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * cc + fx * d);
            }
        }
    }
    return out;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r) h = (g - b) / d;
    else if (mx == g) h = 2.0 + (b - r) / d;
    else h = 4.0 + (r - g) / d;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    double h6 = h * 6.0;
    int i = static_cast<int>(std::floor(h6)) % 6;
    double f = h6 - std::floor(h6);
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

}  // namespace looc::image
