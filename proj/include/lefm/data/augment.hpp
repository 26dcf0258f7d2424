#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "lefm/image.hpp"
#include "lefm/rng.hpp"

namespace lefm::data {

struct AugmentationConfig {
    double shift_limit = 0.2;     // fraction of the image size
    double scale_limit = 0.2;     // scale factor in [1 - limit, 1 + limit]
    double rotation_limit = 30.0; // degrees
    bool horizontal_flip = true;
    bool vertical_flip = true;
    double probability = 0.5;
    bool enabled = true;
};

/// One sampled geometric transform. Shifts are fractions of width/height.
struct AffineParams {
    double shift_x = 0;
    double shift_y = 0;
    double scale = 1;
    double angle_deg = 0;
    bool flip_h = false;
    bool flip_v = false;

    bool is_identity_warp() const noexcept { return shift_x == 0 && shift_y == 0 && scale == 1 && angle_deg == 0; }
};

/// Each of shift, scale, rotation and the two flips is switched on
/// independently with the configured probability.
inline AffineParams sample_affine(const AugmentationConfig& cfg, Rng& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto coin = [&] { return u01(rng) < cfg.probability; };
    auto sym = [&](double limit) { return (2 * u01(rng) - 1) * limit; };
    AffineParams p;
    if (!cfg.enabled)
        return p;
    if (coin()) {
        p.shift_x = sym(cfg.shift_limit);
        p.shift_y = sym(cfg.shift_limit);
    }
    if (coin())
        p.scale = 1 + sym(cfg.scale_limit);
    if (coin())
        p.angle_deg = sym(cfg.rotation_limit);
    p.flip_h = cfg.horizontal_flip && coin();
    p.flip_v = cfg.vertical_flip && coin();
    return p;
}

struct AugmentedPair {
    Image<float> image;
    Mask label;
    std::size_t clipped = 0; // image values clamped back into [0, 1]
};

/// Applies the warp about the image centre, then the flips. Positive angles
/// turn (row, col) towards (col, H-1-row). Image samples are bilinear, labels
/// nearest; out-of-frame samples are 0.
inline AugmentedPair apply_affine(const Image<float>& image, const Mask& label, const AffineParams& p)
{
    const std::size_t h = image.height(), w = image.width(), ch = image.channels();
    AugmentedPair out{Image<float>(h, w, ch), Mask(h, w, 1), 0};
    const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
    const double rad = p.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double ty = p.shift_y * static_cast<double>(h), tx = p.shift_x * static_cast<double>(w);
    const bool exact = p.is_identity_warp();

    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            // undo flips, then the warp
            const std::size_t fr = p.flip_v ? h - 1 - r : r;
            const std::size_t fc = p.flip_h ? w - 1 - c : c;
            if (exact) {
                for (std::size_t k = 0; k < ch; ++k)
                    out.image(r, c, k) = image(fr, fc, k);
                out.label(r, c) = label(fr, fc);
                continue;
            }
            const double yo = static_cast<double>(fr) - cy - ty, xo = static_cast<double>(fc) - cx - tx;
            const double xs = (cs * xo + sn * yo) / p.scale + cx;
            const double ys = (-sn * xo + cs * yo) / p.scale + cy;

            const double rr = std::round(ys), cc = std::round(xs);
            if (rr >= 0 && cc >= 0 && rr < static_cast<double>(h) && cc < static_cast<double>(w))
                out.label(r, c) = label(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));

            const double y0 = std::floor(ys), x0 = std::floor(xs);
            const double fy = ys - y0, fx = xs - x0;
            for (std::size_t k = 0; k < ch; ++k) {
                double acc = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const double yy = y0 + dy, xx = x0 + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<double>(h) || xx >= static_cast<double>(w))
                            continue;
                        const double wt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                        acc += wt * image(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), k);
                    }
                float v = static_cast<float>(acc);
                if (v < 0.0f || v > 1.0f) {
                    v = std::clamp(v, 0.0f, 1.0f);
                    ++out.clipped;
                }
                out.image(r, c, k) = v;
            }
        }
    }
    return out;
}

inline AugmentedPair augment(const Image<float>& image, const Mask& label, const AugmentationConfig& cfg, Rng& rng)
{
    return apply_affine(image, label, sample_affine(cfg, rng));
}

} // namespace lefm::data
