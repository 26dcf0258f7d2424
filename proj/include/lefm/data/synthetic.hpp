#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lefm/data/dataset.hpp"
#include "lefm/error.hpp"
#include "lefm/rng.hpp"

namespace lefm::data {

enum class SyntheticRule { linear, product, mix };

inline SyntheticRule parse_rule(std::string_view name)
{
    std::string s(name);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (s == "LINEAR")
        return SyntheticRule::linear;
    if (s == "PRODUCT")
        return SyntheticRule::product;
    if (s == "MIX")
        return SyntheticRule::mix;
    throw ConfigError("unknown synthetic rule '" + std::string(name) + "' (expected LINEAR, PRODUCT or MIX)");
}

inline std::string rule_name(SyntheticRule rule)
{
    switch (rule) {
    case SyntheticRule::linear:
        return "LINEAR";
    case SyntheticRule::product:
        return "PRODUCT";
    case SyntheticRule::mix:
        return "MIX";
    }
    return "?";
}

/// Threshold giving a reasonably balanced label for uniform channels.
inline double default_threshold(SyntheticRule rule)
{
    return rule == SyntheticRule::product ? 0.25 : 0.5;
}

/// Decision value compared against the threshold; labels are `value > tau`.
inline double rule_value(SyntheticRule rule, double r, double g, double b)
{
    switch (rule) {
    case SyntheticRule::linear:
        return 0.5 * r + 0.5 * b;
    case SyntheticRule::product:
        return r * b;
    case SyntheticRule::mix:
        return r * g + b * b;
    }
    return 0;
}

struct SyntheticConfig {
    std::size_t n_images = 200;
    std::size_t height = 64;
    std::size_t width = 64;
    SyntheticRule rule = SyntheticRule::product;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;
    std::optional<double> threshold; // rule default when unset
    double smoothness = 2.0;         // Gaussian correlation length in pixels
};

namespace detail {

/// Periodic Gaussian blur along rows then columns.
inline std::vector<double> blur_periodic(const std::vector<double>& in, std::size_t h, std::size_t w, double sigma)
{
    if (sigma <= 0)
        return in;
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> kernel(2 * static_cast<std::size_t>(radius) + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i)
        total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& k : kernel)
        k /= total;
    auto wrap = [](long i, std::size_t n) { return static_cast<std::size_t>(((i % static_cast<long>(n)) + static_cast<long>(n)) % static_cast<long>(n)); };
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[static_cast<std::size_t>(i + radius)] * in[r * w + wrap(static_cast<long>(c) + i, w)];
            tmp[r * w + c] = s;
        }
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[static_cast<std::size_t>(i + radius)] * tmp[wrap(static_cast<long>(r) + i, h) * w + c];
            out[r * w + c] = s;
        }
    return out;
}

} // namespace detail

/// Smooth random field with (approximately) uniform marginals on [0, 1]:
/// blurred white noise, standardized, pushed through the normal CDF.
inline std::vector<double> uniform_field(std::size_t h, std::size_t w, double smoothness, Rng& rng)
{
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> noise(h * w);
    for (auto& v : noise)
        v = n01(rng);
    auto f = detail::blur_periodic(noise, h, w, smoothness);
    double mean = 0, sq = 0;
    for (double v : f)
        mean += v;
    mean /= static_cast<double>(f.size());
    for (double v : f)
        sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(f.size()));
    for (auto& v : f)
        v = 0.5 * std::erfc(-((v - mean) / (sd > 0 ? sd : 1)) / std::numbers::sqrt2);
    return f;
}

/// Images whose single annotator mask is a fixed pixelwise rule of the clean
/// RGB field. Noise is added to the image only, then clamped to [0, 1].
inline std::vector<AnnotatedSample> generate_synthetic(const SyntheticConfig& cfg)
{
    if (cfg.n_images == 0 || cfg.height == 0 || cfg.width == 0)
        throw ConfigError("generate_synthetic: image count and size must be positive");
    if (cfg.noise_sigma < 0)
        throw ConfigError("generate_synthetic: noise sigma must be non-negative");
    const double tau = cfg.threshold.value_or(default_threshold(cfg.rule));
    const std::size_t h = cfg.height, w = cfg.width;
    std::vector<AnnotatedSample> out;
    out.reserve(cfg.n_images);
    for (std::size_t i = 0; i < cfg.n_images; ++i) {
        Rng rng = make_rng(cfg.seed, {0x5e7, i});
        std::array<std::vector<double>, 3> fields;
        for (auto& f : fields)
            f = uniform_field(h, w, cfg.smoothness, rng);
        AnnotatedSample s;
        char id[32];
        std::snprintf(id, sizeof id, "img_%04zu", i);
        s.id = id;
        s.patient_id = s.id;
        s.organ = "synthetic";
        s.image = Image<float>(h, w, 3);
        Mask label(h, w, 1);
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0 ? cfg.noise_sigma : 1.0);
        for (std::size_t p = 0; p < h * w; ++p) {
            label.storage()[p] = rule_value(cfg.rule, fields[0][p], fields[1][p], fields[2][p]) > tau ? 1 : 0;
            for (std::size_t k = 0; k < 3; ++k) {
                double v = fields[k][p];
                if (cfg.noise_sigma > 0)
                    v += noise(rng);
                s.image.storage()[p * 3 + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        s.annotations.push_back(label);
        s.majority_label = std::move(label);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace lefm::data
