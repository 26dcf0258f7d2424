#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lefm/error.hpp"
#include "lefm/image.hpp"

namespace lefm::metrics {

struct KappaResult {
    double kappa = 0;
    double p_bar = 0;   // mean observed agreement
    double p_e = 0;     // chance agreement
    std::size_t items = 0;
};

/// Fleiss kappa over an N x C table of category counts (row-major), each row
/// summing to `raters`. When chance agreement is 1 every rater used the same
/// single category, which counts as perfect agreement.
inline KappaResult fleiss_kappa(std::span<const std::uint64_t> counts, std::size_t categories, std::size_t raters)
{
    if (categories < 2)
        throw ConfigError("fleiss_kappa: need at least two categories");
    if (raters < 2)
        throw ConfigError("fleiss_kappa: need at least two raters");
    if (counts.empty() || counts.size() % categories != 0)
        throw ShapeError("fleiss_kappa: table size " + std::to_string(counts.size()) + " is not a positive multiple of " +
                         std::to_string(categories));
    const std::size_t n = counts.size() / categories;
    const double a = static_cast<double>(raters);
    std::vector<double> column(categories, 0.0);
    double p_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t row = 0;
        double sq = 0;
        for (std::size_t j = 0; j < categories; ++j) {
            const auto v = counts[i * categories + j];
            row += v;
            sq += static_cast<double>(v) * static_cast<double>(v);
            column[j] += static_cast<double>(v);
        }
        if (row != raters)
            throw DataError("fleiss_kappa: row " + std::to_string(i) + " sums to " + std::to_string(row) + ", expected " +
                            std::to_string(raters));
        p_sum += (sq - a) / (a * (a - 1));
    }
    KappaResult r;
    r.items = n;
    r.p_bar = p_sum / static_cast<double>(n);
    for (double c : column) {
        const double p = c / (static_cast<double>(n) * a);
        r.p_e += p * p;
    }
    if (r.p_e >= 1.0) {
        if (r.p_bar < 1.0)
            throw NumericError("fleiss_kappa: chance agreement is 1 but observed agreement is not");
        r.kappa = 1.0;
        return r;
    }
    r.kappa = (r.p_bar - r.p_e) / (1 - r.p_e);
    return r;
}

/// Two-category (background/foreground) count table with one row per pixel.
inline std::vector<std::uint64_t> pixel_vote_table(std::span<const Mask> masks)
{
    if (masks.empty())
        throw DataError("pixel_vote_table: no masks");
    const std::size_t n = masks.front().size();
    std::vector<std::uint64_t> table(2 * n, 0);
    for (const auto& m : masks) {
        if (m.size() != n)
            throw ShapeError("pixel_vote_table: masks differ in size");
        for (std::size_t p = 0; p < n; ++p)
            ++table[2 * p + (m.storage()[p] ? 1 : 0)];
    }
    return table;
}

/// Per-image agreement treating every pixel as an item rated by all annotators.
inline KappaResult image_kappa(std::span<const Mask> masks)
{
    return fleiss_kappa(pixel_vote_table(masks), 2, masks.size());
}

} // namespace lefm::metrics
