#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lefm/error.hpp"

namespace lefm::metrics {

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x, double tol)
{
    constexpr double tiny = 1e-300;
    const double qab = a + b, qap = a + 1, qam = a - 1;
    double c = 1, d = 1 - qab * x / qap;
    if (std::abs(d) < tiny)
        d = tiny;
    d = 1 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1 + aa * d;
        if (std::abs(d) < tiny)
            d = tiny;
        c = 1 + aa / c;
        if (std::abs(c) < tiny)
            c = tiny;
        d = 1 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1 + aa * d;
        if (std::abs(d) < tiny)
            d = tiny;
        c = 1 + aa / c;
        if (std::abs(c) < tiny)
            c = tiny;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1) < tol)
            return h;
    }
    throw NumericError("incomplete beta: continued fraction did not converge");
}

} // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x, double tol = 1e-12)
{
    if (!(a > 0 && b > 0))
        throw NumericError("incomplete beta: shape parameters must be positive");
    if (!(x >= 0 && x <= 1))
        throw NumericError("incomplete beta: x outside [0, 1]");
    if (x == 0 || x == 1)
        return x;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1) / (a + b + 2))
        return front * detail::beta_continued_fraction(a, b, x, tol) / a;
    return 1 - front * detail::beta_continued_fraction(b, a, 1 - x, tol) / b;
}

/// Upper tail P(F > f) of the F distribution with (d1, d2) degrees of freedom.
inline double f_survival(double f, double d1, double d2)
{
    if (std::isinf(f))
        return 0;
    if (f <= 0)
        return 1;
    return regularized_incomplete_beta(d2 / 2, d1 / 2, d2 / (d2 + d1 * f));
}

struct AnovaResult {
    double f = 0;
    double p = 1;
    double ss_between = 0;
    double ss_within = 0;
    std::size_t df_between = 0;
    std::size_t df_within = 0;
    double alpha = 0.05;

    bool significant() const noexcept { return p < alpha; }
};

/// One-way ANOVA across groups. All-equal data (no variance at all) yields
/// F = 0, p = 1; zero within-group spread with distinct means yields F = inf,
/// p = 0.
inline AnovaResult one_way_anova(std::span<const std::vector<double>> groups, double alpha = 0.05)
{
    if (groups.size() < 2)
        throw ConfigError("anova: need at least two groups");
    std::size_t total = 0;
    double grand = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].size() < 2)
            throw DataError("anova: group " + std::to_string(g) + " has fewer than two values");
        for (double v : groups[g]) {
            if (!std::isfinite(v))
                throw NumericError("anova: non-finite value in group " + std::to_string(g));
            grand += v;
        }
        total += groups[g].size();
    }
    grand /= static_cast<double>(total);

    AnovaResult r;
    r.alpha = alpha;
    r.df_between = groups.size() - 1;
    r.df_within = total - groups.size();
    for (const auto& group : groups) {
        double mean = 0;
        for (double v : group)
            mean += v;
        mean /= static_cast<double>(group.size());
        r.ss_between += static_cast<double>(group.size()) * (mean - grand) * (mean - grand);
        for (double v : group)
            r.ss_within += (v - mean) * (v - mean);
    }
    // spreads below this are rounding noise of the means, not signal
    const double scale = std::max(1.0, std::abs(grand));
    const double noise = 1e-28 * scale * scale * static_cast<double>(total);
    const bool no_between = r.ss_between <= noise;
    const bool no_within = r.ss_within <= noise;
    if (no_between) {
        r.f = 0;
        r.p = 1;
        r.ss_between = 0;
        return r;
    }
    if (no_within) {
        r.f = std::numeric_limits<double>::infinity();
        r.p = 0;
        return r;
    }
    r.f = (r.ss_between / static_cast<double>(r.df_between)) / (r.ss_within / static_cast<double>(r.df_within));
    r.p = f_survival(r.f, static_cast<double>(r.df_between), static_cast<double>(r.df_within));
    return r;
}

} // namespace lefm::metrics
