#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "lefm/error.hpp"

namespace lefm::metrics {

/// Pixel counts pooled over everything evaluated.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept
    {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Value with a flag set when the denominator was zero (value is then 0).
struct Metric {
    double value = 0;
    bool degenerate = false;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target)
{
    if (pred.size() != target.size())
        throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " entries, target " +
                         std::to_string(target.size()));
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] > 1 || target[i] > 1)
            throw DataError("confusion: non-binary value at index " + std::to_string(i));
        if (pred[i])
            ++(target[i] ? c.tp : c.fp);
        else
            ++(target[i] ? c.fn : c.tn);
    }
    return c;
}

namespace detail {
inline Metric ratio(std::uint64_t num, std::uint64_t den)
{
    if (den == 0)
        return {0.0, true};
    return {static_cast<double>(num) / static_cast<double>(den), false};
}
} // namespace detail

inline Metric f1(const ConfusionCounts& c) { return detail::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
inline Metric precision(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fp); }
inline Metric sensitivity(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fn); }
inline Metric specificity(const ConfusionCounts& c) { return detail::ratio(c.tn, c.tn + c.fp); }

/// Mean of sensitivity and specificity. Degenerate when either class is empty;
/// the defined half is still averaged with 0.
inline Metric bacc(const ConfusionCounts& c)
{
    const Metric se = sensitivity(c), sp = specificity(c);
    return {(se.value + sp.value) / 2, se.degenerate || sp.degenerate};
}

/// Same as bacc but raises when a class is empty.
inline double bacc_strict(const ConfusionCounts& c)
{
    const Metric m = bacc(c);
    if (m.degenerate)
        throw NumericError("balanced accuracy undefined: positive or negative class is empty");
    return m.value;
}

} // namespace lefm::metrics
