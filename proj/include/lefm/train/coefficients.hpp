#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/error.hpp"
#include "lefm/exponent_table.hpp"
#include "lefm/train/checkpoint.hpp"

namespace lefm::train {

struct CoefficientEntry {
    std::size_t index = 0;
    std::string label;
    double raw = 0;
    double magnitude = 0;
    double importance = 0; // |a| / sum |a|

    friend bool operator==(const CoefficientEntry&, const CoefficientEntry&) = default;
};

struct CoefficientReport {
    ExponentTable table;
    std::vector<CoefficientEntry> entries; // most important first
    std::string config_hash;
    std::string version;

    friend bool operator==(const CoefficientReport&, const CoefficientReport&) = default;
};

/// Per-term importances sorted by magnitude (ties by index). An all-zero
/// vector gives zero importances.
inline CoefficientReport report_coefficients(const ExponentTable& table, const std::vector<double>& coefficients,
                                             const std::vector<std::string>& channel_names)
{
    if (coefficients.size() != table.size())
        throw ShapeError("coefficient report: " + std::to_string(coefficients.size()) + " coefficients for " +
                         std::to_string(table.size()) + " terms");
    const auto labels = label_terms(table, channel_names);
    double total = 0;
    for (double a : coefficients)
        total += std::abs(a);
    CoefficientReport rep;
    rep.table = table;
    for (std::size_t r = 0; r < coefficients.size(); ++r) {
        const double mag = std::abs(coefficients[r]);
        rep.entries.push_back({r, labels[r], coefficients[r], mag, total > 0 ? mag / total : 0.0});
    }
    std::stable_sort(rep.entries.begin(), rep.entries.end(),
                     [](const auto& a, const auto& b) { return a.magnitude > b.magnitude; });
    return rep;
}

inline CoefficientReport report_coefficients(const Checkpoint& ck, const std::vector<std::string>& channel_names = {})
{
    if (!ck.meta.contains("table") || !ck.find("param/lefm.coefficients"))
        throw DataError("checkpoint has no LEFM layer");
    const auto table = ck.meta.at("table").get<ExponentTable>();
    const auto names = channel_names.empty() ? default_channel_names(table.input_dims()) : channel_names;
    auto rep = report_coefficients(table, ck.at("param/lefm.coefficients").values, names);
    rep.config_hash = ck.meta.value("config_hash", "");
    rep.version = ck.meta.value("version", "");
    return rep;
}

inline void to_json(nlohmann::json& j, const CoefficientEntry& e)
{
    j = {{"index", e.index}, {"label", e.label}, {"raw", e.raw}, {"abs", e.magnitude}, {"normalized", e.importance}};
}

inline void from_json(const nlohmann::json& j, CoefficientEntry& e)
{
    e.index = j.at("index").get<std::size_t>();
    e.label = j.at("label").get<std::string>();
    e.raw = j.at("raw").get<double>();
    e.magnitude = j.at("abs").get<double>();
    e.importance = j.at("normalized").get<double>();
}

inline void to_json(nlohmann::json& j, const CoefficientReport& r)
{
    j = {{"table", r.table}, {"terms", r.entries}, {"config_hash", r.config_hash}, {"version", r.version}};
}

inline void from_json(const nlohmann::json& j, CoefficientReport& r)
{
    try {
        r.table = j.at("table").get<ExponentTable>();
        r.entries = j.at("terms").get<std::vector<CoefficientEntry>>();
        r.config_hash = j.value("config_hash", "");
        r.version = j.value("version", "");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("coefficient report: ") + e.what());
    }
}

/// Labels of the `k` most important terms.
inline std::vector<std::string> top_labels(const CoefficientReport& r, std::size_t k)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(k, r.entries.size()); ++i)
        out.push_back(r.entries[i].label);
    return out;
}

} // namespace lefm::train
