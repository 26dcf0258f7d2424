#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/error.hpp"

namespace lefm {

inline constexpr int kMaxInputDims = 16;
inline constexpr int kMaxOrder = 8;
inline constexpr std::size_t kMaxTerms = 100000;

/// Binomial coefficient C(n, k), saturating at UINT64_MAX.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) noexcept
{
    if (k > n)
        return 0;
    k = std::min(k, n - k);
    std::uint64_t result = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        // result * (n - k + i) is always divisible by i
        const unsigned __int128 next = static_cast<unsigned __int128>(result) * (n - k + i) / i;
        if (next > UINT64_MAX)
            return UINT64_MAX;
        result = static_cast<std::uint64_t>(next);
    }
    return result;
}

/// Ordered monomial basis of total degree <= m in d variables.
///
/// Rows are sorted in graded lexicographic order: total degree ascending, then
/// exponent tuples in descending lexicographic order, so for d = 2, m = 2 the
/// rows are 1, x1, x2, x1^2, x1 x2, x2^2. Row 0 is always the constant term.
///
/// The term mask holds 1 where a feature participates in a monomial; the power
/// mask holds the exponents. Raising the selected features to the power mask
/// and multiplying across each row yields the monomials.
///
/// For fast evaluation every row r > 0 also records a parent row and a factor
/// index such that monomial(r) = monomial(parent(r)) * x[factor(r)].
class ExponentTable {
public:
    ExponentTable() = default;

    static ExponentTable enumerate(int d, int m)
    {
        if (d < 1 || d > kMaxInputDims)
            throw ConfigError("input feature count d=" + std::to_string(d) + " outside [1, " +
                              std::to_string(kMaxInputDims) + "]");
        if (m < 1 || m > kMaxOrder)
            throw ConfigError("expansion order m=" + std::to_string(m) + " outside [1, " +
                              std::to_string(kMaxOrder) + "]");
        const std::uint64_t terms = binomial(static_cast<std::uint64_t>(d + m), static_cast<std::uint64_t>(m));
        if (terms > kMaxTerms)
            throw ConfigError("term count C(" + std::to_string(d + m) + "," + std::to_string(m) +
                              ") exceeds " + std::to_string(kMaxTerms));

        ExponentTable t;
        t.d_ = d;
        t.m_ = m;
        t.powers_.reserve(terms * static_cast<std::size_t>(d));
        std::vector<int> q(static_cast<std::size_t>(d), 0);
        for (int degree = 0; degree <= m; ++degree)
            t.emit_degree(q, 0, degree);
        t.finalize();
        return t;
    }

    int input_dims() const noexcept { return d_; }
    int order() const noexcept { return m_; }
    std::size_t size() const noexcept { return degree_.size(); }

    std::span<const int> exponent(std::size_t row) const
    {
        return {powers_.data() + row * static_cast<std::size_t>(d_), static_cast<std::size_t>(d_)};
    }

    int degree(std::size_t row) const { return degree_[row]; }
    std::size_t parent(std::size_t row) const { return parent_[row]; }
    int factor(std::size_t row) const { return factor_[row]; }

    /// D x d row-major exponent matrix.
    const std::vector<int>& power_mask() const noexcept { return powers_; }

    /// D x d row-major 0/1 feature selector.
    const std::vector<int>& term_mask() const noexcept { return selectors_; }

    /// Row index of an exponent vector, or size() when absent.
    std::size_t find(std::span<const int> q) const
    {
        auto it = index_.find(std::vector<int>(q.begin(), q.end()));
        return it == index_.end() ? size() : it->second;
    }

    friend bool operator==(const ExponentTable& a, const ExponentTable& b)
    {
        return a.d_ == b.d_ && a.m_ == b.m_ && a.powers_ == b.powers_;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t r = 0; r < size(); ++r) {
            auto q = exponent(r);
            rows.push_back(std::vector<int>(q.begin(), q.end()));
        }
        return {{"d", d_}, {"m", m_}, {"D", size()}, {"exponents", std::move(rows)}};
    }

    /// Rebuilds the table from its JSON document and verifies the stored rows
    /// match the canonical enumeration.
    static ExponentTable from_json(const nlohmann::json& j)
    {
        try {
            ExponentTable t = enumerate(j.at("d").get<int>(), j.at("m").get<int>());
            if (j.at("D").get<std::size_t>() != t.size())
                throw DataError("exponent table: D does not match C(d+m, m)");
            const auto& rows = j.at("exponents");
            if (rows.size() != t.size())
                throw DataError("exponent table: row count does not match D");
            for (std::size_t r = 0; r < t.size(); ++r) {
                auto expected = t.exponent(r);
                auto got = rows[r].get<std::vector<int>>();
                if (!std::equal(expected.begin(), expected.end(), got.begin(), got.end()))
                    throw DataError("exponent table: row " + std::to_string(r) + " is out of canonical order");
            }
            return t;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("exponent table: malformed JSON: ") + e.what());
        }
    }

private:
    void emit_degree(std::vector<int>& q, int pos, int remaining)
    {
        if (pos == d_ - 1) {
            q[static_cast<std::size_t>(pos)] = remaining;
            powers_.insert(powers_.end(), q.begin(), q.end());
            return;
        }
        for (int v = remaining; v >= 0; --v) {
            q[static_cast<std::size_t>(pos)] = v;
            emit_degree(q, pos + 1, remaining - v);
        }
        q[static_cast<std::size_t>(pos)] = 0;
    }

    void finalize()
    {
        const std::size_t n = powers_.size() / static_cast<std::size_t>(d_);
        selectors_.resize(powers_.size());
        degree_.resize(n);
        parent_.assign(n, 0);
        factor_.assign(n, -1);
        for (std::size_t r = 0; r < n; ++r) {
            auto q = exponent(r);
            degree_[r] = std::accumulate(q.begin(), q.end(), 0);
            for (std::size_t i = 0; i < q.size(); ++i)
                selectors_[r * static_cast<std::size_t>(d_) + i] = q[i] > 0 ? 1 : 0;
            index_.emplace(std::vector<int>(q.begin(), q.end()), r);
        }
        for (std::size_t r = 1; r < n; ++r) {
            std::vector<int> q(exponent(r).begin(), exponent(r).end());
            std::size_t i = 0;
            while (q[i] == 0)
                ++i;
            --q[i];
            parent_[r] = index_.at(q);
            factor_[r] = static_cast<int>(i);
        }
    }

    int d_ = 0;
    int m_ = 0;
    std::vector<int> powers_;
    std::vector<int> selectors_;
    std::vector<int> degree_;
    std::vector<std::size_t> parent_;
    std::vector<int> factor_;
    std::map<std::vector<int>, std::size_t> index_;
};

inline ExponentTable enumerate_exponents(int d, int m) { return ExponentTable::enumerate(d, m); }

inline void to_json(nlohmann::json& j, const ExponentTable& t) { j = t.to_json(); }
inline void from_json(const nlohmann::json& j, ExponentTable& t) { t = ExponentTable::from_json(j); }

/// Human readable monomial labels: (1,0,1) over (R,G,B) -> "RB", (2,1,0) -> "R²G",
/// all-zero -> "1".
inline std::vector<std::string> label_terms(const ExponentTable& table, const std::vector<std::string>& channel_names)
{
    static constexpr const char* kSuperscripts[] = {"⁰", "¹", "²", "³", "⁴", "⁵", "⁶", "⁷", "⁸", "⁹"};
    if (channel_names.size() != static_cast<std::size_t>(table.input_dims()))
        throw ConfigError("label_terms: expected " + std::to_string(table.input_dims()) + " channel names, got " +
                          std::to_string(channel_names.size()));
    std::vector<std::string> labels;
    labels.reserve(table.size());
    for (std::size_t r = 0; r < table.size(); ++r) {
        std::string label;
        auto q = table.exponent(r);
        for (std::size_t i = 0; i < q.size(); ++i) {
            if (q[i] == 0)
                continue;
            label += channel_names[i];
            if (q[i] > 1) {
                for (char digit : std::to_string(q[i]))
                    label += kSuperscripts[digit - '0'];
            }
        }
        labels.push_back(label.empty() ? "1" : label);
    }
    return labels;
}

/// Default channel names: R, G, B for three inputs, otherwise x1..xd.
inline std::vector<std::string> default_channel_names(int d)
{
    if (d == 3)
        return {"R", "G", "B"};
    std::vector<std::string> names;
    for (int i = 1; i <= d; ++i)
        names.push_back("x" + std::to_string(i));
    return names;
}

} // namespace lefm
