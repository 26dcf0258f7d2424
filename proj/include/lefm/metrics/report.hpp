#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/error.hpp"
#include "lefm/metrics/anova.hpp"
#include "lefm/metrics/classification.hpp"

namespace lefm::metrics {

/// Outcome of one training run. Wall time is kept out of runs.csv so that
/// report files are byte-reproducible.
struct RunReport {
    std::string model;
    int m = 0;
    std::uint64_t seed = 0;
    std::string status = "ok"; // "ok" or "failed"
    std::string message;       // failure diagnostic
    ConfusionCounts counts;
    double bacc = 0, f1 = 0, prec = 0, se = 0, sp = 0;
    int epochs = 0;
    int best_epoch = 0;
    double best_val_loss = 0;
    std::string precision_mode = "float32";
    bool prenormalized = false;
    std::string config_hash;
    std::string version;
    double wall_time_s = 0;

    void set_counts(const ConfusionCounts& c)
    {
        counts = c;
        bacc = metrics::bacc(c).value;
        f1 = metrics::f1(c).value;
        prec = metrics::precision(c).value;
        se = sensitivity(c).value;
        sp = specificity(c).value;
    }
};

inline std::string model_name(int m) { return m == 0 ? "baseline" : "lefm_m" + std::to_string(m); }

/// Shortest decimal that reads back to the same double.
inline std::string format_double(double v)
{
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

inline const std::vector<std::string>& runs_csv_columns()
{
    static const std::vector<std::string> cols{
        "model", "m", "seed", "status", "BACC", "F1", "PREC", "SE", "SP", "TP", "TN", "FP", "FN",
        "epochs", "best_epoch", "best_val_loss", "precision", "prenormalized", "config_hash", "version", "message"};
    return cols;
}

namespace detail {
inline std::string csv_escape(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos)
        return s;
    std::string out = "\"";
    for (char c : s)
        out += c == '"' ? std::string("\"\"") : std::string(1, c == '\n' ? ' ' : c);
    return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cell += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cell += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell += c;
        }
    }
    out.push_back(cell);
    return out;
}
} // namespace detail

inline std::string runs_csv_header()
{
    std::string s;
    for (const auto& c : runs_csv_columns())
        s += (s.empty() ? "" : ",") + c;
    return s + "\n";
}

inline std::string runs_csv_row(const RunReport& r)
{
    std::ostringstream o;
    o << detail::csv_escape(r.model) << ',' << r.m << ',' << r.seed << ',' << r.status << ',' << format_double(r.bacc) << ','
      << format_double(r.f1) << ',' << format_double(r.prec) << ',' << format_double(r.se) << ',' << format_double(r.sp)
      << ',' << r.counts.tp << ',' << r.counts.tn << ',' << r.counts.fp << ',' << r.counts.fn << ',' << r.epochs << ','
      << r.best_epoch << ',' << format_double(r.best_val_loss) << ',' << r.precision_mode << ','
      << (r.prenormalized ? 1 : 0) << ',' << r.config_hash << ',' << r.version << ',' << detail::csv_escape(r.message)
      << '\n';
    return o.str();
}

inline void write_runs_csv(const std::filesystem::path& path, const std::vector<RunReport>& runs)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << runs_csv_header();
    for (const auto& r : runs)
        out << runs_csv_row(r);
}

/// Rows of runs.csv keyed by column name.
inline std::vector<std::map<std::string, std::string>> read_runs_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw DataError(path.string() + ": empty file");
    const auto header = detail::csv_split(line);
    std::vector<std::map<std::string, std::string>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        const auto cells = detail::csv_split(line);
        if (cells.size() != header.size())
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " cells, found " + std::to_string(cells.size()));
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size(); ++i)
            row[header[i]] = cells[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Metric values of the successful runs of one model.
inline std::vector<double> metric_column(const std::vector<std::map<std::string, std::string>>& rows,
                                         const std::string& model, const std::string& metric)
{
    std::vector<double> out;
    for (const auto& row : rows) {
        auto mit = row.find("model");
        if (mit == row.end() || mit->second != model)
            continue;
        auto sit = row.find("status");
        if (sit != row.end() && sit->second != "ok")
            continue;
        auto vit = row.find(metric);
        if (vit == row.end())
            throw DataError("runs table has no column '" + metric + "'");
        try {
            out.push_back(std::stod(vit->second));
        } catch (const std::exception&) {
            throw DataError("runs table: cannot parse " + metric + " value '" + vit->second + "'");
        }
    }
    return out;
}

inline nlohmann::json anova_verdict_json(const std::string& metric, const std::vector<std::string>& groups,
                                         const AnovaResult& r)
{
    nlohmann::json j;
    j["metric"] = metric;
    j["groups"] = groups;
    if (std::isinf(r.f))
        j["F"] = "inf";
    else
        j["F"] = r.f;
    j["p"] = r.p;
    j["significant"] = r.significant();
    j["alpha"] = r.alpha;
    j["df"] = {r.df_between, r.df_within};
    return j;
}

} // namespace lefm::metrics
