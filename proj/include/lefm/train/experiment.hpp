#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/data/split.hpp"
#include "lefm/metrics/anova.hpp"
#include "lefm/metrics/report.hpp"
#include "lefm/train/checkpoint.hpp"
#include "lefm/train/config.hpp"
#include "lefm/train/trainer.hpp"
#include "lefm/version.hpp"

namespace lefm::train {

/// Worker count: the configured value (0 = hardware concurrency), capped by
/// the LEFM_THREADS environment variable when set.
inline unsigned resolve_threads(int configured)
{
    unsigned n = configured > 0 ? static_cast<unsigned>(configured) : std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("LEFM_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || cap < 1)
            throw ConfigError("LEFM_THREADS must be a positive integer, got '" + std::string(env) + "'");
        n = std::min(n, static_cast<unsigned>(cap));
    }
    return n;
}

struct MeanStd {
    double mean = 0;
    double std = 0; // sample standard deviation (n - 1)
    std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v)
{
    MeanStd r;
    r.n = v.size();
    if (v.empty())
        return r;
    for (double x : v)
        r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v)
            ss += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

inline const std::vector<std::string>& summary_metrics()
{
    static const std::vector<std::string> names{"BACC", "F1", "PREC", "SE", "SP"};
    return names;
}

inline const std::vector<std::string>& tested_metrics()
{
    static const std::vector<std::string> names{"BACC", "F1", "PREC"};
    return names;
}

inline double metric_of(const metrics::RunReport& r, const std::string& name)
{
    if (name == "BACC")
        return r.bacc;
    if (name == "F1")
        return r.f1;
    if (name == "PREC")
        return r.prec;
    if (name == "SE")
        return r.se;
    if (name == "SP")
        return r.sp;
    throw ConfigError("unknown metric '" + name + "' (expected BACC, F1, PREC, SE or SP)");
}

struct ArmSummary {
    std::string model;
    int m = 0;
    std::size_t ok = 0;
    std::size_t failed = 0;
    std::vector<std::pair<std::string, MeanStd>> stats;
};

struct ExperimentSummary {
    std::vector<ArmSummary> arms;
    nlohmann::json verdicts = nlohmann::json::array();
    std::string config_hash;

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["version"] = kVersion;
        j["config_hash"] = config_hash;
        j["std_convention"] = "sample standard deviation (n-1)";
        j["arms"] = nlohmann::json::array();
        for (const auto& a : arms) {
            nlohmann::json arm{{"model", a.model}, {"m", a.m}, {"runs_ok", a.ok}, {"runs_failed", a.failed},
                               {"complete", a.failed == 0}};
            for (const auto& [name, s] : a.stats)
                arm["metrics"][name] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
            j["arms"].push_back(arm);
        }
        j["anova"] = verdicts;
        return j;
    }

    std::string to_markdown() const
    {
        std::ostringstream o;
        o << "| Model |";
        for (const auto& m : summary_metrics())
            o << ' ' << m << " |";
        o << " Runs |\n|---|";
        for (std::size_t i = 0; i < summary_metrics().size(); ++i)
            o << "---|";
        o << "---|\n";
        char buf[64];
        for (const auto& a : arms) {
            o << "| " << a.model << " |";
            for (const auto& [name, s] : a.stats) {
                std::snprintf(buf, sizeof buf, " %.4f ± %.4f |", s.mean, s.std);
                o << buf;
            }
            o << ' ' << a.ok << (a.failed ? " (+" + std::to_string(a.failed) + " failed)" : std::string()) << " |\n";
        }
        o << "\nMean ± sample standard deviation over seeds. version " << kVersion << ", config " << config_hash << "\n";
        return o.str();
    }
};

/// Per-arm statistics and baseline-vs-arm ANOVA on BACC, F1 and PREC.
inline ExperimentSummary summarize(const std::vector<metrics::RunReport>& runs, const std::string& hash)
{
    ExperimentSummary s;
    s.config_hash = hash;
    for (const auto& r : runs) {
        auto it = std::find_if(s.arms.begin(), s.arms.end(), [&](const auto& a) { return a.model == r.model; });
        if (it == s.arms.end()) {
            s.arms.push_back({r.model, r.m, 0, 0, {}});
            it = s.arms.end() - 1;
        }
        (r.status == "ok" ? it->ok : it->failed)++;
    }
    auto values = [&](const std::string& model, const std::string& metric) {
        std::vector<double> v;
        for (const auto& r : runs)
            if (r.model == model && r.status == "ok")
                v.push_back(metric_of(r, metric));
        return v;
    };
    for (auto& a : s.arms)
        for (const auto& name : summary_metrics())
            a.stats.emplace_back(name, mean_std(values(a.model, name)));

    const std::string base = metrics::model_name(0);
    const bool has_base = std::any_of(s.arms.begin(), s.arms.end(), [&](const auto& a) { return a.model == base; });
    if (!has_base)
        return s;
    for (const auto& a : s.arms) {
        if (a.model == base)
            continue;
        for (const auto& metric : tested_metrics()) {
            const std::vector<std::vector<double>> groups{values(base, metric), values(a.model, metric)};
            try {
                s.verdicts.push_back(metrics::anova_verdict_json(metric, {base, a.model}, metrics::one_way_anova(groups)));
            } catch (const Error& e) {
                s.verdicts.push_back({{"metric", metric}, {"groups", {base, a.model}}, {"error", e.what()}});
            }
        }
    }
    return s;
}

struct ExperimentResult {
    std::vector<metrics::RunReport> runs; // ordered by m, then seed
    ExperimentSummary summary;
};

struct ExperimentOptions {
    std::filesystem::path out_dir;                         // empty: write nothing
    bool save_checkpoints = true;
    std::function<void(const metrics::RunReport&)> on_run; // progress, called under a lock
};

/// Runs every (m, seed) pair. Runs execute on a small worker pool but results
/// are stored and written in a fixed order.
inline ExperimentResult run_experiment(const TrainConfig& cfg, std::span<const data::AnnotatedSample> samples,
                                       const data::SplitSpec& split, const ExperimentOptions& opt = {})
{
    validate(cfg);
    const PreparedData prepared = prepare_data(samples, split, cfg);
    struct Job {
        int m;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (int m : cfg.m)
        for (auto seed : cfg.seeds)
            jobs.push_back({m, seed});

    if (!opt.out_dir.empty())
        std::filesystem::create_directories(opt.out_dir / "checkpoints");

    std::vector<metrics::RunReport> runs(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex lock;
    std::exception_ptr error;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= jobs.size())
                return;
            try {
                auto res = train_one(cfg, prepared, jobs[i].m, jobs[i].seed);
                if (!opt.out_dir.empty() && opt.save_checkpoints)
                    save_checkpoint(opt.out_dir / "checkpoints" /
                                        (res.report.model + "_seed" + std::to_string(jobs[i].seed) + ".ckpt"),
                                    res.checkpoint);
                std::lock_guard g(lock);
                runs[i] = std::move(res.report);
                if (opt.on_run)
                    opt.on_run(runs[i]);
            } catch (...) {
                std::lock_guard g(lock);
                if (!error)
                    error = std::current_exception();
                next = jobs.size();
            }
        }
    };
    const unsigned n_threads = std::min<unsigned>(resolve_threads(cfg.threads), static_cast<unsigned>(jobs.size()));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
    }
    if (error)
        std::rethrow_exception(error);

    ExperimentResult result{runs, summarize(runs, config_hash(cfg))};
    if (!opt.out_dir.empty()) {
        metrics::write_runs_csv(opt.out_dir / "runs.csv", runs);
        std::ofstream(opt.out_dir / "summary.json", std::ios::binary) << result.summary.to_json().dump(2) << "\n";
        std::ofstream(opt.out_dir / "summary.md", std::ios::binary) << result.summary.to_markdown();
        nlohmann::json splitj = split;
        std::ofstream(opt.out_dir / "split.json", std::ios::binary) << splitj.dump(2) << "\n";
        std::ofstream timings(opt.out_dir / "timings.csv", std::ios::binary);
        timings << "model,seed,wall_time_s\n";
        for (const auto& r : runs)
            timings << r.model << ',' << r.seed << ',' << metrics::format_double(r.wall_time_s) << '\n';
    }
    return result;
}

} // namespace lefm::train
