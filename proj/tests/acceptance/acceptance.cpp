// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "lefm/data/synthetic.hpp"
#include "lefm/exponent_table.hpp"
#include "lefm/lefm_layer.hpp"
#include "lefm/metrics/agreement.hpp"
#include "lefm/metrics/anova.hpp"
#include "lefm/metrics/classification.hpp"
#include "lefm/nn/mini_unet.hpp"
#include "lefm/train/checkpoint.hpp"
#include "lefm/train/coefficients.hpp"
#include "lefm/train/experiment.hpp"

namespace fs = std::filesystem;

namespace {

// Pinned tolerances and limits.
constexpr double kMaskRelTol = 1e-12;
constexpr double kLayerGradTol = 1e-5;
constexpr double kEndToEndGradTol = 1e-4;
constexpr double kGradFloor = 1e-8; // absolute scale below which gradients count as zero
constexpr std::size_t kMaxKinks = 10;
constexpr double kKappaTol = 1e-9;
constexpr double kAnovaF = 13.5;
constexpr double kAnovaFTol = 1e-9;
constexpr double kAnovaP = 0.0213;
constexpr double kAnovaPTol = 1e-3;
constexpr std::size_t kLefmWeights = 2468;
constexpr std::size_t kBatchNormWeights = 40;
constexpr double kMinLefmBacc = 0.85;
constexpr int kInterpretSeedsNeeded = 4;
constexpr std::size_t kInterpretTopK = 5;
constexpr double kReferenceCores = 8;
constexpr double kReferenceBudgetSeconds = 30 * 60;

// Scaled-down experiment setup.
constexpr std::size_t kSynthImages = 200;
constexpr std::size_t kSynthSize = 64;
constexpr std::uint64_t kSynthSeed = 0;
constexpr int kMaxAbEpochs = 300;
constexpr int kAbEpochs = 150; // keeps 15 runs well inside the budget on one core
// 32x32 patches give four optimizer steps per image per epoch; with one step
// per 64x64 image, runs can sit on the all-positive plateau past early stopping.
constexpr int kAbPatch = 32;

struct Outcome {
    bool pass;
    std::string detail;
};

struct Criterion {
    std::string name;
    double limit_s;
    std::function<Outcome()> run;
};

std::string fmt(double v, int precision = 6)
{
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

double rel_err(double a, double b, double floor)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Pascal's triangle, independent of the library's binomial.
std::uint64_t pascal(int n, int k)
{
    std::vector<std::vector<std::uint64_t>> c(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
        c[i].assign(static_cast<std::size_t>(i) + 1, 1);
        for (int j = 1; j < i; ++j)
            c[i][j] = c[i - 1][j - 1] + c[i - 1][j];
    }
    return c[n][k];
}

Outcome dimension_law()
{
    int checked = 0;
    for (int d = 1; d <= 8; ++d) {
        for (int m = 1; m <= 5; ++m) {
            const auto t = lefm::enumerate_exponents(d, m);
            if (t.size() != pascal(d + m, m))
                return {false, "D(" + std::to_string(d) + "," + std::to_string(m) + ") = " + std::to_string(t.size())};
            ++checked;
        }
    }
    const auto d32 = lefm::enumerate_exponents(3, 2).size(), d33 = lefm::enumerate_exponents(3, 3).size();
    return {d32 == 10 && d33 == 20,
            std::to_string(checked) + " (d,m) pairs; D(3,2)=" + std::to_string(d32) + " D(3,3)=" + std::to_string(d33)};
}

Outcome mask_equivalence()
{
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_int_distribution<int> dd(1, 8), mm(1, 5);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = dd(rng), m = mm(rng);
        const auto table = lefm::enumerate_exponents(d, m);
        std::vector<double> x(static_cast<std::size_t>(d));
        for (auto& v : x)
            v = u(rng);
        const auto masked = lefm::psi_from_masks<double>(table, x);
        for (std::size_t r = 0; r < table.size(); ++r) {
            double direct = 1;
            for (int k = 0; k < d; ++k)
                direct *= std::pow(x[k], table.exponent(r)[k]);
            worst = std::max(worst, rel_err(masked[r], direct, 1e-300));
        }
    }
    return {worst <= kMaskRelTol, "1000 inputs, max relative error " + fmt(worst)};
}

double layer_gradient_error()
{
    using Img = lefm::Image<double>;
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-1, 1), pos(0.1, 1.0);
    auto objective = [](const lefm::LefmLayer<double>& layer, const Img& x, const Img& up) {
        const auto y = lefm::lefm_forward(layer, x);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i)
            s += y.data()[i] * up.data()[i];
        return s;
    };
    const double h = 1e-5;
    double worst = 0;
    for (int m : {1, 2, 3}) {
        for (bool bn : {false, true}) {
            auto layer = lefm::LefmLayer<double>::create(lefm::enumerate_exponents(3, m), 7, bn);
            for (auto& v : layer.coefficients)
                v = u(rng);
            Img x(3, 4, 3), up(3, 4, layer.terms());
            for (auto& v : x.data())
                v = pos(rng);
            for (auto& v : up.data())
                v = u(rng);
            const auto g = lefm::lefm_backward(layer, x, up);
            for (std::size_t r = 0; r < layer.terms(); ++r) {
                auto lp = layer, lm = layer;
                lp.coefficients[r] += h;
                lm.coefficients[r] -= h;
                const double fd = (objective(lp, x, up) - objective(lm, x, up)) / (2 * h);
                worst = std::max(worst, rel_err(g.coefficients[r], fd, 1e-12));
            }
            for (std::size_t i = 0; i < x.size(); ++i) {
                auto xp = x, xm = x;
                xp.data()[i] += h;
                xm.data()[i] -= h;
                const double fd = (objective(layer, xp, up) - objective(layer, xm, up)) / (2 * h);
                worst = std::max(worst, rel_err(g.input.data()[i], fd, 1e-12));
            }
        }
    }
    return worst;
}

// Analytic gradients of the double network against central differences taken
// on an identical long double copy, sampled over every parameter tensor.
double end_to_end_gradient_error(std::size_t& checked, std::size_t& kinks)
{
    using Ld = long double;
    using lefm::nn::Tensor;
    double worst = 0;
    for (bool bn : {false, true}) {
        lefm::nn::SegmentationNet<double> net(3, 2, bn, 41);
        lefm::nn::SegmentationNet<Ld> oracle(3, 2, bn, 41);
        auto params = net.parameters();
        auto oracle_params = oracle.parameters();
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k].tensor.numel(); ++i)
                oracle_params[k].tensor.values()[i] = params[k].tensor.values()[i];

        std::mt19937_64 rng(42);
        std::uniform_real_distribution<double> pos(0.1, 1.0);
        std::bernoulli_distribution coin(0.5);
        std::vector<double> xv(3 * 8 * 8), target(64);
        for (auto& v : xv)
            v = pos(rng);
        for (auto& v : target)
            v = coin(rng) ? 1.0 : 0.0;
        auto x = Tensor<double>::from_values({1, 3, 8, 8}, xv);
        auto xl = Tensor<Ld>::from_values({1, 3, 8, 8}, std::vector<Ld>(xv.begin(), xv.end()));
        const std::vector<Ld> target_l(target.begin(), target.end());

        for (auto& p : params)
            p.tensor.zero_grad();
        auto loss = lefm::nn::dice_loss<double>(net.forward(x, true), target);
        lefm::nn::backward(loss);

        auto buffers = oracle.buffers();
        std::vector<std::vector<Ld>> saved;
        for (auto& b : buffers)
            saved.push_back(*b.second);
        auto oracle_loss = [&] {
            for (std::size_t i = 0; i < buffers.size(); ++i)
                *buffers[i].second = saved[i];
            lefm::nn::NoGradGuard ng;
            return lefm::nn::dice_loss<Ld>(oracle.forward(xl, true), target_l).item();
        };

        const Ld h = 1e-6L;
        auto central = [&](Tensor<Ld>& q, std::size_t i, Ld step) {
            const Ld orig = q.values()[i];
            q.values()[i] = orig + step;
            const Ld fp = oracle_loss();
            q.values()[i] = orig - step;
            const Ld fm = oracle_loss();
            q.values()[i] = orig;
            return static_cast<double>((fp - fm) / (2 * step));
        };
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& q = oracle_params[k].tensor;
            std::vector<double> analytic(params[k].tensor.grad().begin(), params[k].tensor.grad().end());
            std::vector<std::size_t> idx(q.numel());
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(std::min<std::size_t>(idx.size(), 20));
            for (std::size_t i : idx) {
                const double fd = central(q, i, h);
                const double err = rel_err(analytic[i], fd, kGradFloor);
                if (err > kEndToEndGradTol) {
                    // a ReLU or max-pool switch inside [w-h, w+h] makes the
                    // difference quotient depend on h
                    const double fd_half = central(q, i, h / 2);
                    if (rel_err(fd, fd_half, kGradFloor) > kEndToEndGradTol) {
                        ++kinks;
                        continue;
                    }
                }
                worst = std::max(worst, err);
                ++checked;
            }
        }
    }
    return worst;
}

Outcome gradient_suite()
{
    const double layer = layer_gradient_error();
    std::size_t checked = 0, kinks = 0;
    const double e2e = end_to_end_gradient_error(checked, kinks);
    return {layer <= kLayerGradTol && e2e <= kEndToEndGradTol && kinks <= kMaxKinks,
            "layer max rel " + fmt(layer, 3) + ", end-to-end max rel " + fmt(e2e, 3) + " over " + std::to_string(checked) +
                " sampled weights, " + std::to_string(kinks) + " skipped at activation kinks"};
}

Outcome metric_oracles()
{
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> len(1, 300);
    std::uniform_real_distribution<double> rate(0.0, 1.0);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = len(rng);
        std::bernoulli_distribution p(rate(rng)), t(rate(rng));
        std::vector<std::uint8_t> pred(n), target(n);
        for (std::size_t i = 0; i < n; ++i) {
            pred[i] = p(rng);
            target[i] = t(rng);
        }
        long tp = 0, tn = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (pred[i] && target[i])
                ++tp;
            else if (!pred[i] && !target[i])
                ++tn;
            else if (pred[i])
                ++fp;
            else
                ++fn;
        }
        const auto c = lefm::metrics::confusion(pred, target);
        auto same = [](double got, long num, long den) { return den == 0 ? got == 0 : got == double(num) / double(den); };
        const double se = tp + fn ? double(tp) / double(tp + fn) : 0, sp = tn + fp ? double(tn) / double(tn + fp) : 0;
        if (!same(lefm::metrics::f1(c).value, 2 * tp, 2 * tp + fp + fn) ||
            !same(lefm::metrics::precision(c).value, tp, tp + fp) || lefm::metrics::bacc(c).value != (se + sp) / 2)
            ++mismatches;
    }

    // Fleiss' kappa against the textbook formula in long double.
    double kappa_err = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<std::size_t> items_d(2, 30), cats_d(2, 5), raters_d(2, 7);
        const std::size_t items = items_d(rng), cats = cats_d(rng), raters = raters_d(rng);
        std::vector<std::uint64_t> counts(items * cats, 0);
        std::uniform_int_distribution<std::size_t> pick(0, cats - 1);
        for (std::size_t i = 0; i < items; ++i)
            for (std::size_t r = 0; r < raters; ++r)
                ++counts[i * cats + pick(rng)];
        long double pbar = 0, pe = 0;
        for (std::size_t i = 0; i < items; ++i) {
            long double s = 0;
            for (std::size_t j = 0; j < cats; ++j)
                s += static_cast<long double>(counts[i * cats + j]) * (counts[i * cats + j] - 1.0L);
            pbar += s / (raters * (raters - 1.0L));
        }
        pbar /= items;
        for (std::size_t j = 0; j < cats; ++j) {
            long double pj = 0;
            for (std::size_t i = 0; i < items; ++i)
                pj += counts[i * cats + j];
            pj /= static_cast<long double>(items * raters);
            pe += pj * pj;
        }
        if (pe >= 1)
            continue;
        const double oracle = static_cast<double>((pbar - pe) / (1 - pe));
        kappa_err = std::max(kappa_err, std::abs(lefm::metrics::fleiss_kappa(counts, cats, raters).kappa - oracle));
    }
    const std::vector<std::uint64_t> perfect{3, 0, 0, 3, 3, 0, 0, 3};
    const double kappa_perfect = lefm::metrics::fleiss_kappa(perfect, 2, 3).kappa;

    const std::vector<std::vector<double>> groups{{1, 2, 3}, {4, 5, 6}};
    const auto anova = lefm::metrics::one_way_anova(groups);

    const bool pass = mismatches == 0 && kappa_err <= kKappaTol && kappa_perfect == 1.0 &&
                      std::abs(anova.f - kAnovaF) <= kAnovaFTol && std::abs(anova.p - kAnovaP) <= kAnovaPTol;
    return {pass, "confusion mismatches " + std::to_string(mismatches) + "/1000, kappa max err " + fmt(kappa_err, 3) +
                      ", perfect kappa " + fmt(kappa_perfect) + ", ANOVA F " + fmt(anova.f) + " p " + fmt(anova.p, 4)};
}

Outcome parameter_bookkeeping()
{
    const lefm::nn::SegmentationNet<float> base(3, 0, false, 1), plain(3, 3, false, 1), normed(3, 3, true, 1);
    const std::size_t added = plain.parameter_count() - base.parameter_count();
    const std::size_t bn = normed.parameter_count() - plain.parameter_count();
    return {added == kLefmWeights && bn == kBatchNormWeights,
            "baseline " + std::to_string(base.parameter_count()) + ", +" + std::to_string(added) + " with LEFM(3,3), +" +
                std::to_string(bn) + " with batch norm"};
}

Outcome determinism(const std::string& cli, const fs::path& work)
{
    const fs::path dir = work / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto sh = [&](const std::string& args) {
        const std::string cmd = "LEFM_THREADS=1 " + cli + " " + args + " >/dev/null 2>>" + (dir / "stderr.txt").string();
        return std::system(cmd.c_str());
    };
    const std::string common = " --no-checkpoints --seed 3 --m 2 --set patch_size=16 --set stride=16"
                               " --set eval_stride=16 --set max_epochs=4 --set batch_size=4 --set threads=1";
    if (sh("synth --out " + (dir / "ds").string() + " --n 16 --height 32 --width 32 --seed 5") != 0 ||
        sh("train --dataset " + (dir / "ds").string() + " --out " + (dir / "a").string() + common) != 0 ||
        sh("train --dataset " + (dir / "ds").string() + " --out " + (dir / "b").string() + common) != 0)
        return {false, "CLI invocation failed, see " + (dir / "stderr.txt").string()};
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const auto a = slurp(dir / "a" / "runs.csv"), b = slurp(dir / "b" / "runs.csv");
    const bool pass = !a.empty() && a == b;
    fs::remove_all(dir);
    return {pass, pass ? "runs.csv byte-identical (" + std::to_string(a.size()) + " bytes)" : "runs.csv differs"};
}

struct ExperimentRuns {
    double seconds = 0;
    std::vector<lefm::metrics::RunReport> product;
    std::vector<std::vector<std::string>> mix_top; // top labels per seed
    std::vector<std::string> failures;
};

lefm::train::TrainConfig ab_config(int epochs)
{
    lefm::train::TrainConfig cfg;
    cfg.max_epochs = epochs;
    cfg.seeds = {1, 2, 3, 4, 5};
    cfg.threads = 0;
    cfg.patch_size = cfg.stride = cfg.eval_stride = kAbPatch;
    return cfg;
}

ExperimentRuns run_experiments(const fs::path& work, int epochs)
{
    ExperimentRuns out;
    const auto t0 = std::chrono::steady_clock::now();
    auto progress = [](const lefm::metrics::RunReport& r) {
        std::cerr << "  " << r.model << " seed " << r.seed << ": " << r.status << " BACC " << r.bacc << " epochs "
                  << r.epochs << std::endl;
    };

    {
        lefm::data::SyntheticConfig sc;
        sc.n_images = kSynthImages;
        sc.height = sc.width = kSynthSize;
        sc.rule = lefm::data::SyntheticRule::product;
        sc.seed = kSynthSeed;
        const auto samples = lefm::data::generate_synthetic(sc);
        auto cfg = ab_config(epochs);
        cfg.m = {0, 2};
        const auto split = lefm::data::make_split(samples, cfg.test_fraction, cfg.split_seed, cfg.val_fraction);
        lefm::train::ExperimentOptions opt;
        opt.out_dir = work / "product";
        opt.save_checkpoints = false;
        opt.on_run = progress;
        out.product = lefm::train::run_experiment(cfg, samples, split, opt).runs;
    }
    {
        lefm::data::SyntheticConfig sc;
        sc.n_images = kSynthImages;
        sc.height = sc.width = kSynthSize;
        sc.rule = lefm::data::SyntheticRule::mix;
        sc.seed = kSynthSeed;
        const auto samples = lefm::data::generate_synthetic(sc);
        auto cfg = ab_config(epochs);
        cfg.m = {2};
        const auto split = lefm::data::make_split(samples, cfg.test_fraction, cfg.split_seed, cfg.val_fraction);
        lefm::train::ExperimentOptions opt;
        opt.out_dir = work / "mix";
        opt.on_run = progress;
        const auto runs = lefm::train::run_experiment(cfg, samples, split, opt).runs;
        for (const auto& r : runs) {
            if (r.status != "ok") {
                out.failures.push_back("mix seed " + std::to_string(r.seed) + ": " + r.message);
                continue;
            }
            const auto ck = lefm::train::load_checkpoint(opt.out_dir / "checkpoints" /
                                                         ("lefm_m2_seed" + std::to_string(r.seed) + ".ckpt"));
            out.mix_top.push_back(lefm::train::top_labels(lefm::train::report_coefficients(ck), kInterpretTopK));
        }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

double budget_seconds()
{
    const unsigned cores = lefm::train::resolve_threads(0);
    return kReferenceBudgetSeconds * kReferenceCores / std::min<double>(cores, kReferenceCores);
}

Outcome scaled_ab(const ExperimentRuns& runs)
{
    std::vector<double> base, ext;
    int failed = 0;
    for (const auto& r : runs.product) {
        if (r.status != "ok") {
            ++failed;
            continue;
        }
        (r.m == 0 ? base : ext).push_back(r.bacc);
    }
    if (base.empty() || ext.empty())
        return {false, "no successful runs in one of the arms"};
    const double mb = std::accumulate(base.begin(), base.end(), 0.0) / double(base.size());
    const double me = std::accumulate(ext.begin(), ext.end(), 0.0) / double(ext.size());
    const double budget = budget_seconds();
    const bool pass = failed == 0 && me >= mb && me >= kMinLefmBacc && runs.seconds <= budget;
    return {pass, "mean BACC lefm_m2 " + fmt(me, 4) + " vs baseline " + fmt(mb, 4) + ", failed runs " +
                      std::to_string(failed) + ", wall " + fmt(runs.seconds, 4) + " s of " + fmt(budget, 4) +
                      " s budget"};
}

Outcome interpretability(const ExperimentRuns& runs)
{
    int hits = 0;
    std::string tops;
    for (const auto& top : runs.mix_top) {
        const bool rg = std::find(top.begin(), top.end(), "RG") != top.end();
        const bool bb = std::find(top.begin(), top.end(), "B²") != top.end();
        hits += rg && bb;
        tops += " [";
        for (std::size_t i = 0; i < top.size(); ++i)
            tops += (i ? " " : "") + top[i];
        tops += "]";
    }
    return {hits >= kInterpretSeedsNeeded && runs.failures.empty(),
            "RG and B² in top-" + std::to_string(kInterpretTopK) + " for " + std::to_string(hits) + "/5 seeds:" + tops};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance gate"};
    std::string only;
    std::string cli = LEFM_CLI_PATH;
    std::string work = (fs::temp_directory_path() / "lefm_acceptance").string();
    int epochs = kAbEpochs;
    app.add_option("--only", only, "Run criteria whose name contains this text");
    app.add_option("--cli", cli, "Path of the lefm executable")->capture_default_str();
    app.add_option("--work", work, "Scratch directory")->capture_default_str();
    app.add_option("--epochs", epochs, "Epoch cap of the experiment runs")
        ->check(CLI::Range(1, kMaxAbEpochs))
        ->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    ExperimentRuns experiments;
    bool experiments_done = false;
    auto experiments_once = [&]() -> const ExperimentRuns& {
        if (!experiments_done) {
            experiments = run_experiments(work, epochs);
            experiments_done = true;
        }
        return experiments;
    };

    const std::vector<Criterion> criteria{
        {"dimension law", 1, dimension_law},
        {"mask equivalence", 1, mask_equivalence},
        {"gradient suite", 60, gradient_suite},
        {"metric oracles", 10, metric_oracles},
        {"parameter bookkeeping", 1, parameter_bookkeeping},
        {"determinism", 120, [&] { return determinism(cli, work); }},
        {"scaled A/B", budget_seconds(), [&] { return scaled_ab(experiments_once()); }},
        {"interpretability", budget_seconds(), [&] { return interpretability(experiments_once()); }},
    };

    fs::create_directories(work);
    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && c.name.find(only) == std::string::npos)
            continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = s <= c.limit_s;
        const bool pass = o.pass && in_time;
        failures += !pass;
        std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " (" << fmt(s, 3) << " s"
                  << (in_time ? "" : ", over the " + fmt(c.limit_s, 4) + " s limit") << ")" << std::endl;
    }
    fs::remove_all(work);
    return failures == 0 ? 0 : 1;
}
