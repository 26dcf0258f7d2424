#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lefm/data/dataset.hpp"
#include "lefm/data/split.hpp"
#include "lefm/data/synthetic.hpp"
#include "lefm/error.hpp"
#include "lefm/exponent_table.hpp"
#include "lefm/lefm_layer.hpp"
#include "lefm/metrics/agreement.hpp"
#include "lefm/metrics/anova.hpp"
#include "lefm/metrics/classification.hpp"
#include "lefm/metrics/report.hpp"
#include "lefm/train/checkpoint.hpp"
#include "lefm/train/coefficients.hpp"
#include "lefm/train/config.hpp"
#include "lefm/train/experiment.hpp"
#include "lefm/train/trainer.hpp"
#include "lefm/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lefm;

namespace {

std::string hash_of(const std::string& text)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << text;
}

/// Prints a JSON report and optionally stores it.
void emit(const json& report, const std::string& out)
{
    const std::string text = report.dump(2) + "\n";
    if (!out.empty())
        write_text(out, text);
    std::cout << text;
}

struct SynthArgs {
    std::string out;
    std::string rule = "PRODUCT";
    std::size_t n = 200;
    std::size_t height = 64;
    std::size_t width = 64;
    double noise = 0.02;
    std::uint64_t seed = 0;
    std::optional<double> tau;
    double smoothness = 2.0;
};

int run_synth(const SynthArgs& a)
{
    data::SyntheticConfig cfg{a.n, a.height, a.width, data::parse_rule(a.rule), a.noise, a.seed, a.tau, a.smoothness};
    const auto samples = data::generate_synthetic(cfg);
    data::save_dataset(a.out, samples);
    json report{{"version", kVersion},
                {"rule", data::rule_name(cfg.rule)},
                {"threshold", cfg.threshold.value_or(data::default_threshold(cfg.rule))},
                {"n_images", cfg.n_images},
                {"height", cfg.height},
                {"width", cfg.width},
                {"noise_sigma", cfg.noise_sigma},
                {"smoothness", cfg.smoothness},
                {"seed", cfg.seed}};
    std::uint64_t positives = 0, total = 0;
    for (const auto& s : samples) {
        for (auto v : s.majority_label.data())
            positives += v;
        total += s.majority_label.size();
    }
    report["positive_fraction"] = static_cast<double>(positives) / static_cast<double>(total);
    report["config_hash"] = hash_of(report.dump());
    write_text(fs::path(a.out) / "synth.json", report.dump(2) + "\n");
    std::cout << report.dump(2) << "\n";
    return 0;
}

struct TrainArgs {
    std::string config;
    std::string dataset;
    std::string out;
    std::string split;
    std::optional<std::uint64_t> seed;
    std::optional<int> m;
    std::vector<std::string> overrides;
    bool prenormalized = false;
    bool no_checkpoints = false;
};

int run_train(const TrainArgs& a)
{
    train::TrainConfig cfg = a.config.empty() ? train::TrainConfig{} : train::load_config(a.config);
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        train::set_field(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (a.seed)
        cfg.seeds = {*a.seed};
    if (a.m)
        cfg.m = {*a.m};
    if (a.prenormalized)
        cfg.prenormalized = true;
    for (const auto& w : train::validate(cfg))
        std::cerr << "warning: " << w << "\n";

    const auto samples = data::load_dataset(a.dataset);
    data::SplitSpec split;
    if (!a.split.empty()) {
        std::ifstream in(a.split);
        if (!in)
            throw DataError("cannot open split file " + a.split);
        try {
            split = json::parse(in).get<data::SplitSpec>();
        } catch (const json::exception& e) {
            throw DataError("split file " + a.split + ": " + e.what());
        }
    } else {
        split = data::make_split(samples, cfg.test_fraction, cfg.split_seed, cfg.val_fraction);
    }
    write_text(fs::path(a.out) / "config.txt", train::to_kv(cfg));

    train::ExperimentOptions opt;
    opt.out_dir = a.out;
    opt.save_checkpoints = !a.no_checkpoints;
    opt.on_run = [](const metrics::RunReport& r) {
        std::cerr << r.model << " seed " << r.seed << ": " << r.status << " BACC " << r.bacc << " F1 " << r.f1 << " epochs "
                  << r.epochs << "\n";
    };
    const auto result = train::run_experiment(cfg, samples, split, opt);
    std::cout << result.summary.to_markdown();
    for (const auto& r : result.runs)
        if (r.status != "ok")
            return static_cast<int>(ErrorKind::numeric);
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::string split;
    std::string out;
};

int run_eval(const EvalArgs& a)
{
    const auto ck = train::load_checkpoint(a.checkpoint);
    auto net = train::load_network(ck);
    const auto cfg = train::parse_config(ck.meta.at("config").get<std::string>());
    auto samples = data::load_dataset(a.dataset);
    std::string subset = "all";
    if (!a.split.empty()) {
        std::ifstream in(a.split);
        if (!in)
            throw DataError("cannot open split file " + a.split);
        data::SplitSpec split;
        try {
            split = json::parse(in).get<data::SplitSpec>();
        } catch (const json::exception& e) {
            throw DataError("split file " + a.split + ": " + e.what());
        }
        std::vector<data::AnnotatedSample> test;
        for (const auto& id : split.test)
            for (const auto& s : samples)
                if (s.id == id)
                    test.push_back(s);
        samples = std::move(test);
        subset = "test";
    }
    const auto c = train::evaluate(net, samples, static_cast<std::size_t>(cfg.patch_size),
                                   static_cast<std::size_t>(cfg.eval_stride), static_cast<std::size_t>(cfg.batch_size));
    auto metric = [](const metrics::Metric& m) { return json{{"value", m.value}, {"degenerate", m.degenerate}}; };
    json report{{"version", kVersion},
                {"config_hash", ck.meta.value("config_hash", "")},
                {"checkpoint", fs::path(a.checkpoint).filename().string()},
                {"model", metrics::model_name(ck.meta.at("m").get<int>())},
                {"seed", ck.meta.at("seed")},
                {"subset", subset},
                {"images", samples.size()},
                {"counts", {{"TP", c.tp}, {"TN", c.tn}, {"FP", c.fp}, {"FN", c.fn}}},
                {"BACC", metric(metrics::bacc(c))},
                {"F1", metric(metrics::f1(c))},
                {"PREC", metric(metrics::precision(c))},
                {"SE", metric(metrics::sensitivity(c))},
                {"SP", metric(metrics::specificity(c))}};
    emit(report, a.out);
    return 0;
}

struct ExpandArgs {
    std::string image;
    int d = 3;
    int m = 2;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
    std::string out;
};

int run_expand(const ExpandArgs& a)
{
    if (a.d != 1 && a.d != 3)
        throw ConfigError("expand: --d must be 1 (grayscale) or 3 (RGB) for PNG input");
    const auto bytes = a.d == 3 ? data::read_png_rgb(a.image) : data::read_png_gray(a.image);
    const auto x = data::to_unit_range(bytes);

    LefmLayer<float> layer;
    std::string source;
    std::string hash;
    if (!a.checkpoint.empty()) {
        const auto ck = train::load_checkpoint(a.checkpoint);
        if (ck.meta.at("m").get<int>() == 0)
            throw DataError("checkpoint " + a.checkpoint + " has no LEFM layer");
        auto net = train::load_network(ck);
        layer = net.lefm().layer();
        if (layer.table.input_dims() != a.d || layer.table.order() != a.m)
            throw ConfigError("expand: checkpoint layer has d=" + std::to_string(layer.table.input_dims()) +
                              ", m=" + std::to_string(layer.table.order()));
        source = "checkpoint";
        hash = ck.meta.value("config_hash", "");
    } else if (a.seed) {
        layer = LefmLayer<float>::create(enumerate_exponents(a.d, a.m), *a.seed);
        source = "random(seed=" + std::to_string(*a.seed) + ")";
    } else {
        const auto table = enumerate_exponents(a.d, a.m);
        layer = LefmLayer<float>::with_coefficients(table, std::vector<float>(table.size(), 1.0f));
        source = "ones";
    }
    const auto y = lefm_forward(layer, x);
    const auto labels = label_terms(layer.table, default_channel_names(a.d));
    if (hash.empty())
        hash = hash_of("expand d=" + std::to_string(a.d) + " m=" + std::to_string(a.m) + " " + source);

    const fs::path bin = a.out + ".bin", sidecar = a.out + ".json";
    if (bin.has_parent_path())
        fs::create_directories(bin.parent_path());
    {
        std::ofstream out(bin, std::ios::binary);
        if (!out)
            throw DataError("cannot write " + bin.string());
        out.write(reinterpret_cast<const char*>(y.storage().data()),
                  static_cast<std::streamsize>(y.size() * sizeof(float)));
    }
    json meta{{"shape", {y.height(), y.width(), y.channels()}},
              {"dtype", "float32"},
              {"layout", "HWC"},
              {"byte_order", "little"},
              {"labels", labels},
              {"coefficients", source},
              {"table", layer.table},
              {"version", kVersion},
              {"config_hash", hash}};
    write_text(sidecar, meta.dump(2) + "\n");
    std::cout << "wrote " << bin.string() << " (" << y.height() << "x" << y.width() << "x" << y.channels() << ")\n";
    return 0;
}

struct CoeffArgs {
    std::string checkpoint;
    std::string out;
    std::size_t top = 0;
};

int run_report_coeffs(const CoeffArgs& a)
{
    const auto ck = train::load_checkpoint(a.checkpoint);
    auto rep = train::report_coefficients(ck);
    json j = rep;
    j["seed"] = ck.meta.at("seed");
    j["m"] = ck.meta.at("m");
    if (!a.out.empty())
        write_text(a.out, j.dump(2) + "\n");
    const std::size_t n = a.top ? std::min(a.top, rep.entries.size()) : rep.entries.size();
    std::printf("%-6s %-8s %14s %12s %10s\n", "index", "term", "raw", "abs", "share");
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = rep.entries[i];
        // pad by code points, labels carry UTF-8 superscripts
        const auto width = std::count_if(e.label.begin(), e.label.end(), [](char ch) { return (ch & 0xC0) != 0x80; });
        const std::string label = e.label + std::string(width < 8 ? 8 - width : 0, ' ');
        std::printf("%-6zu %s %14.6g %12.6g %10.4f\n", e.index, label.c_str(), e.raw, e.magnitude, e.importance);
    }
    std::printf("version %s, config %s\n", rep.version.c_str(), rep.config_hash.c_str());
    return 0;
}

struct KappaArgs {
    std::string dataset;
    std::string out;
};

int run_kappa(const KappaArgs& a)
{
    const auto samples = data::load_dataset(a.dataset);
    const std::size_t raters = samples.front().annotator_count();
    if (raters < 2)
        throw DataError("kappa needs at least two annotators per image, dataset has " + std::to_string(raters));
    json per_image = json::array();
    std::vector<std::uint64_t> pooled;
    for (const auto& s : samples) {
        const auto table = metrics::pixel_vote_table(s.annotations);
        const auto k = metrics::fleiss_kappa(table, 2, raters);
        per_image.push_back({{"sample_id", s.id}, {"kappa", k.kappa}, {"p_bar", k.p_bar}, {"p_e", k.p_e}});
        pooled.insert(pooled.end(), table.begin(), table.end());
    }
    const auto k = metrics::fleiss_kappa(pooled, 2, raters);
    json report{{"version", kVersion},
                {"config_hash", hash_of("kappa raters=" + std::to_string(raters))},
                {"raters", raters},
                {"images", per_image},
                {"pooled", {{"kappa", k.kappa}, {"p_bar", k.p_bar}, {"p_e", k.p_e}, {"items", k.items}}}};
    if (!a.out.empty())
        write_text(a.out, report.dump(2) + "\n");
    for (const auto& row : per_image)
        std::printf("%s kappa = %.6f\n", row["sample_id"].get<std::string>().c_str(), row["kappa"].get<double>());
    std::printf("pooled kappa = %.6f\n", k.kappa);
    return 0;
}

struct AnovaArgs {
    std::string runs = "runs.csv";
    std::string metric = "BACC";
    std::string group_a = "baseline";
    std::string group_b;
    std::string out;
};

int run_anova(const AnovaArgs& a)
{
    const auto rows = metrics::read_runs_csv(a.runs);
    std::string hash;
    for (const auto& r : rows)
        if (auto it = r.find("config_hash"); it != r.end())
            hash = it->second;
    const std::vector<std::vector<double>> groups{metrics::metric_column(rows, a.group_a, a.metric),
                                                  metrics::metric_column(rows, a.group_b, a.metric)};
    for (std::size_t g = 0; g < 2; ++g)
        if (groups[g].empty())
            throw DataError("no successful runs for group '" + (g ? a.group_b : a.group_a) + "' in " + a.runs);
    const auto r = metrics::one_way_anova(groups);
    auto verdict = metrics::anova_verdict_json(a.metric, {a.group_a, a.group_b}, r);
    verdict["version"] = kVersion;
    verdict["config_hash"] = hash;
    if (!a.out.empty())
        write_text(a.out, verdict.dump(2) + "\n");
    std::cout << verdict.dump(2) << "\n";
    std::cout << (r.significant() ? "significant" : "not significant") << " at alpha = " << r.alpha << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Learnable explicit feature map toolkit"};
    app.set_version_flag("--version", std::string("lefm ") + kVersion);
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic dataset in the on-disk layout");
    s->add_option("--out", synth.out, "Output dataset directory")->required();
    s->add_option("--rule", synth.rule, "LINEAR, PRODUCT or MIX")->capture_default_str();
    s->add_option("--n", synth.n, "Number of images")->capture_default_str();
    s->add_option("--height", synth.height, "Image height")->capture_default_str();
    s->add_option("--width", synth.width, "Image width")->capture_default_str();
    s->add_option("--noise", synth.noise, "Gaussian image noise sigma")->capture_default_str();
    s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
    s->add_option("--tau", synth.tau, "Rule threshold (rule default when omitted)");
    s->add_option("--smoothness", synth.smoothness, "Field correlation length in pixels")->capture_default_str();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Run the seeded A/B experiment");
    t->add_option("--config", tr.config, "key=value config file")->check(CLI::ExistingFile);
    t->add_option("--dataset", tr.dataset, "Dataset root")->required();
    t->add_option("--out", tr.out, "Output directory")->required();
    t->add_option("--split", tr.split, "Split JSON (generated from the config when omitted)");
    t->add_option("--seed", tr.seed, "Run a single seed");
    t->add_option("--m", tr.m, "Run a single order (0 = no LEFM)");
    t->add_option("--set", tr.overrides, "Override a config field, key=value");
    t->add_flag("--prenormalized", tr.prenormalized, "Attest that images are stain-normalized");
    t->add_flag("--no-checkpoints", tr.no_checkpoints, "Do not write checkpoint files");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Pooled metrics of a checkpoint on a dataset");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
    e->add_option("--dataset", ev.dataset, "Dataset root")->required();
    e->add_option("--split", ev.split, "Restrict to the test ids of this split JSON");
    e->add_option("--out", ev.out, "Write the report JSON here");

    ExpandArgs ex;
    auto* x = app.add_subcommand("expand", "Expand one image into its monomial features");
    x->add_option("--image", ex.image, "PNG image")->required()->check(CLI::ExistingFile);
    x->add_option("--d", ex.d, "Input channels (1 or 3)")->capture_default_str();
    x->add_option("--m", ex.m, "Expansion order")->capture_default_str();
    x->add_option("--checkpoint", ex.checkpoint, "Use learned coefficients from a checkpoint");
    x->add_option("--seed", ex.seed, "Use randomly initialized coefficients");
    x->add_option("--out", ex.out, "Output prefix (<out>.bin and <out>.json)")->required();

    CoeffArgs co;
    auto* c = app.add_subcommand("report-coeffs", "Coefficient importance report");
    c->add_option("--checkpoint", co.checkpoint, "Checkpoint file")->required();
    c->add_option("--out", co.out, "Write the report JSON here");
    c->add_option("--top", co.top, "Print only the top k terms");

    KappaArgs ka;
    auto* k = app.add_subcommand("kappa", "Fleiss kappa per image and pooled");
    k->add_option("--dataset", ka.dataset, "Dataset root")->required();
    k->add_option("--out", ka.out, "Write the report JSON here");

    AnovaArgs an;
    auto* a = app.add_subcommand("anova", "One-way ANOVA between two model groups of runs.csv");
    a->add_option("--runs", an.runs, "runs.csv path")->capture_default_str();
    a->add_option("--metric", an.metric, "BACC, F1, PREC, SE or SP")->capture_default_str();
    a->add_option("--group-a", an.group_a, "First model name")->capture_default_str();
    a->add_option("--group-b", an.group_b, "Second model name")->required();
    a->add_option("--out", an.out, "Write the verdict JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForVersion& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        std::cerr << "E1: " << err.what() << "\n";
        return 1;
    }

    try {
        if (s->parsed())
            return run_synth(synth);
        if (t->parsed())
            return run_train(tr);
        if (e->parsed())
            return run_eval(ev);
        if (x->parsed())
            return run_expand(ex);
        if (c->parsed())
            return run_report_coeffs(co);
        if (k->parsed())
            return run_kappa(ka);
        if (a->parsed())
            return run_anova(an);
    } catch (const Error& err) {
        std::cerr << "E" << err.exit_code() << ": " << err.what() << "\n";
        return err.exit_code();
    } catch (const fs::filesystem_error& err) {
        std::cerr << "E2: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "E3: " << err.what() << "\n";
        return 3;
    }
    return 1;
}
