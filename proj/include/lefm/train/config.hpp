#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lefm/data/augment.hpp"
#include "lefm/error.hpp"
#include "lefm/metrics/report.hpp"
#include "lefm/rng.hpp"

namespace lefm::train {

struct TrainConfig {
    int max_epochs = 30000;
    double lr0 = 1e-3;
    int plateau_patience = 20;
    double lr_factor = 0.5;
    double lr_min = 1e-6;
    double weight_decay = 1e-4;
    int early_stop_patience = 40;
    int batch_size = 8;
    std::vector<int> m{0, 2, 3};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    data::AugmentationConfig augmentation;
    double val_fraction = 0.2;
    double test_fraction = 0.3;
    std::uint64_t split_seed = 0;
    int patch_size = 64;
    int stride = 64;
    int eval_stride = 64;
    bool use_batch_norm = false;
    bool prenormalized = false;
    int threads = 0; // 0: LEFM_THREADS or hardware concurrency
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& v)
{
    std::string s;
    for (const auto& x : v)
        s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
}

inline std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const std::string t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw ConfigError("config: bad value '" + text + "' for " + key);
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text)
{
    const std::string t = trim(text);
    if (t == "1" || t == "true" || t == "yes" || t == "on")
        return true;
    if (t == "0" || t == "false" || t == "no" || t == "off")
        return false;
    throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text)
{
    std::vector<T> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ','))
        out.push_back(parse_number<T>(key, item));
    if (out.empty())
        throw ConfigError("config: empty list for " + key);
    return out;
}

template <typename T>
std::string format_value(T v)
{
    if constexpr (std::is_integral_v<T>)
        return std::to_string(v);
    else
        return metrics::format_double(v);
}

struct Field {
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

#define LEFM_NUM_FIELD(name, expr)                                                                                       \
    {                                                                                                                    \
        name, Field{[](const TrainConfig& c) { return format_value(c.expr); },                                           \
                    [](TrainConfig& c, const std::string& v) { c.expr = parse_number<decltype(c.expr)>(name, v); } }     \
    }
#define LEFM_BOOL_FIELD(name, expr)                                                                                      \
    {                                                                                                                    \
        name, Field{[](const TrainConfig& c) { return std::string(c.expr ? "true" : "false"); },                        \
                    [](TrainConfig& c, const std::string& v) { c.expr = parse_bool(name, v); } }                         \
    }

inline const std::map<std::string, Field>& fields()
{
    static const std::map<std::string, Field> f{
        LEFM_NUM_FIELD("max_epochs", max_epochs),
        LEFM_NUM_FIELD("lr0", lr0),
        LEFM_NUM_FIELD("plateau_patience", plateau_patience),
        LEFM_NUM_FIELD("lr_factor", lr_factor),
        LEFM_NUM_FIELD("lr_min", lr_min),
        LEFM_NUM_FIELD("weight_decay", weight_decay),
        LEFM_NUM_FIELD("early_stop_patience", early_stop_patience),
        LEFM_NUM_FIELD("batch_size", batch_size),
        {"m", Field{[](const TrainConfig& c) { return join(c.m); },
                    [](TrainConfig& c, const std::string& v) { c.m = parse_list<int>("m", v); }}},
        {"seeds", Field{[](const TrainConfig& c) { return join(c.seeds); },
                        [](TrainConfig& c, const std::string& v) { c.seeds = parse_list<std::uint64_t>("seeds", v); }}},
        LEFM_BOOL_FIELD("augment", augmentation.enabled),
        LEFM_NUM_FIELD("shift_limit", augmentation.shift_limit),
        LEFM_NUM_FIELD("scale_limit", augmentation.scale_limit),
        LEFM_NUM_FIELD("rotation_limit", augmentation.rotation_limit),
        LEFM_BOOL_FIELD("horizontal_flip", augmentation.horizontal_flip),
        LEFM_BOOL_FIELD("vertical_flip", augmentation.vertical_flip),
        LEFM_NUM_FIELD("augment_probability", augmentation.probability),
        LEFM_NUM_FIELD("val_fraction", val_fraction),
        LEFM_NUM_FIELD("test_fraction", test_fraction),
        LEFM_NUM_FIELD("split_seed", split_seed),
        LEFM_NUM_FIELD("patch_size", patch_size),
        LEFM_NUM_FIELD("stride", stride),
        LEFM_NUM_FIELD("eval_stride", eval_stride),
        LEFM_BOOL_FIELD("use_batch_norm", use_batch_norm),
        LEFM_BOOL_FIELD("prenormalized", prenormalized),
        LEFM_NUM_FIELD("threads", threads),
    };
    return f;
}

#undef LEFM_NUM_FIELD
#undef LEFM_BOOL_FIELD

} // namespace detail

/// Sets one field by name; unknown keys are rejected.
inline void set_field(TrainConfig& cfg, const std::string& key, const std::string& value)
{
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end())
        throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(cfg, value);
}

/// Canonical `key=value` text, keys sorted.
inline std::string to_kv(const TrainConfig& cfg)
{
    std::string out;
    for (const auto& [key, field] : detail::fields())
        out += key + "=" + field.get(cfg) + "\n";
    return out;
}

/// Hash of every field that can change results. `threads` is excluded.
inline std::string config_hash(const TrainConfig& cfg)
{
    TrainConfig c = cfg;
    c.threads = 0;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_kv(c))));
    return buf;
}

/// Returns warnings for accepted-but-unusual settings; throws on invalid ones.
inline std::vector<std::string> validate(const TrainConfig& c)
{
    auto require = [](bool ok, const std::string& what) {
        if (!ok)
            throw ConfigError("config: " + what);
    };
    require(c.max_epochs > 0, "max_epochs must be positive");
    require(c.lr0 > 0, "lr0 must be positive");
    require(c.lr_min > 0 && c.lr_min <= c.lr0, "lr_min must lie in (0, lr0]");
    require(c.lr_factor > 0 && c.lr_factor < 1, "lr_factor must lie in (0, 1)");
    require(c.plateau_patience > 0, "plateau_patience must be positive");
    require(c.early_stop_patience > 0, "early_stop_patience must be positive");
    require(c.weight_decay >= 0, "weight_decay must be non-negative");
    require(c.batch_size > 0, "batch_size must be positive");
    require(!c.seeds.empty(), "seeds must not be empty");
    require(c.val_fraction > 0 && c.val_fraction < 1, "val_fraction must lie in (0, 1)");
    require(c.test_fraction > 0 && c.test_fraction < 1, "test_fraction must lie in (0, 1)");
    require(c.patch_size > 0 && c.patch_size % 8 == 0, "patch_size must be a positive multiple of 8");
    require(c.stride > 0 && c.stride <= c.patch_size, "stride must lie in [1, patch_size]");
    require(c.eval_stride > 0 && c.eval_stride <= c.patch_size, "eval_stride must lie in [1, patch_size]");
    require(c.threads >= 0, "threads must be non-negative");
    require(c.augmentation.probability >= 0 && c.augmentation.probability <= 1, "augment_probability must lie in [0, 1]");
    std::vector<std::string> warnings;
    for (int m : c.m) {
        require(m >= 0, "m must be non-negative");
        if (m != 0 && m != 2 && m != 3)
            warnings.push_back("order m=" + std::to_string(m) + " is outside the usual {0, 2, 3}");
    }
    return warnings;
}

/// Parses `key = value` lines; `#` starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig cfg = {})
{
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        set_field(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline TrainConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

} // namespace lefm::train
