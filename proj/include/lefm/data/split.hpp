#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/data/dataset.hpp"
#include "lefm/error.hpp"
#include "lefm/rng.hpp"

namespace lefm::data {

/// Fixed train/test partition by sample id. Validation is drawn from train
/// separately for every run.
struct SplitSpec {
    std::vector<std::string> train;
    std::vector<std::string> test;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;

    friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

inline void to_json(nlohmann::json& j, const SplitSpec& s)
{
    j = {{"train", s.train}, {"test", s.test}, {"val_fraction", s.val_fraction}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SplitSpec& s)
{
    try {
        j.at("train").get_to(s.train);
        j.at("test").get_to(s.test);
        s.val_fraction = j.at("val_fraction").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("split spec: ") + e.what());
    }
}

/// Patient-disjoint split. Patients are shuffled with the seed and moved to
/// test until at least `test_fraction` of the samples are held out.
inline SplitSpec make_split(std::span<const AnnotatedSample> samples, double test_fraction, std::uint64_t seed,
                            double val_fraction = 0.2)
{
    if (!(test_fraction > 0 && test_fraction < 1))
        throw ConfigError("make_split: test fraction must lie in (0, 1)");
    if (!(val_fraction >= 0 && val_fraction < 1))
        throw ConfigError("make_split: validation fraction must lie in [0, 1)");
    std::map<std::string, std::vector<std::string>> by_patient;
    for (const auto& s : samples)
        by_patient[s.patient_id].push_back(s.id);
    if (by_patient.size() < 2)
        throw DataError("make_split: need at least two patients for a disjoint split");

    std::vector<std::string> patients;
    for (const auto& [p, ids] : by_patient)
        patients.push_back(p);
    Rng rng = make_rng(seed, {0x5b117});
    std::shuffle(patients.begin(), patients.end(), rng);

    const auto target = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(samples.size())));
    SplitSpec split;
    split.val_fraction = val_fraction;
    split.seed = seed;
    std::set<std::string> test_ids;
    for (std::size_t i = 0; i + 1 < patients.size() && test_ids.size() < target; ++i)
        for (const auto& id : by_patient[patients[i]])
            test_ids.insert(id);
    for (const auto& s : samples)
        (test_ids.count(s.id) ? split.test : split.train).push_back(s.id);
    return split;
}

/// Checks that every id is known, no id is in both lists, and no patient
/// contributes to both.
inline void validate_split(const SplitSpec& split, std::span<const AnnotatedSample> samples)
{
    std::map<std::string, std::string> patient_of;
    for (const auto& s : samples)
        patient_of[s.id] = s.patient_id;
    std::set<std::string> train_patients, train_ids;
    for (const auto& id : split.train) {
        auto it = patient_of.find(id);
        if (it == patient_of.end())
            throw DataError("split references unknown sample " + id);
        train_ids.insert(id);
        train_patients.insert(it->second);
    }
    for (const auto& id : split.test) {
        auto it = patient_of.find(id);
        if (it == patient_of.end())
            throw DataError("split references unknown sample " + id);
        if (train_ids.count(id))
            throw DataError("sample " + id + " is in both train and test");
        if (train_patients.count(it->second))
            throw DataError("patient " + it->second + " appears in both train and test");
    }
}

/// Indices (into a pool of `n` training items) withheld for validation in one
/// run. At least one item is withheld when the fraction is positive.
inline std::vector<std::size_t> draw_validation(std::size_t n, double fraction, std::uint64_t run_seed)
{
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i)
        idx[i] = i;
    Rng rng = make_rng(run_seed, {0x7a1});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (fraction > 0 && k == 0 && n > 1)
        k = 1;
    idx.resize(std::min(k, n));
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace lefm::data
