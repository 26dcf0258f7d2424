#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <unistd.h>

#include <gtest/gtest.h>

#include "lefm/data/augment.hpp"
#include "lefm/data/dataset.hpp"
#include "lefm/data/patches.hpp"
#include "lefm/data/split.hpp"
#include "lefm/data/synthetic.hpp"

namespace fs = std::filesystem;
using namespace lefm;
using namespace lefm::data;

namespace {

Mask mask_from(std::initializer_list<std::uint8_t> v, std::size_t h, std::size_t w)
{
    return Mask(h, w, 1, std::vector<std::uint8_t>(v));
}

std::uint8_t vote(std::initializer_list<int> votes)
{
    std::vector<Mask> masks;
    for (int v : votes)
        masks.push_back(mask_from({static_cast<std::uint8_t>(v)}, 1, 1));
    return majority_vote(masks).storage()[0];
}

class TempDir {
public:
    TempDir()
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("lefm_data_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::vector<AnnotatedSample> tiny_dataset(std::size_t n, std::size_t annotators)
{
    std::vector<AnnotatedSample> out;
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> byte(0, 255), bit(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
        AnnotatedSample s;
        s.id = "s" + std::to_string(i);
        s.patient_id = "p" + std::to_string(i / 2);
        s.organ = i % 2 ? std::optional<std::string>("liver") : std::nullopt;
        s.image = Image<float>(6, 5, 3);
        for (auto& v : s.image.storage())
            v = static_cast<float>(byte(rng)) / 255.0f;
        for (std::size_t a = 0; a < annotators; ++a) {
            Mask m(6, 5, 1);
            for (auto& v : m.storage())
                v = static_cast<std::uint8_t>(bit(rng));
            s.annotations.push_back(m);
        }
        s.majority_label = majority_vote(s.annotations);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

TEST(MajorityVote, Examples)
{
    EXPECT_EQ(vote({1, 1, 0}), 1);
    EXPECT_EQ(vote({1, 1, 1, 0, 0, 0, 0}), 0);
    EXPECT_EQ(vote({1, 1, 0, 0}), 1);
    EXPECT_EQ(vote({1, 0, 0}), 0);
    EXPECT_EQ(vote({1}), 1);
}

TEST(MajorityVote, PermutationInvariant)
{
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::size_t a = 1; a <= 7; ++a) {
        std::vector<Mask> masks;
        for (std::size_t k = 0; k < a; ++k) {
            Mask m(4, 4, 1);
            for (auto& v : m.storage())
                v = static_cast<std::uint8_t>(bit(rng));
            masks.push_back(m);
        }
        const Mask ref = majority_vote(masks);
        for (int trial = 0; trial < 10; ++trial) {
            std::shuffle(masks.begin(), masks.end(), rng);
            EXPECT_EQ(majority_vote(masks), ref);
        }
    }
}

TEST(Dataset, SaveLoadRoundTrip)
{
    TempDir dir;
    auto samples = tiny_dataset(4, 3);
    save_dataset(dir.path(), samples);
    auto loaded = load_dataset(dir.path());
    ASSERT_EQ(loaded.size(), samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        EXPECT_EQ(loaded[i].id, samples[i].id);
        EXPECT_EQ(loaded[i].patient_id, samples[i].patient_id);
        EXPECT_EQ(loaded[i].organ, samples[i].organ);
        EXPECT_EQ(loaded[i].image, samples[i].image);
        EXPECT_EQ(loaded[i].annotations, samples[i].annotations);
        EXPECT_EQ(loaded[i].majority_label, samples[i].majority_label);
        for (float v : loaded[i].image.data()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(Dataset, WithoutMetadataPatientIsSampleId)
{
    TempDir dir;
    save_dataset(dir.path(), tiny_dataset(2, 1));
    fs::remove(dir.path() / "metadata.csv");
    auto loaded = load_dataset(dir.path());
    EXPECT_EQ(loaded[0].patient_id, "s0");
    EXPECT_FALSE(loaded[0].organ.has_value());
}

TEST(Dataset, ErrorsNameTheOffendingFile)
{
    auto expect_error = [](const fs::path& root, const std::string& fragment) {
        try {
            load_dataset(root);
            ADD_FAILURE() << "expected DataError";
        } catch (const DataError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 3));
        fs::remove(dir.path() / "s1" / "annotator_2.png");
        expect_error(dir.path(), (dir.path() / "s1" / "annotator_2.png").string());
    }
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 3));
        fs::remove(dir.path() / "s1" / "annotator_3.png");
        expect_error(dir.path(), "s1 has 2 annotator masks, expected 3");
    }
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 2));
        fs::copy_file(dir.path() / "s0" / "annotator_1.png", dir.path() / "s0" / "annotator_x.png");
        expect_error(dir.path(), "annotator_x.png");
    }
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 2));
        data::write_png(dir.path() / "s0" / "annotator_2.png", Mask(3, 3, 1));
        expect_error(dir.path(), (dir.path() / "s0" / "annotator_2.png").string());
    }
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 2));
        std::ofstream(dir.path() / "s1" / "image.png") << "not a png";
        expect_error(dir.path(), (dir.path() / "s1" / "image.png").string());
    }
    {
        TempDir dir;
        save_dataset(dir.path(), tiny_dataset(2, 2));
        fs::remove(dir.path() / "s0" / "image.png");
        expect_error(dir.path(), (dir.path() / "s0" / "image.png").string());
    }
}

TEST(Split, PatientDisjointForManySeeds)
{
    auto samples = tiny_dataset(30, 1);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto split = make_split(samples, 0.3, seed);
        EXPECT_NO_THROW(validate_split(split, samples));
        EXPECT_EQ(split.train.size() + split.test.size(), samples.size());
        EXPECT_GE(split.test.size(), 9u);
        std::set<std::string> train_patients;
        for (const auto& id : split.train)
            train_patients.insert(samples[std::stoul(id.substr(1))].patient_id);
        for (const auto& id : split.test)
            EXPECT_FALSE(train_patients.count(samples[std::stoul(id.substr(1))].patient_id));
    }
}

TEST(Split, JsonRoundTripAndValidation)
{
    auto samples = tiny_dataset(10, 1);
    auto split = make_split(samples, 0.3, 7);
    nlohmann::json j = split;
    EXPECT_EQ(j.get<SplitSpec>(), split);
    EXPECT_EQ(make_split(samples, 0.3, 7), split);

    SplitSpec bad = split;
    bad.test.push_back(bad.train.front());
    EXPECT_THROW(validate_split(bad, samples), DataError);
    SplitSpec leak;
    leak.train = {"s0"};
    leak.test = {"s1"}; // same patient p0
    EXPECT_THROW(validate_split(leak, samples), DataError);
    EXPECT_THROW(nlohmann::json::parse(R"({"train": []})").get<SplitSpec>(), DataError);
}

TEST(Split, ValidationDrawDependsOnRunSeed)
{
    auto a = draw_validation(100, 0.2, 1);
    auto b = draw_validation(100, 0.2, 1);
    auto c = draw_validation(100, 0.2, 2);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a.size(), 20u);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), a.size());
    EXPECT_TRUE(draw_validation(10, 0.0, 1).empty());
}

TEST(Patches, CountsAndEdgeAlignedOrigins)
{
    Image<float> img128(128, 128, 3);
    EXPECT_EQ(make_patches(img128, Mask(128, 128, 1), 64, 64).size(), 4u);

    Image<float> img(100, 100, 3);
    auto patches = make_patches(img, Mask(100, 100, 1), 64, 64);
    std::vector<std::pair<std::size_t, std::size_t>> origins;
    for (const auto& p : patches)
        origins.emplace_back(p.row, p.col);
    const std::vector<std::pair<std::size_t, std::size_t>> expected{{0, 0}, {0, 36}, {36, 0}, {36, 36}};
    EXPECT_EQ(origins, expected);

    EXPECT_THROW(make_patches(img, Mask(100, 100, 1), 60, 60), ConfigError);
    EXPECT_THROW(make_patches(Image<float>(32, 32, 3), Mask(32, 32, 1), 64, 64), ShapeError);
}

TEST(Patches, ReassemblyAndCoverage)
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0, 1);
    Image<float> img(128, 64, 3);
    for (auto& v : img.storage())
        v = u(rng);
    auto patches = make_patches(img, Mask(128, 64, 1), 32, 32);
    std::vector<std::pair<std::pair<std::size_t, std::size_t>, Image<float>>> tiles;
    for (const auto& p : patches)
        tiles.push_back({{p.row, p.col}, p.image});
    EXPECT_EQ(reassemble(tiles, 128, 64), img);

    for (std::size_t len : {8u, 37u, 64u, 100u})
        for (std::size_t size = 8; size <= len; size += 8)
            for (std::size_t stride = 1; stride <= size; ++stride) {
                std::vector<int> covered(len, 0);
                for (auto o : patch_origins(len, size, stride))
                    for (std::size_t i = 0; i < size; ++i)
                        covered[o + i] = 1;
                EXPECT_EQ(std::accumulate(covered.begin(), covered.end(), 0), static_cast<int>(len));
            }
}

TEST(Augment, ZeroProbabilityIsIdentity)
{
    auto s = tiny_dataset(1, 1).front();
    AugmentationConfig cfg;
    cfg.probability = 0;
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        auto out = augment(s.image, s.majority_label, cfg, rng);
        EXPECT_EQ(out.image, s.image);
        EXPECT_EQ(out.label, s.majority_label);
    }
}

TEST(Augment, HorizontalFlipTwiceWithReplayIsIdentity)
{
    auto s = tiny_dataset(1, 1).front();
    AugmentationConfig cfg;
    cfg.probability = 1;
    cfg.shift_limit = cfg.scale_limit = cfg.rotation_limit = 0;
    cfg.vertical_flip = false;
    Rng rng1(9), rng2(9);
    auto once = augment(s.image, s.majority_label, cfg, rng1);
    EXPECT_NE(once.image, s.image);
    EXPECT_EQ(once.image(0, 0, 1), s.image(0, 4, 1));
    auto twice = augment(once.image, once.label, cfg, rng2);
    EXPECT_EQ(twice.image, s.image);
    EXPECT_EQ(twice.label, s.majority_label);
}

TEST(Augment, QuarterTurnMapsRowColToColFlippedRow)
{
    Image<float> img(3, 3, 1, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f, 0.9f});
    Mask lab = mask_from({1, 1, 0, 0, 0, 0, 0, 0, 1}, 3, 3);
    AffineParams p;
    p.angle_deg = 90;
    auto out = apply_affine(img, lab, p);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(out.image(c, 2 - r), img(r, c), 1e-6);
            EXPECT_EQ(out.label(c, 2 - r), lab(r, c));
        }

    // the sampler reaches the same transform when the rotation limit is widened
    AugmentationConfig cfg;
    cfg.probability = 1;
    cfg.shift_limit = cfg.scale_limit = 0;
    cfg.horizontal_flip = cfg.vertical_flip = false;
    cfg.rotation_limit = 90;
    bool seen = false;
    for (std::uint64_t seed = 0; seed < 2000 && !seen; ++seed) {
        Rng rng(seed);
        auto q = sample_affine(cfg, rng);
        seen = std::abs(std::abs(q.angle_deg) - 90) < 2;
    }
    EXPECT_TRUE(seen);
}

TEST(Augment, PreservesLabelSetAndRange)
{
    auto s = generate_synthetic({.n_images = 3, .height = 32, .width = 32, .seed = 4});
    AugmentationConfig cfg;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto& smp = s[seed % 3];
        Rng rng = make_rng(seed, {1, 2});
        auto out = augment(smp.image, smp.majority_label, cfg, rng);
        for (auto v : out.label.data())
            EXPECT_TRUE(v == 0 || v == 1);
        for (auto v : out.image.data()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(Augment, ShiftMovesContent)
{
    Image<float> img(8, 8, 1);
    Mask lab(8, 8, 1);
    img(2, 3) = 1.0f;
    lab(2, 3) = 1;
    AffineParams p;
    p.shift_x = 0.25; // two pixels right
    p.shift_y = 0.125;
    auto out = apply_affine(img, lab, p);
    EXPECT_NEAR(out.image(3, 5), 1.0f, 1e-6);
    EXPECT_EQ(out.label(3, 5), 1);
    EXPECT_EQ(std::accumulate(out.label.data().begin(), out.label.data().end(), 0), 1);
    EXPECT_EQ(out.image(0, 0), 0.0f);
}

TEST(Synthetic, StrictThresholdAndRules)
{
    EXPECT_FALSE(rule_value(SyntheticRule::product, 0.5, 0.9, 0.5) > 0.25);
    EXPECT_DOUBLE_EQ(rule_value(SyntheticRule::linear, 0.2, 0.0, 0.6), 0.4);
    EXPECT_DOUBLE_EQ(rule_value(SyntheticRule::mix, 0.5, 0.4, 0.3), 0.29);
    EXPECT_EQ(parse_rule("product"), SyntheticRule::product);
    EXPECT_EQ(parse_rule("MIX"), SyntheticRule::mix);
    EXPECT_THROW(parse_rule("cubic"), ConfigError);
}

TEST(Synthetic, DeterministicUnderSeed)
{
    SyntheticConfig cfg{.n_images = 4, .height = 16, .width = 24, .rule = SyntheticRule::mix, .seed = 11};
    auto a = generate_synthetic(cfg);
    auto b = generate_synthetic(cfg);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].majority_label, b[i].majority_label);
        EXPECT_EQ(a[i].annotator_count(), 1u);
    }
    cfg.seed = 12;
    EXPECT_NE(generate_synthetic(cfg)[0].image, a[0].image);
}

TEST(Synthetic, LabelsComeFromCleanField)
{
    SyntheticConfig clean{.n_images = 2, .height = 16, .width = 16, .noise_sigma = 0.0, .seed = 3};
    SyntheticConfig noisy = clean;
    noisy.noise_sigma = 0.2;
    auto a = generate_synthetic(clean), b = generate_synthetic(noisy);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].majority_label, b[i].majority_label);
        EXPECT_NE(a[i].image, b[i].image);
        for (std::size_t p = 0; p < a[i].image.pixels(); ++p) {
            const auto px = a[i].image.pixel(p);
            const bool expected = rule_value(SyntheticRule::product, px[0], px[1], px[2]) > 0.25;
            EXPECT_EQ(a[i].majority_label.storage()[p], expected ? 1 : 0);
        }
    }
}

TEST(Synthetic, ProductBalanceMatchesMonteCarlo)
{
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0, 1);
    std::size_t hits = 0;
    const std::size_t n = 1000000;
    for (std::size_t i = 0; i < n; ++i)
        hits += u(rng) * u(rng) > 0.25;
    const double oracle = static_cast<double>(hits) / n;
    EXPECT_NEAR(oracle, 0.75 - 0.25 * std::log(4.0), 2e-3);

    auto ds = generate_synthetic({.n_images = 200, .height = 64, .width = 64, .noise_sigma = 0.0, .seed = 1});
    std::size_t pos = 0, total = 0;
    double mean = 0;
    for (const auto& s : ds) {
        for (auto v : s.majority_label.data())
            pos += v;
        total += s.majority_label.size();
        for (float v : s.image.data())
            mean += v;
    }
    EXPECT_NEAR(static_cast<double>(pos) / static_cast<double>(total), oracle, 0.02);
    EXPECT_NEAR(mean / (3.0 * static_cast<double>(total)), 0.5, 0.01);
}
