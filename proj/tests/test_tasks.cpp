#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "imaml/error.hpp"
#include "imaml/tasks.hpp"

using namespace imaml;
namespace fs = std::filesystem;

namespace {

SynthFamilyConfig family(const std::string& name, std::uint64_t seed, const std::string& category = "lesion") {
    SynthFamilyConfig cfg;
    cfg.name = name;
    cfg.category = category;
    cfg.seed = seed;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("imaml_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(GeneratePool, DeterministicPerSeed) {
    const auto a = generate_pool(family("a", 5), 20);
    const auto b = generate_pool(family("a", 5), 20);
    EXPECT_EQ(pool_manifest(a), pool_manifest(b));
    const auto c = generate_pool(family("a", 6), 20);
    EXPECT_NE(pool_manifest(a), pool_manifest(c));
}

TEST(GeneratePool, MasksNonemptyBinaryImagesNormalized) {
    auto cfg = family("a", 7);
    cfg.radius_min = 0.02;
    cfg.radius_max = 0.03;
    const auto pool = generate_pool(cfg, 200);
    EXPECT_NO_THROW(pool.validate());
    for (const auto& it : pool.items) {
        double fg = 0;
        for (double m : it.mask) fg += m;
        EXPECT_GT(fg, 0.0) << it.stem;
    }
}

TEST(GeneratePool, ZeroContrastFamilyHasNoIntensityCue) {
    auto cfg = family("flat", 8);
    cfg.contrast = 0.0;
    const auto pool = generate_pool(cfg, 100);
    double inside = 0, outside = 0, n_in = 0, n_out = 0;
    for (const auto& it : pool.items) {
        for (std::size_t i = 0; i < it.mask.size(); ++i) {
            (it.mask[i] > 0 ? inside : outside) += it.image[i];
            (it.mask[i] > 0 ? n_in : n_out) += 1;
        }
    }
    EXPECT_LT(std::abs(inside / n_in - outside / n_out), 0.05);

    cfg.contrast = 0.3;
    const auto bright = generate_pool(cfg, 100);
    inside = outside = n_in = n_out = 0;
    for (const auto& it : bright.items) {
        for (std::size_t i = 0; i < it.mask.size(); ++i) {
            (it.mask[i] > 0 ? inside : outside) += it.image[i];
            (it.mask[i] > 0 ? n_in : n_out) += 1;
        }
    }
    EXPECT_GT(inside / n_in - outside / n_out, 0.3);
}

TEST(GeneratePool, DegenerateConfigsAreErrors) {
    auto cfg = family("a", 1);
    cfg.radius_min = 0.3;
    cfg.radius_max = 0.2;
    EXPECT_THROW(generate_pool(cfg, 5), Error);
    cfg = family("a", 1);
    cfg.blob_min = 0;
    EXPECT_THROW(generate_pool(cfg, 5), Error);
    cfg = family("a", 1);
    cfg.blob_min = 3;
    cfg.blob_max = 2;
    EXPECT_THROW(generate_pool(cfg, 5), Error);
    EXPECT_THROW(generate_pool(family("a", 1), 0), Error);
}

TEST(Normalization, RoundTrip) {
    for (int i = 0; i <= 1000; ++i) {
        const double y = -1.0 + 2.0 * i / 1000.0;
        EXPECT_NEAR(normalize_intensity(denormalize_intensity(y)), y, 4 * std::numeric_limits<double>::epsilon());
    }
}

TEST(LoadPool, RoundTripThroughPngs) {
    TempDir dir("pool_roundtrip");
    const auto pool = generate_pool(family("disk", 3), 3);
    save_pool(pool, dir.path.string());
    const auto loaded = load_pool(dir.path.string(), 32);
    ASSERT_EQ(loaded.size(), 3u);
    EXPECT_NO_THROW(loaded.validate());
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(loaded.items[i].stem, pool.items[i].stem);
        EXPECT_EQ(loaded.items[i].mask, pool.items[i].mask);
        for (std::size_t p = 0; p < pool.items[i].image.size(); ++p) {
            EXPECT_NEAR(loaded.items[i].image[p], pool.items[i].image[p], 1.0 / 255.0 + 1e-12);
        }
    }
    EXPECT_TRUE(fs::exists(dir.path / "manifest.txt"));
}

TEST(LoadPool, ResizesToModelResolution) {
    TempDir dir("pool_resize");
    auto cfg = family("big", 4);
    cfg.resolution = 64;
    save_pool(generate_pool(cfg, 2), dir.path.string());
    const auto loaded = load_pool(dir.path.string(), 16);
    EXPECT_EQ(loaded.resolution, 16u);
    EXPECT_EQ(loaded.items[0].image.size(), 256u);
    for (double m : loaded.items[0].mask) EXPECT_TRUE(m == 0.0 || m == 1.0);
}

TEST(LoadPool, ErrorsNameTheProblem) {
    TempDir dir("pool_errors");
    EXPECT_THROW(load_pool(dir.path.string(), 32), Error);
    fs::create_directories(dir.path / "images");
    fs::create_directories(dir.path / "masks");
    EXPECT_THROW(load_pool(dir.path.string(), 32), Error);

    save_pool(generate_pool(family("x", 1), 2), dir.path.string());
    fs::remove(dir.path / "masks" / "x_00001.png");
    try {
        (void)load_pool(dir.path.string(), 32);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("x_00001"), std::string::npos);
    }

    std::ofstream(dir.path / "masks" / "x_00001.png") << "not a png";
    EXPECT_THROW(load_pool(dir.path.string(), 32), Error);
}

class SamplerTest : public ::testing::Test {
protected:
    void SetUp() override {
        pools.push_back(generate_pool(family("alpha", 1), 40));
        pools.push_back(generate_pool(family("beta", 2), 40));
    }
    std::vector<DataPool> pools;
};

TEST_F(SamplerTest, ExclusiveAlternatesPools) {
    EpisodeConfig cfg;
    for (std::uint64_t idx = 0; idx < 6; ++idx) {
        const auto task = sample_task(pools, cfg, idx);
        const std::string expected = pools[idx % 2].name;
        for (const auto& t : task.support_tags) EXPECT_EQ(t, expected);
        for (const auto& t : task.query_tags) EXPECT_EQ(t, expected);
    }
}

TEST_F(SamplerTest, MixedUsesBothPools) {
    EpisodeConfig cfg;
    cfg.setup = Setup::mixed;
    const auto task = sample_task(pools, cfg, 3);
    const std::set<std::string> tags(task.support_tags.begin(), task.support_tags.end());
    EXPECT_EQ(tags, (std::set<std::string>{"alpha", "beta"}));
}

TEST_F(SamplerTest, SameCategoryRequiresMatchingCategories) {
    EpisodeConfig cfg;
    cfg.setup = Setup::same_category_cross_test;
    EXPECT_NO_THROW(sample_task(pools, cfg, 0));
    pools[1].category = "other";
    EXPECT_THROW(sample_task(pools, cfg, 0), Error);
}

TEST_F(SamplerTest, SizesAndShapes) {
    EpisodeConfig cfg;
    cfg.k_shots = 4;
    cfg.q_queries = 3;
    const auto task = sample_task(pools, cfg, 1);
    EXPECT_EQ(task.support_images.shape(), (ad::Shape{8, 1, 32, 32}));
    EXPECT_EQ(task.support_masks.shape(), (ad::Shape{8, 1, 32, 32}));
    EXPECT_EQ(task.query_images.shape(), (ad::Shape{6, 1, 32, 32}));
    EXPECT_EQ(task.support_refs.size(), 8u);
    EXPECT_EQ(task.query_refs.size(), 6u);
}

TEST_F(SamplerTest, DeterministicPerIndex) {
    EpisodeConfig cfg;
    cfg.setup = Setup::mixed;
    cfg.seed = 11;
    const auto a = sample_task(pools, cfg, 7);
    const auto b = sample_task(pools, cfg, 7);
    EXPECT_TRUE(std::equal(a.support_images.data().begin(), a.support_images.data().end(),
                           b.support_images.data().begin()));
    EXPECT_TRUE(std::equal(a.query_masks.data().begin(), a.query_masks.data().end(), b.query_masks.data().begin()));
    const auto c = sample_task(pools, cfg, 8);
    EXPECT_FALSE(std::equal(a.support_images.data().begin(), a.support_images.data().end(),
                            c.support_images.data().begin()));
}

TEST_F(SamplerTest, NoSupportQueryLeakageOverAThousandTasks) {
    for (auto setup : {Setup::exclusive, Setup::mixed}) {
        EpisodeConfig cfg;
        cfg.setup = setup;
        cfg.k_shots = 5;
        cfg.q_queries = 5;
        for (std::uint64_t idx = 0; idx < 1000; ++idx) {
            const auto task = sample_task(pools, cfg, idx);
            std::set<std::pair<std::size_t, std::size_t>> seen;
            for (const auto& r : task.support_refs) EXPECT_TRUE(seen.insert({r.pool, r.item}).second);
            for (const auto& r : task.query_refs) EXPECT_TRUE(seen.insert({r.pool, r.item}).second);
            ASSERT_EQ(task.support_refs.size(), cfg.n_ways * cfg.k_shots);
        }
    }
}

TEST_F(SamplerTest, InsufficientPoolNamesRequiredCount) {
    EpisodeConfig cfg;
    cfg.k_shots = 20;
    cfg.q_queries = 20;
    try {
        (void)sample_task(pools, cfg, 0);  // exclusive: 80 draws from one 40-item pool
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("80"), std::string::npos);
    }
}

TEST(Manifest, ListsEveryStemWithChecksums) {
    const auto pool = generate_pool(family("m", 9), 4);
    const auto text = pool_manifest(pool);
    for (const auto& it : pool.items) EXPECT_NE(text.find(it.stem + " "), std::string::npos);
    EXPECT_EQ(fnv1a("", 0), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a", 1), 0xaf63dc4c8601ec8cULL);
}
