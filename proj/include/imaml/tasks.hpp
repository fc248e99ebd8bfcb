#pragma once

// Data pools (synthetic families or image/mask directories) and the episodic
// sampler that cuts them into support/query tasks.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "imaml/kv_text.hpp"
#include "imaml/tensor.hpp"

namespace imaml {

struct PoolItem {
    std::string stem;
    std::vector<double> image;  // [C, S, S] in [-1, 1]
    std::vector<double> mask;   // [S, S] in {0, 1}
};

struct DataPool {
    std::string name;
    std::string category;
    std::uint64_t source_seed = 0;
    std::size_t resolution = 0;
    std::size_t channels = 1;
    std::vector<PoolItem> items;

    [[nodiscard]] std::size_t size() const { return items.size(); }
    void validate() const;
};

/// [0, 1] intensities to [-1, 1] and back.
inline double normalize_intensity(double x) { return 2.0 * x - 1.0; }
inline double denormalize_intensity(double y) { return 0.5 * (y + 1.0); }

struct SynthFamilyConfig {
    std::string name = "family";
    std::string category = "lesion";
    std::size_t resolution = 32;
    std::size_t blob_min = 1;
    std::size_t blob_max = 2;
    double radius_min = 0.12;  // fraction of the image side
    double radius_max = 0.25;
    double roughness = 0.2;
    double background = 0.4;
    double contrast = 0.3;  // signed intensity offset inside lesions
    double texture_freq = 3.0;
    double texture_amp = 0.1;
    double noise_std = 0.05;
    double specular_prob = 0.0;
    std::size_t distractor_count = 0;
    double distractor_contrast = 0.0;
    std::uint64_t seed = 1;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const SynthFamilyConfig&) const = default;
};

DataPool generate_pool(const SynthFamilyConfig& cfg, std::size_t n);

/// Reads `dir/images/*.png` with masks at `dir/masks/<stem>.png`.
DataPool load_pool(const std::string& dir, std::size_t resolution, std::size_t channels = 1,
                   std::string name = "", std::string category = "");
/// Writes a pool in the layout load_pool reads (8-bit PNGs) plus manifest.txt.
void save_pool(const DataPool& pool, const std::string& dir);

/// Text index: one line per item with its stem and content checksums.
std::string pool_manifest(const DataPool& pool);
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

enum class Setup { exclusive, mixed, same_category_cross_test };
std::string to_string(Setup s);
Setup parse_setup(std::string_view s);

struct EpisodeConfig {
    std::size_t n_ways = 2;
    std::size_t k_shots = 5;
    std::size_t q_queries = 5;
    Setup setup = Setup::exclusive;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const EpisodeConfig&) const = default;
};

struct SampleRef {
    std::size_t pool = 0;
    std::size_t item = 0;
};

struct Task {
    ad::Tensor support_images;  // [N*K, C, S, S]
    ad::Tensor support_masks;   // [N*K, 1, S, S]
    ad::Tensor query_images;    // [N*Q, C, S, S]
    ad::Tensor query_masks;     // [N*Q, 1, S, S]
    std::vector<std::string> support_tags;
    std::vector<std::string> query_tags;
    std::vector<SampleRef> support_refs;
    std::vector<SampleRef> query_refs;
    std::uint64_t task_seed = 0;
};

/// Pure function of its arguments.
Task sample_task(const std::vector<DataPool>& pools, const EpisodeConfig& cfg, std::uint64_t task_index);

}  // namespace imaml
