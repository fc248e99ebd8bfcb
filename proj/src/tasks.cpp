#include "imaml/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>
#include <sstream>

#include "imaml/error.hpp"
#include "imaml/rng.hpp"

namespace imaml {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxRegenerations = 100;

struct Blob {
    double cx, cy, radius;
    double amp[3];
    double phase[3];

    bool contains(double x, double y) const {
        const double dx = x - cx;
        const double dy = y - cy;
        const double d = std::hypot(dx, dy);
        if (d > radius * 2.0) return false;
        const double t = std::atan2(dy, dx);
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[k] * std::sin((k + 2) * t + phase[k]);
        return d < radius * r;
    }
};

Blob random_blob(const SynthFamilyConfig& cfg, std::mt19937_64& rng) {
    const double s = static_cast<double>(cfg.resolution);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Blob b{};
    b.radius = s * (cfg.radius_min + (cfg.radius_max - cfg.radius_min) * unit(rng));
    const double margin = std::min(0.6 * b.radius, 0.5 * s);
    b.cx = margin + (s - 2.0 * margin) * unit(rng);
    b.cy = margin + (s - 2.0 * margin) * unit(rng);
    for (int k = 0; k < 3; ++k) {
        b.amp[k] = cfg.roughness * (2.0 * unit(rng) - 1.0) / (k + 1);
        b.phase[k] = 2.0 * std::numbers::pi * unit(rng);
    }
    return b;
}

std::vector<double> rasterize(const std::vector<Blob>& blobs, std::size_t s) {
    std::vector<double> m(s * s, 0.0);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            for (const auto& b : blobs) {
                if (b.contains(x + 0.5, y + 0.5)) {
                    m[y * s + x] = 1.0;
                    break;
                }
            }
        }
    }
    return m;
}

PoolItem synth_item(const SynthFamilyConfig& cfg, std::size_t index) {
    const std::size_t s = cfg.resolution;
    for (int attempt = 0; attempt < kMaxRegenerations; ++attempt) {
        std::mt19937_64 rng(derive_seed({cfg.seed, index, static_cast<std::uint64_t>(attempt)}));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> count(cfg.blob_min, cfg.blob_max);

        std::vector<Blob> lesions(count(rng));
        for (auto& b : lesions) b = random_blob(cfg, rng);
        std::vector<double> mask = rasterize(lesions, s);
        if (std::none_of(mask.begin(), mask.end(), [](double v) { return v > 0.0; })) continue;

        std::vector<Blob> distractors(cfg.distractor_count);
        for (auto& b : distractors) b = random_blob(cfg, rng);
        const std::vector<double> other = rasterize(distractors, s);

        const double angle = std::numbers::pi * unit(rng);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        const double freq = 2.0 * std::numbers::pi * cfg.texture_freq / static_cast<double>(s);
        std::normal_distribution<double> noise(0.0, 1.0);

        std::vector<double> raw(s * s);
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const std::size_t i = y * s + x;
                double v = cfg.background + cfg.texture_amp * std::sin(freq * (ca * x + sa * y) + phase);
                v += cfg.contrast * mask[i];
                if (mask[i] == 0.0) v += cfg.distractor_contrast * other[i];
                v += cfg.noise_std * noise(rng);
                raw[i] = v;
            }
        }
        if (unit(rng) < cfg.specular_prob) {
            std::uniform_int_distribution<int> spots(1, 3);
            const int n = spots(rng);
            for (int k = 0; k < n; ++k) {
                const double cx = unit(rng) * s;
                const double cy = unit(rng) * s;
                const double r = 1.0 + 0.8 * unit(rng);
                for (std::size_t y = 0; y < s; ++y) {
                    for (std::size_t x = 0; x < s; ++x) {
                        if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) < r) raw[y * s + x] += 0.6;
                    }
                }
            }
        }
        for (auto& v : raw) v = normalize_intensity(std::clamp(v, 0.0, 1.0));

        char stem[64];
        std::snprintf(stem, sizeof(stem), "%s_%05zu", cfg.name.c_str(), index);
        return PoolItem{stem, std::move(raw), std::move(mask)};
    }
    throw Error("generate_pool: family '" + cfg.name + "' produced only empty masks for item " + std::to_string(index));
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<double> to_planes(const cv::Mat& img, std::size_t channels) {
    const auto s = static_cast<std::size_t>(img.rows);
    std::vector<double> out(channels * s * s);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                const double v = channels == 1 ? img.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x))
                                               : img.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x))[c];
                out[(c * s + y) * s + x] = normalize_intensity(v / 255.0);
            }
        }
    }
    return out;
}

}  // namespace

void DataPool::validate() const {
    if (resolution == 0 || channels == 0) throw Error("pool '" + name + "': zero resolution or channels");
    const std::size_t px = resolution * resolution;
    for (const auto& it : items) {
        if (it.image.size() != channels * px || it.mask.size() != px) {
            throw Error("pool '" + name + "': item '" + it.stem + "' does not match the pool resolution");
        }
        for (double m : it.mask) {
            if (m != 0.0 && m != 1.0) throw Error("pool '" + name + "': item '" + it.stem + "' has a non-binary mask");
        }
        for (double v : it.image) {
            if (!(v >= -1.0 && v <= 1.0)) throw Error("pool '" + name + "': item '" + it.stem + "' is outside [-1, 1]");
        }
    }
}

void SynthFamilyConfig::validate() const {
    const std::string who = "synthetic family '" + name + "': ";
    if (name.empty()) throw Error("synthetic family: empty name");
    if (resolution < 4) throw Error(who + "resolution must be >= 4");
    if (blob_min < 1 || blob_max < blob_min) throw Error(who + "blob count range must satisfy 1 <= blob_min <= blob_max");
    if (!(radius_min > 0.0 && radius_min <= radius_max && radius_max <= 0.5)) {
        throw Error(who + "radius range must satisfy 0 < radius_min <= radius_max <= 0.5");
    }
    if (!(roughness >= 0.0 && roughness < 1.0)) throw Error(who + "roughness must lie in [0, 1)");
    if (!(noise_std >= 0.0)) throw Error(who + "noise_std must be >= 0");
    if (!(texture_amp >= 0.0) || !(texture_freq >= 0.0)) throw Error(who + "texture parameters must be >= 0");
    if (!(specular_prob >= 0.0 && specular_prob <= 1.0)) throw Error(who + "specular_prob must lie in [0, 1]");
}

kv::Fields SynthFamilyConfig::fields() const {
    return {{"name", name},
            {"category", category},
            {"resolution", std::to_string(resolution)},
            {"blob_min", std::to_string(blob_min)},
            {"blob_max", std::to_string(blob_max)},
            {"radius_min", kv::from_double(radius_min)},
            {"radius_max", kv::from_double(radius_max)},
            {"roughness", kv::from_double(roughness)},
            {"background", kv::from_double(background)},
            {"contrast", kv::from_double(contrast)},
            {"texture_freq", kv::from_double(texture_freq)},
            {"texture_amp", kv::from_double(texture_amp)},
            {"noise_std", kv::from_double(noise_std)},
            {"specular_prob", kv::from_double(specular_prob)},
            {"distractor_count", std::to_string(distractor_count)},
            {"distractor_contrast", kv::from_double(distractor_contrast)},
            {"seed", std::to_string(seed)}};
}

void SynthFamilyConfig::set(std::string_view key, std::string_view value) {
    if (key == "name") name = value;
    else if (key == "category") category = value;
    else if (key == "resolution") resolution = kv::to_u64(key, value);
    else if (key == "blob_min") blob_min = kv::to_u64(key, value);
    else if (key == "blob_max") blob_max = kv::to_u64(key, value);
    else if (key == "radius_min") radius_min = kv::to_double(key, value);
    else if (key == "radius_max") radius_max = kv::to_double(key, value);
    else if (key == "roughness") roughness = kv::to_double(key, value);
    else if (key == "background") background = kv::to_double(key, value);
    else if (key == "contrast") contrast = kv::to_double(key, value);
    else if (key == "texture_freq") texture_freq = kv::to_double(key, value);
    else if (key == "texture_amp") texture_amp = kv::to_double(key, value);
    else if (key == "noise_std") noise_std = kv::to_double(key, value);
    else if (key == "specular_prob") specular_prob = kv::to_double(key, value);
    else if (key == "distractor_count") distractor_count = kv::to_u64(key, value);
    else if (key == "distractor_contrast") distractor_contrast = kv::to_double(key, value);
    else if (key == "seed") seed = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

DataPool generate_pool(const SynthFamilyConfig& cfg, std::size_t n) {
    cfg.validate();
    if (n < 1) throw Error("generate_pool: pool size must be >= 1");
    DataPool pool{cfg.name, cfg.category, cfg.seed, cfg.resolution, 1, {}};
    pool.items.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pool.items.push_back(synth_item(cfg, i));
    return pool;
}

DataPool load_pool(const std::string& dir, std::size_t resolution, std::size_t channels, std::string name,
                   std::string category) {
    if (channels != 1 && channels != 3) throw Error("load_pool: channels must be 1 or 3");
    if (resolution == 0) throw Error("load_pool: resolution must be >= 1");
    const fs::path root(dir);
    const fs::path image_dir = root / "images";
    const fs::path mask_dir = root / "masks";
    if (!fs::is_directory(image_dir)) throw Error("load_pool: '" + image_dir.string() + "' is not a directory");

    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(image_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
    }
    if (stems.empty()) throw Error("load_pool: no images/*.png under '" + dir + "'");
    std::sort(stems.begin(), stems.end());

    std::vector<std::string> missing;
    for (const auto& s : stems) {
        if (!fs::is_regular_file(mask_dir / (s + ".png"))) missing.push_back(s);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
        throw Error("load_pool: no mask for image stems: " + list);
    }

    if (name.empty()) name = root.filename().empty() ? root.parent_path().filename().string() : root.filename().string();
    if (category.empty()) category = name;
    DataPool pool{name, category, 0, resolution, channels, {}};
    const cv::Size size(static_cast<int>(resolution), static_cast<int>(resolution));
    for (const auto& s : stems) {
        const auto image_path = (image_dir / (s + ".png")).string();
        const auto mask_path = (mask_dir / (s + ".png")).string();
        cv::Mat img = cv::imread(image_path, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
        if (img.empty()) throw Error("load_pool: cannot read '" + image_path + "'");
        cv::Mat msk = cv::imread(mask_path, cv::IMREAD_GRAYSCALE);
        if (msk.empty()) throw Error("load_pool: cannot read '" + mask_path + "'");
        if (img.depth() != CV_8U) img.convertTo(img, CV_8U);
        if (msk.depth() != CV_8U) msk.convertTo(msk, CV_8U);
        if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
        if (img.size() != size) cv::resize(img, img, size, 0, 0, cv::INTER_AREA);
        if (msk.size() != size) cv::resize(msk, msk, size, 0, 0, cv::INTER_NEAREST);

        PoolItem item{s, to_planes(img, channels), std::vector<double>(resolution * resolution)};
        for (std::size_t i = 0; i < item.mask.size(); ++i) {
            item.mask[i] = msk.at<std::uint8_t>(static_cast<int>(i / resolution), static_cast<int>(i % resolution)) > 127
                               ? 1.0
                               : 0.0;
        }
        pool.items.push_back(std::move(item));
    }
    return pool;
}

void save_pool(const DataPool& pool, const std::string& dir) {
    pool.validate();
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    const int s = static_cast<int>(pool.resolution);
    for (const auto& it : pool.items) {
        cv::Mat img(s, s, pool.channels == 1 ? CV_8UC1 : CV_8UC3);
        cv::Mat msk(s, s, CV_8UC1);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const std::size_t p = static_cast<std::size_t>(y * s + x);
                msk.at<std::uint8_t>(y, x) = it.mask[p] > 0.5 ? 255 : 0;
                for (std::size_t c = 0; c < pool.channels; ++c) {
                    const double v = denormalize_intensity(it.image[c * pool.resolution * pool.resolution + p]);
                    const auto byte = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                    if (pool.channels == 1) img.at<std::uint8_t>(y, x) = byte;
                    else img.at<cv::Vec3b>(y, x)[2 - c] = byte;  // stored as BGR
                }
            }
        }
        const auto image_path = (root / "images" / (it.stem + ".png")).string();
        const auto mask_path = (root / "masks" / (it.stem + ".png")).string();
        if (!cv::imwrite(image_path, img)) throw Error("save_pool: cannot write '" + image_path + "'");
        if (!cv::imwrite(mask_path, msk)) throw Error("save_pool: cannot write '" + mask_path + "'");
    }
    std::FILE* f = std::fopen((root / "manifest.txt").string().c_str(), "wb");
    if (!f) throw Error("save_pool: cannot write manifest under '" + dir + "'");
    const auto text = pool_manifest(pool);
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string pool_manifest(const DataPool& pool) {
    std::ostringstream out;
    out << "# pool " << pool.name << " category " << pool.category << " items " << pool.items.size()
        << " resolution " << pool.resolution << " channels " << pool.channels << " seed " << pool.source_seed << "\n";
    std::uint64_t all = 0xcbf29ce484222325ULL;
    for (const auto& it : pool.items) {
        const auto hi = fnv1a(it.image.data(), it.image.size() * sizeof(double));
        const auto hm = fnv1a(it.mask.data(), it.mask.size() * sizeof(double));
        all = fnv1a(&hi, sizeof(hi), fnv1a(&hm, sizeof(hm), all));
        out << it.stem << " " << hex64(hi) << " " << hex64(hm) << "\n";
    }
    out << "# total " << hex64(all) << "\n";
    return out.str();
}

std::string to_string(Setup s) {
    switch (s) {
        case Setup::exclusive: return "exclusive";
        case Setup::mixed: return "mixed";
        case Setup::same_category_cross_test: return "same-category-cross-test";
    }
    return "?";
}

Setup parse_setup(std::string_view s) {
    if (s == "exclusive") return Setup::exclusive;
    if (s == "mixed") return Setup::mixed;
    if (s == "same-category-cross-test") return Setup::same_category_cross_test;
    throw Error("setup must be exclusive, mixed or same-category-cross-test, got '" + std::string(s) + "'");
}

void EpisodeConfig::validate() const {
    if (n_ways < 1) throw Error("episode config: n_ways must be >= 1");
    if (k_shots < 1) throw Error("episode config: k_shots must be >= 1");
    if (q_queries < 1) throw Error("episode config: q_queries must be >= 1");
}

kv::Fields EpisodeConfig::fields() const {
    return {{"n_ways", std::to_string(n_ways)},
            {"k_shots", std::to_string(k_shots)},
            {"q_queries", std::to_string(q_queries)},
            {"setup", to_string(setup)},
            {"seed", std::to_string(seed)}};
}

void EpisodeConfig::set(std::string_view key, std::string_view value) {
    if (key == "n_ways") n_ways = kv::to_u64(key, value);
    else if (key == "k_shots") k_shots = kv::to_u64(key, value);
    else if (key == "q_queries") q_queries = kv::to_u64(key, value);
    else if (key == "setup") setup = parse_setup(value);
    else if (key == "seed") seed = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

Task sample_task(const std::vector<DataPool>& pools, const EpisodeConfig& cfg, std::uint64_t task_index) {
    cfg.validate();
    if (pools.empty()) throw Error("sample_task: no data pools");
    for (const auto& p : pools) {
        if (p.resolution != pools[0].resolution || p.channels != pools[0].channels) {
            throw Error("sample_task: pools '" + pools[0].name + "' and '" + p.name + "' differ in image format");
        }
    }
    if (cfg.setup != Setup::exclusive && pools.size() < 2) {
        throw Error("sample_task: setup " + to_string(cfg.setup) + " needs at least 2 pools");
    }
    if (cfg.setup == Setup::same_category_cross_test) {
        for (const auto& p : pools) {
            if (p.category != pools[0].category) {
                throw Error("sample_task: same-category-cross-test needs training pools of one category, got '" +
                            pools[0].category + "' and '" + p.category + "'");
            }
        }
    }

    // Pool of every way.
    std::vector<std::size_t> way_pool(cfg.n_ways);
    for (std::size_t w = 0; w < cfg.n_ways; ++w) {
        way_pool[w] = cfg.setup == Setup::exclusive ? task_index % pools.size() : w % pools.size();
    }

    Task task;
    task.task_seed = derive_seed({cfg.seed, task_index});
    std::mt19937_64 rng(task.task_seed);

    // Distinct draws per pool, consumed way by way.
    std::map<std::size_t, std::size_t> needed;
    for (auto p : way_pool) needed[p] += cfg.k_shots + cfg.q_queries;
    std::map<std::size_t, std::vector<std::size_t>> draws;
    for (const auto& [p, n] : needed) {
        if (pools[p].size() < n) {
            throw Error("sample_task: pool '" + pools[p].name + "' has " + std::to_string(pools[p].size()) +
                        " items but the task needs " + std::to_string(n));
        }
        std::vector<std::size_t> idx(pools[p].size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = 0; i < n; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        idx.resize(n);
        std::reverse(idx.begin(), idx.end());  // consumed from the back
        draws[p] = std::move(idx);
    }
    for (std::size_t w = 0; w < cfg.n_ways; ++w) {
        auto& d = draws[way_pool[w]];
        for (std::size_t k = 0; k < cfg.k_shots; ++k) {
            task.support_refs.push_back({way_pool[w], d.back()});
            d.pop_back();
        }
        for (std::size_t q = 0; q < cfg.q_queries; ++q) {
            task.query_refs.push_back({way_pool[w], d.back()});
            d.pop_back();
        }
    }

    const std::size_t s = pools[0].resolution;
    const std::size_t c = pools[0].channels;
    auto build = [&](const std::vector<SampleRef>& refs, ad::Tensor& images, ad::Tensor& masks,
                     std::vector<std::string>& tags) {
        std::vector<double> img;
        std::vector<double> msk;
        img.reserve(refs.size() * c * s * s);
        msk.reserve(refs.size() * s * s);
        for (const auto& r : refs) {
            const auto& it = pools[r.pool].items[r.item];
            img.insert(img.end(), it.image.begin(), it.image.end());
            msk.insert(msk.end(), it.mask.begin(), it.mask.end());
            tags.push_back(pools[r.pool].name);
        }
        images = ad::Tensor({refs.size(), c, s, s}, std::move(img));
        masks = ad::Tensor({refs.size(), 1, s, s}, std::move(msk));
    };
    build(task.support_refs, task.support_images, task.support_masks, task.support_tags);
    build(task.query_refs, task.query_images, task.query_masks, task.query_tags);
    return task;
}

}  // namespace imaml
