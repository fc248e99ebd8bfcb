#include "imaml/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include "imaml/error.hpp"
#include "imaml/losses.hpp"
#include "imaml/ops.hpp"
#include "imaml/parallel.hpp"
#include "imaml/rng.hpp"

namespace imaml {

const char* const kReportHeader =
    "task_id,algo,setup,k_shots,support_loss_final,query_dsc,query_iou,cg_iters_used,wall_time_ms";

namespace {

// Mean and sample standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

void check_csv_field(const std::string& s) {
    if (s.find_first_of(",\n\r\"") != std::string::npos) {
        throw Error("report field '" + s + "' contains a comma, quote or newline");
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

void FinetuneConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw Error("finetune config: learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw Error("finetune config: weight_decay must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("finetune config: threshold must lie in (0, 1)");
    if (n_ways < 1 || k_shots < 1 || q_queries < 1) {
        throw Error("finetune config: n_ways, k_shots and q_queries must be >= 1");
    }
    if (eval_tasks < 1) throw Error("finetune config: eval_tasks must be >= 1");
}

kv::Fields FinetuneConfig::fields() const {
    return {{"steps", std::to_string(steps)},
            {"learning_rate", kv::from_double(learning_rate)},
            {"weight_decay", kv::from_double(weight_decay)},
            {"optimizer", to_string(optimizer)},
            {"threshold", kv::from_double(threshold)},
            {"n_ways", std::to_string(n_ways)},
            {"k_shots", std::to_string(k_shots)},
            {"q_queries", std::to_string(q_queries)},
            {"eval_tasks", std::to_string(eval_tasks)},
            {"seed", std::to_string(seed)},
            {"record_time", kv::from_bool(record_time)}};
}

void FinetuneConfig::set(std::string_view key, std::string_view value) {
    if (key == "steps") steps = kv::to_u64(key, value);
    else if (key == "learning_rate") learning_rate = kv::to_double(key, value);
    else if (key == "weight_decay") weight_decay = kv::to_double(key, value);
    else if (key == "optimizer") optimizer = parse_optimizer(value);
    else if (key == "threshold") threshold = kv::to_double(key, value);
    else if (key == "n_ways") n_ways = kv::to_u64(key, value);
    else if (key == "k_shots") k_shots = kv::to_u64(key, value);
    else if (key == "q_queries") q_queries = kv::to_u64(key, value);
    else if (key == "eval_tasks") eval_tasks = kv::to_u64(key, value);
    else if (key == "seed") seed = kv::to_u64(key, value);
    else if (key == "record_time") record_time = kv::to_bool(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

FinetuneResult finetune(const SegModel& model, const ParamVector& theta, const SupportSet& support,
                        const LossConfig& loss, const FinetuneConfig& cfg) {
    Task support_only;
    support_only.support_images = support.images;
    support_only.support_masks = support.masks;
    const SegmentationObjective objective(model, support_only, loss);
    InnerResult res = descend(objective, theta, Regularization::weight_decay(cfg.weight_decay),
                              DescentConfig{cfg.steps, cfg.learning_rate, cfg.optimizer, 0.0});
    return {std::move(res.phi), res.final_loss};
}

QueryMetrics query_metrics(const ad::Tensor& predictions, const ad::Tensor& masks, double threshold) {
    if (predictions.shape() != masks.shape() || predictions.shape().size() != 4 || predictions.shape()[0] == 0) {
        throw Error("query_metrics: predictions and masks must share a non-empty [B, 1, H, W] shape");
    }
    const ad::Shape& shape = predictions.shape();
    const std::size_t per = shape[1] * shape[2] * shape[3];
    const ad::Tensor binary = binarize(predictions, threshold);
    const auto b = binary.data();
    const auto m = masks.data();
    QueryMetrics out;
    for (std::size_t i = 0; i < shape[0]; ++i) {
        const ad::Shape one{1, shape[1], shape[2], shape[3]};
        const ad::Tensor p(one, std::vector<double>(b.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                    b.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
        const ad::Tensor t(one, std::vector<double>(m.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                    m.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
        out.dsc += dsc(p, t);
        out.iou += iou(p, t);
    }
    out.dsc /= static_cast<double>(shape[0]);
    out.iou /= static_cast<double>(shape[0]);
    return out;
}

std::vector<EpisodeReport> meta_test(const SegModel& model, const ParamVector& theta, const DataPool& holdout,
                                     const std::vector<std::string>& training_pools, const LossConfig& loss,
                                     const FinetuneConfig& cfg, const ReportTags& tags, std::size_t threads) {
    cfg.validate();
    loss.validate();
    check_csv_field(tags.algo);
    check_csv_field(tags.setup);
    if (std::find(training_pools.begin(), training_pools.end(), holdout.name) != training_pools.end()) {
        throw Error("meta_test: holdout pool '" + holdout.name + "' was also used for training");
    }
    const std::vector<DataPool> pools{holdout};
    EpisodeConfig episode;
    episode.n_ways = cfg.n_ways;
    episode.k_shots = cfg.k_shots;
    episode.q_queries = cfg.q_queries;
    episode.setup = Setup::exclusive;
    episode.seed = cfg.seed;

    std::vector<EpisodeReport> reports(cfg.eval_tasks);
    parallel_for(cfg.eval_tasks, threads, [&](std::size_t i) {
        try {
            const auto start = std::chrono::steady_clock::now();
            Task task = sample_task(pools, episode, i);
            const ad::Tensor query_masks = std::move(task.query_masks);
            const FinetuneResult tuned =
                finetune(model, theta, SupportSet{task.support_images, task.support_masks}, loss, cfg);
            const QueryMetrics metrics =
                query_metrics(model.predict(tuned.phi, task.query_images), query_masks, cfg.threshold);
            EpisodeReport& r = reports[i];
            r.task_id = i;
            r.algo = tags.algo;
            r.setup = tags.setup;
            r.k_shots = cfg.k_shots;
            r.support_loss_final = tuned.support_loss_final;
            r.query_dsc = metrics.dsc;
            r.query_iou = metrics.iou;
            r.cg_iters_used = tags.cg_iters_used;
            if (cfg.record_time) {
                r.wall_time_ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            }
        } catch (const std::exception& e) {
            rethrow_with_context("eval task " + std::to_string(i) + " on '" + holdout.name + "'", e);
        }
    });
    return reports;
}

void NaiveConfig::validate() const {
    if (batch_size < 1) throw Error("naive config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("naive config: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw Error("naive config: weight_decay must be >= 0");
}

kv::Fields NaiveConfig::fields() const {
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"learning_rate", kv::from_double(learning_rate)},
            {"weight_decay", kv::from_double(weight_decay)},
            {"seed", std::to_string(seed)}};
}

void NaiveConfig::set(std::string_view key, std::string_view value) {
    if (key == "epochs") epochs = kv::to_u64(key, value);
    else if (key == "batch_size") batch_size = kv::to_u64(key, value);
    else if (key == "learning_rate") learning_rate = kv::to_double(key, value);
    else if (key == "weight_decay") weight_decay = kv::to_double(key, value);
    else if (key == "seed") seed = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

NaiveTraining train_naive(const SegModel& model, const std::vector<DataPool>& train_pools, const LossConfig& loss,
                          const NaiveConfig& cfg) {
    cfg.validate();
    loss.validate();
    if (train_pools.empty()) throw Error("train_naive: no training pools");
    std::vector<SampleRef> refs;
    for (std::size_t p = 0; p < train_pools.size(); ++p) {
        train_pools[p].validate();
        if (train_pools[p].resolution != model.config().input_size ||
            train_pools[p].channels != model.config().in_channels) {
            throw Error("train_naive: pool '" + train_pools[p].name + "' does not match the model input");
        }
        for (std::size_t i = 0; i < train_pools[p].size(); ++i) refs.push_back({p, i});
    }

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    NaiveTraining out;
    out.theta = model.params();
    ParamVector m(out.theta.layout_ptr()), v(out.theta.layout_ptr());
    std::uint64_t t = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed({cfg.seed, epoch}));
        std::shuffle(refs.begin(), refs.end(), rng);
        double loss_sum = 0.0, dsc_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < refs.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(refs.size(), start + cfg.batch_size);
            std::vector<double> images, masks;
            for (std::size_t j = start; j < end; ++j) {
                const auto& item = train_pools[refs[j].pool].items[refs[j].item];
                images.insert(images.end(), item.image.begin(), item.image.end());
                masks.insert(masks.end(), item.mask.begin(), item.mask.end());
            }
            const std::size_t s = model.config().input_size;
            const ad::Tensor x({end - start, model.config().in_channels, s, s}, std::move(images));
            const ad::Tensor y({end - start, 1, s, s}, std::move(masks));

            ad::Tape tape;
            const ParamTensors params = bind(tape, out.theta);
            const ad::Tensor pred = model.forward(params, x);
            ad::Tensor l = data_loss(pred, y, loss);
            const ad::Tensor reg = regularizer(params, nullptr, cfg.weight_decay);
            if (reg.defined()) l = ad::add(l, reg);
            const double value = l.item();
            if (!std::isfinite(value)) {
                throw Error("train_naive: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches));
            }
            loss_sum += value;
            dsc_sum += query_metrics(pred.detach(), y, 0.5).dsc;
            const ParamVector g = grad(l, params);

            ++t;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
            auto th = out.theta.data();
            auto md = m.data();
            auto vd = v.data();
            const auto gd = g.data();
            for (std::size_t i = 0; i < th.size(); ++i) {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                th[i] -= cfg.learning_rate * (md[i] / c1) / (std::sqrt(vd[i] / c2) + eps);
            }
            ++batches;
        }
        out.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        out.epoch_dsc.push_back(dsc_sum / static_cast<double>(batches));
    }
    return out;
}

std::vector<EpisodeReport> naive_baseline(const SegModel& model, const std::vector<DataPool>& train_pools,
                                          const DataPool& holdout, const LossConfig& loss, const NaiveConfig& naive,
                                          const FinetuneConfig& ft, const std::string& setup, std::size_t threads,
                                          NaiveTraining* training) {
    NaiveTraining trained = train_naive(model, train_pools, loss, naive);
    FinetuneConfig no_tuning = ft;
    no_tuning.steps = 0;
    std::vector<std::string> names;
    for (const auto& p : train_pools) names.push_back(p.name);
    auto reports = meta_test(model, trained.theta, holdout, names, loss, no_tuning, ReportTags{"naive", setup, 0.0},
                             threads);
    if (training) *training = std::move(trained);
    return reports;
}

void write_reports(std::ostream& out, const std::vector<EpisodeReport>& reports) {
    out << kReportHeader << '\n';
    for (const auto& r : reports) {
        check_csv_field(r.algo);
        check_csv_field(r.setup);
        out << r.task_id << ',' << r.algo << ',' << r.setup << ',' << r.k_shots << ','
            << kv::from_double(r.support_loss_final) << ',' << kv::from_double(r.query_dsc) << ','
            << kv::from_double(r.query_iou) << ',' << kv::from_double(r.cg_iters_used) << ','
            << kv::from_double(r.wall_time_ms) << '\n';
    }
}

std::vector<EpisodeReport> read_reports(std::istream& in, const std::string& source) {
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader) {
        throw Error(source + ": expected header '" + std::string(kReportHeader) + "'");
    }
    std::vector<EpisodeReport> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        const std::string where = source + ":" + std::to_string(lineno);
        if (f.size() != 9) throw Error(where + ": expected 9 fields, got " + std::to_string(f.size()));
        try {
            EpisodeReport r;
            r.task_id = kv::to_u64("task_id", f[0]);
            r.algo = f[1];
            r.setup = f[2];
            r.k_shots = kv::to_u64("k_shots", f[3]);
            r.support_loss_final = kv::to_double("support_loss_final", f[4]);
            r.query_dsc = kv::to_double("query_dsc", f[5]);
            r.query_iou = kv::to_double("query_iou", f[6]);
            r.cg_iters_used = kv::to_double("cg_iters_used", f[7]);
            r.wall_time_ms = kv::to_double("wall_time_ms", f[8]);
            if (r.query_dsc < 0.0 || r.query_dsc > 1.0 || r.query_iou < 0.0 || r.query_iou > 1.0) {
                throw Error("metrics outside [0, 1]");
            }
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            rethrow_with_context(where, e);
        }
    }
    return out;
}

void write_reports_file(const std::string& path, const std::vector<EpisodeReport>& reports) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    write_reports(out, reports);
    if (!out) throw Error("write to '" + path + "' failed");
}

std::vector<EpisodeReport> read_reports_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read '" + path + "'");
    return read_reports(in, path);
}

std::vector<ReportSummary> summarize(const std::vector<EpisodeReport>& reports) {
    struct Group {
        ReportSummary s;
        std::vector<double> dsc, iou, loss;
    };
    std::vector<Group> groups;
    for (const auto& r : reports) {
        auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
            return g.s.algo == r.algo && g.s.setup == r.setup && g.s.k_shots == r.k_shots;
        });
        if (it == groups.end()) {
            groups.push_back({});
            it = groups.end() - 1;
            it->s.algo = r.algo;
            it->s.setup = r.setup;
            it->s.k_shots = r.k_shots;
        }
        it->dsc.push_back(r.query_dsc);
        it->iou.push_back(r.query_iou);
        it->loss.push_back(r.support_loss_final);
    }
    std::vector<ReportSummary> out;
    for (auto& g : groups) {
        g.s.tasks = g.dsc.size();
        std::tie(g.s.mean_dsc, g.s.std_dsc) = mean_std(g.dsc);
        std::tie(g.s.mean_iou, g.s.std_iou) = mean_std(g.iou);
        g.s.mean_support_loss = mean_std(g.loss).first;
        out.push_back(g.s);
    }
    return out;
}

}  // namespace imaml
