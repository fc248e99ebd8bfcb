#pragma once

// Meta-testing: few-shot fine-tuning of a parameter vector on held-out tasks,
// query metrics, the naive supervised baseline, and report (de)serialization.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "imaml/inner_loop.hpp"
#include "imaml/kv_text.hpp"
#include "imaml/model.hpp"
#include "imaml/tasks.hpp"

namespace imaml {

struct FinetuneConfig {
    std::size_t steps = 10;
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    Optimizer optimizer = Optimizer::gd;
    double threshold = 0.5;
    std::size_t n_ways = 2;
    std::size_t k_shots = 5;
    std::size_t q_queries = 5;
    std::size_t eval_tasks = 20;
    std::uint64_t seed = 0;
    /// Fill wall_time_ms; off keeps reports byte-reproducible.
    bool record_time = false;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const FinetuneConfig&) const = default;
};

struct EpisodeReport {
    std::uint64_t task_id = 0;
    std::string algo;
    std::string setup;
    std::size_t k_shots = 0;
    double support_loss_final = 0.0;
    double query_dsc = 0.0;
    double query_iou = 0.0;
    double cg_iters_used = 0.0;
    double wall_time_ms = 0.0;

    bool operator==(const EpisodeReport&) const = default;
};

/// Support half of a task; fine-tuning sees nothing else.
struct SupportSet {
    ad::Tensor images;
    ad::Tensor masks;
};

struct FinetuneResult {
    ParamVector phi;
    double support_loss_final = 0.0;
};

/// Descends data loss + weight_decay * |p|^2 on the support set from `theta`.
FinetuneResult finetune(const SegModel& model, const ParamVector& theta, const SupportSet& support,
                        const LossConfig& loss, const FinetuneConfig& cfg);

/// Per-image mean DSC and IoU of thresholded predictions.
struct QueryMetrics {
    double dsc = 0.0;
    double iou = 0.0;
};
QueryMetrics query_metrics(const ad::Tensor& predictions, const ad::Tensor& masks, double threshold);

/// Labels written into every report of a run.
struct ReportTags {
    std::string algo;
    std::string setup;
    double cg_iters_used = 0.0;
};

/// Fine-tunes `theta` on cfg.eval_tasks tasks drawn from `holdout` and scores
/// the query sets. `training_pools` names must not include the holdout.
std::vector<EpisodeReport> meta_test(const SegModel& model, const ParamVector& theta, const DataPool& holdout,
                                     const std::vector<std::string>& training_pools, const LossConfig& loss,
                                     const FinetuneConfig& cfg, const ReportTags& tags, std::size_t threads = 1);

struct NaiveConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 10;
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const NaiveConfig&) const = default;
};

struct NaiveTraining {
    ParamVector theta;
    /// Mean training-batch loss and DSC per epoch.
    std::vector<double> epoch_loss;
    std::vector<double> epoch_dsc;
};

/// Plain supervised training (Adam) over every item of `train_pools`.
NaiveTraining train_naive(const SegModel& model, const std::vector<DataPool>& train_pools, const LossConfig& loss,
                          const NaiveConfig& cfg);

/// train_naive, then meta_test with zero fine-tuning steps.
std::vector<EpisodeReport> naive_baseline(const SegModel& model, const std::vector<DataPool>& train_pools,
                                          const DataPool& holdout, const LossConfig& loss, const NaiveConfig& naive,
                                          const FinetuneConfig& ft, const std::string& setup,
                                          std::size_t threads = 1, NaiveTraining* training = nullptr);

extern const char* const kReportHeader;

void write_reports(std::ostream& out, const std::vector<EpisodeReport>& reports);
std::vector<EpisodeReport> read_reports(std::istream& in, const std::string& source = "reports");
void write_reports_file(const std::string& path, const std::vector<EpisodeReport>& reports);
std::vector<EpisodeReport> read_reports_file(const std::string& path);

struct ReportSummary {
    std::string algo;
    std::string setup;
    std::size_t k_shots = 0;
    std::size_t tasks = 0;
    double mean_dsc = 0.0;
    double std_dsc = 0.0;
    double mean_iou = 0.0;
    double std_iou = 0.0;
    double mean_support_loss = 0.0;

    bool operator==(const ReportSummary&) const = default;
};

/// Groups by (algo, setup, k_shots) in order of first appearance; sample
/// standard deviations (0 for a single task).
std::vector<ReportSummary> summarize(const std::vector<EpisodeReport>& reports);

}  // namespace imaml
