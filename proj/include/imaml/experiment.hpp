#pragma once

// Experiment configuration file, the run pipeline (pools, meta-training per
// algorithm, meta-testing, artifacts) and the report comparison table.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "imaml/evaluation.hpp"
#include "imaml/meta_gradient.hpp"
#include "imaml/model.hpp"
#include "imaml/tasks.hpp"

namespace imaml {

/// A synthetic family, or an image/mask directory when `path` is set.
struct FamilySource {
    SynthFamilyConfig synth;
    std::string path;

    [[nodiscard]] const std::string& name() const { return synth.name; }
    bool operator==(const FamilySource&) const = default;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::string out_dir = "runs/experiment";
    std::vector<Algo> algos{Algo::imaml, Algo::maml, Algo::naive};
    /// Run every algorithm twice, with plain dice and with log-cosh dice.
    bool ablation = false;
    std::uint64_t seed = 0;

    std::vector<std::string> train{"a", "b"};
    std::string holdout = "c";
    std::size_t pool_size = 200;
    std::vector<FamilySource> families = default_families();

    AttnUNetConfig model;
    EpisodeConfig episode;
    InnerConfig inner;
    CGConfig cg;
    OuterConfig outer;
    LossConfig loss;
    FinetuneConfig finetune;
    NaiveConfig naive;

    static std::vector<FamilySource> default_families();

    void validate() const;
    [[nodiscard]] const FamilySource& family(const std::string& name) const;
    /// Copy with the model/episode/finetune/naive seeds derived from `seed`.
    [[nodiscard]] ExperimentConfig resolved() const;
    bool operator==(const ExperimentConfig&) const = default;
};

/// Errors name `source:line`. The first [family.*] section replaces the
/// default families.
ExperimentConfig parse_experiment(std::string_view text, const std::string& source = "config");
ExperimentConfig load_experiment(const std::string& path);
std::string format_experiment(const ExperimentConfig& cfg);

/// Builds every family the config references, in declaration order.
std::vector<DataPool> build_pools(const ExperimentConfig& cfg);

/// Human-readable summary of what run_experiment would do.
std::string describe_plan(const ExperimentConfig& cfg);

struct CurvePoint {
    std::string algo;
    std::uint64_t epoch = 0;
    std::uint64_t tasks_seen = 0;
    double mean_query_loss = 0.0;
    double mean_support_loss = 0.0;
};

struct RunResult {
    std::string out_dir;
    std::vector<EpisodeReport> reports;
    std::vector<ReportSummary> summary;
    std::vector<CurvePoint> curve;
};

/// Writes config.ini, <label>/ checkpoints, reports.csv, loss_curve.csv,
/// naive_curve.csv and summary.json under cfg.out_dir. Progress goes to `log`.
RunResult run_experiment(const ExperimentConfig& cfg, std::size_t threads, std::ostream& log);

/// Label of one trained variant: the algorithm, plus the loss under ablation.
std::string variant_label(Algo algo, bool ablation, bool use_logcosh);

extern const char* const kSummarySchema;
std::string summary_json(const std::string& run_name, const std::vector<ReportSummary>& summary);

struct CompareRow {
    std::string run;
    ReportSummary summary;
};

/// Reads reports.csv and summary.json of each run directory.
std::vector<CompareRow> compare_runs(const std::vector<std::string>& dirs);
std::string format_table(const std::vector<CompareRow>& rows);
void write_compare_csv(const std::string& path, const std::vector<CompareRow>& rows);

/// Saves every synthetic family of the config under `out_dir/<name>`.
std::vector<std::string> generate_data(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace imaml
