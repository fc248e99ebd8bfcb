#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "imaml/error.hpp"
#include "imaml/experiment.hpp"

using namespace imaml;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"([run]
name = small
seed = 3

[data]
pool_size = 24

[model]
input_size = 16
base_channels = 4
depth = 2

[family.a]
category = lesion
resolution = 16
contrast = -0.3
seed = 1

[family.b]
category = lesion
resolution = 16
contrast = -0.25
seed = 2

[family.c]
category = polyp
resolution = 16
contrast = 0.3
seed = 3

[inner]
steps = 3
learning_rate = 0.02
lambda_prox = 20

[cg]
max_iters = 3

[outer]
learning_rate = 0.001
total_tasks = 6
meta_batch = 2

[episode]
k_shots = 2
q_queries = 2

[finetune]
steps = 3
eval_tasks = 3
k_shots = 2
q_queries = 2

[naive]
epochs = 1
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("imaml_runner_" + name);
    fs::remove_all(p);
    return p;
}

ExperimentConfig small(const fs::path& out) {
    ExperimentConfig cfg = parse_experiment(kSmall, "small.ini");
    cfg.out_dir = out.string();
    return cfg;
}

std::string error_of(const std::string& text) {
    try {
        (void)parse_experiment(text, "exp.ini");
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(ExperimentConfig, DefaultsRoundTrip) {
    const ExperimentConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(parse_experiment(format_experiment(cfg)), cfg);
}

TEST(ExperimentConfig, EditedConfigRoundTrips) {
    ExperimentConfig cfg = small("/tmp/x");
    cfg.ablation = true;
    cfg.algos = {Algo::imaml};
    cfg.outer.learning_rate = 0.1 + 0.2;
    FamilySource real;
    real.synth.name = "b";
    real.synth.category = "lesion";
    real.path = "/data/b";
    cfg.families[1] = real;
    const std::string text = format_experiment(cfg);
    EXPECT_EQ(parse_experiment(text), cfg);
    EXPECT_EQ(format_experiment(parse_experiment(text)), text);
}

TEST(ExperimentConfig, ErrorsNameSourceLineAndKey) {
    EXPECT_NE(error_of("[run]\nname = x\n\n[inner]\nstepz = 3\n").find("exp.ini:5"), std::string::npos);
    EXPECT_NE(error_of("[run]\nname = x\n\n[inner]\nstepz = 3\n").find("stepz"), std::string::npos);
    EXPECT_NE(error_of("[bogus]\nx = 1\n").find("exp.ini:2"), std::string::npos);
    EXPECT_NE(error_of("[outer]\nlearning_rate = fast\n").find("exp.ini:2: [outer] learning_rate"), std::string::npos);
    EXPECT_NE(error_of("[model]\nseed = 4\n").find("[run] seed"), std::string::npos);
    EXPECT_NE(error_of("[run]\nalgos = imaml,reptile\n").find("exp.ini:2"), std::string::npos);
}

TEST(ExperimentConfig, SemanticChecks) {
    EXPECT_NE(error_of("[data]\nholdout = a\n").find("also a training family"), std::string::npos);
    EXPECT_NE(error_of("[data]\nholdout = zz\n").find("family.zz"), std::string::npos);
    EXPECT_NE(error_of("[inner]\nsteps = 30\n").find("maml"), std::string::npos);
    EXPECT_EQ(error_of("[run]\nalgos = imaml\n\n[inner]\nsteps = 30\n"), "");
    // the first family section replaces the defaults, so b and c are now undefined
    EXPECT_NE(error_of("[family.a]\ncontrast = 0.1\n").find("family.b"), std::string::npos);
}

TEST(ExperimentConfig, SameCategoryCrossTestNeedsAnotherCategory) {
    ExperimentConfig cfg;
    cfg.episode.setup = Setup::same_category_cross_test;
    EXPECT_NO_THROW(cfg.validate());
    cfg.families[2].synth.category = cfg.families[0].synth.category;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(ExperimentConfig, SeedsDeriveFromRunSeed) {
    ExperimentConfig a, b;
    b.seed = 1;
    EXPECT_NE(a.resolved().model.seed, b.resolved().model.seed);
    EXPECT_NE(a.resolved().episode.seed, a.resolved().finetune.seed);
    EXPECT_EQ(a.resolved().model.seed, ExperimentConfig{}.resolved().model.seed);
}

TEST(ExperimentConfig, MissingFileNamesThePath) {
    try {
        (void)load_experiment("/nonexistent/exp.ini");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/exp.ini"), std::string::npos);
    }
}

TEST(Runner, DryRunPlanComputesNothing) {
    const fs::path out = scratch("dry");
    const std::string plan = describe_plan(small(out));
    EXPECT_NE(plan.find("imaml: 6 tasks in 3 outer steps"), std::string::npos) << plan;
    EXPECT_NE(plan.find("[run]"), std::string::npos);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Runner, SmallRunWritesArtifactsAndIsByteReproducible) {
    const fs::path out1 = scratch("run1");
    const fs::path out2 = scratch("run2");
    std::ostringstream log;
    const RunResult r = run_experiment(small(out1), 1, log);
    for (const char* algo : {"imaml", "maml", "naive"}) {
        const auto n = std::count_if(r.reports.begin(), r.reports.end(), [&](const auto& x) { return x.algo == algo; });
        EXPECT_GE(n, 3) << algo;
    }
    for (const char* f : {"config.ini", "reports.csv", "loss_curve.csv", "naive_curve.csv", "summary.json",
                          "imaml/meta_state.ck", "maml/meta_state.ck", "naive/model.ck"}) {
        EXPECT_TRUE(fs::exists(out1 / f)) << f;
    }
    // the copy is the exact config, seeds resolved
    EXPECT_EQ(parse_experiment(slurp(out1 / "config.ini")), small(out1));
    EXPECT_EQ(read_reports_file((out1 / "reports.csv").string()), r.reports);
    const std::string curve = slurp(out1 / "loss_curve.csv");
    EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 7);

    std::ostringstream log2;
    run_experiment(small(out2), 1, log2);
    for (const char* f : {"reports.csv", "loss_curve.csv", "naive_curve.csv", "summary.json"}) {
        EXPECT_EQ(slurp(out1 / f), slurp(out2 / f)) << f;
    }

    const fs::path out3 = scratch("run3");
    std::ostringstream log3;
    const RunResult threaded = run_experiment(small(out3), 3, log3);
    EXPECT_EQ(threaded.reports, r.reports);

    const auto one = compare_runs({out1.string()});
    ASSERT_EQ(one.size(), 3u);
    EXPECT_EQ(one[0].run, "small");
    EXPECT_EQ(one[0].summary, r.summary[0]);
    EXPECT_EQ(compare_runs({out1.string(), out2.string()}).size(), 6u);
    EXPECT_NE(format_table(one).find("naive"), std::string::npos);
    for (const auto& p : {out1, out2, out3}) fs::remove_all(p);
}

TEST(Runner, AblationLabelsEveryVariant) {
    const fs::path out = scratch("ablation");
    ExperimentConfig cfg = small(out);
    cfg.algos = {Algo::imaml};
    cfg.ablation = true;
    std::ostringstream log;
    const auto r = run_experiment(cfg, 1, log);
    ASSERT_EQ(r.summary.size(), 2u);
    EXPECT_EQ(r.summary[0].algo, "imaml-dice");
    EXPECT_EQ(r.summary[1].algo, "imaml-logcosh");
    EXPECT_NE(r.summary[0].mean_dsc, r.summary[1].mean_dsc);
    fs::remove_all(out);
}

TEST(Compare, SchemaMismatchIsAnError) {
    const fs::path dir = scratch("schema");
    fs::create_directories(dir);
    std::ofstream(dir / "summary.json") << R"({"schema": "other/9", "run": "x"})";
    std::ofstream(dir / "reports.csv") << kReportHeader << "\n";
    EXPECT_THROW(compare_runs({dir.string()}), Error);
    std::ofstream(dir / "summary.json") << summary_json("x", {});
    std::ofstream(dir / "reports.csv") << "task_id,algo,dsc\n";
    EXPECT_THROW(compare_runs({dir.string()}), Error);
    EXPECT_THROW(compare_runs({}), Error);
    fs::remove_all(dir);
}

TEST(GenData, WritesLoadablePools) {
    const fs::path out = scratch("gen");
    const ExperimentConfig cfg = small(out);
    const auto dirs = generate_data(cfg, out.string());
    ASSERT_EQ(dirs.size(), 3u);
    const DataPool loaded = load_pool(dirs[0], 16, 1, "a", "lesion");
    EXPECT_EQ(loaded.size(), 24u);
    fs::remove_all(out);
}
