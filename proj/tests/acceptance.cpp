// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// hard criterion fails. `acceptance 1 3` runs a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradient_cases.hpp"
#include "imaml/error.hpp"
#include "imaml/experiment.hpp"
#include "imaml/oracles.hpp"

using namespace imaml;
using namespace imaml::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
    /// Report a failure as WARN without failing the suite.
    bool warn_only = false;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), format, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read '" + p.string() + "'");
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path g_out;

Outcome gradients() {
    std::vector<PrimitiveCase> cases = primitive_cases();
    for (auto& c : loss_cases()) cases.push_back(std::move(c));
    for (auto& c : model_cases()) cases.push_back(std::move(c));
    double worst_ratio = 0.0;
    std::string worst_name, failures;
    int redrawn = 0;
    for (const auto& c : cases) {
        int skipped = 0;
        const auto errors = case_errors(c, 20, 20240601, &skipped);
        redrawn += skipped;
        const double worst = *std::max_element(errors.begin(), errors.end());
        if (worst / c.tolerance > worst_ratio) {
            worst_ratio = worst / c.tolerance;
            worst_name = c.name;
        }
        if (worst > c.tolerance) failures += " " + c.name + fmt("(%.2g)", worst);
    }
    return {failures.empty(),
            fmt("%zu functions x 20 probes; worst %s at %.2f of its tolerance; %d kink probes redrawn", cases.size(),
                worst_name.c_str(), worst_ratio, redrawn) +
                (failures.empty() ? "" : "; failing:" + failures)};
}

Outcome hvps() {
    struct Loss {
        std::string name;
        LayoutPtr layout;
        std::function<LossFn(std::uint64_t)> make;
    };
    const std::vector<Loss> losses{
        {"logistic", make_layout({{"w", {5}}}), logistic_loss},
        {"conv net", make_layout({{"w1", {2, 1, 3, 3}}, {"b1", {2}}, {"wg", {1, 2, 1, 1}}, {"wo", {1, 4, 1, 1}}}),
         conv_net_loss},
    };
    double fd_worst = 0.0, lin_worst = 0.0, sym_worst = 0.0;
    int trials = 0;
    for (const auto& l : losses) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const LossFn f = l.make(seed);
            std::mt19937_64 rng(seed * 977);
            for (int t = 0; t < 4; ++t, ++trials) {
                const ParamVector at = random_params(rng, l.layout);
                const ParamVector u = random_params(rng, l.layout);
                const ParamVector w = random_params(rng, l.layout);
                const ParamVector hu = hvp(f, at, u);
                const ParamVector hw = hvp(f, at, w);
                fd_worst = std::max(fd_worst, relative_error(hu, gradient_fd(f, at, u, 1e-4)));
                const ParamVector combo = hvp(f, at, 0.7 * u + -1.3 * w);
                lin_worst = std::max(lin_worst, relative_error(combo, 0.7 * hu + -1.3 * hw));
                sym_worst = std::max(sym_worst, relative_error(dot(u, hw), dot(w, hu)));
            }
        }
    }
    const bool ok = fd_worst < 1e-4 && lin_worst < 1e-10 && sym_worst < 1e-8;
    return {ok, fmt("%d probes on losses of 5 and 26 parameters; vs FD of gradients %.2g (<1e-4), linearity %.2g "
                    "(<1e-10), symmetry %.2g (<1e-8)",
                    trials, fd_worst, lin_worst, sym_worst)};
}

Outcome from_oracle(const oracles::OracleResult& r) {
    return {r.passed, fmt("worst %.3g (tolerance %.0e); ", r.worst, r.tolerance) + r.detail};
}

Outcome memory() {
    AttnUNetConfig mc;
    const SegModel model = SegModel::init(mc);
    SynthFamilyConfig fa, fb;
    fa.name = "a";
    fa.seed = 1;
    fb.name = "b";
    fb.contrast = -0.3;
    fb.seed = 2;
    const std::vector<DataPool> pools{generate_pool(fa, 20), generate_pool(fb, 20)};
    const Task task = sample_task(pools, EpisodeConfig{}, 0);
    const SegmentationObjective obj(model, task, LossConfig{});
    std::vector<std::size_t> implicit, unrolled;
    const std::vector<std::size_t> steps{5, 10, 25};
    for (std::size_t t : steps) {
        InnerConfig inner;
        inner.steps = t;
        inner.learning_rate = 0.01;
        inner.lambda_prox = 100.0;
        implicit.push_back(implicit_meta_grad(obj, model.params(), inner, CGConfig{}).peak_tape_nodes);
        unrolled.push_back(unrolled_meta_grad(obj, model.params(), inner).peak_tape_nodes);
    }
    const bool constant = implicit[0] == implicit[1] && implicit[1] == implicit[2];
    const double slope_lo = static_cast<double>(unrolled[1]) - static_cast<double>(unrolled[0]);
    const double slope_hi = static_cast<double>(unrolled[2]) - static_cast<double>(unrolled[1]);
    // per-step growth must be positive and must not shrink
    const bool linear = slope_lo > 0.0 && slope_hi / 15.0 >= slope_lo / 5.0;
    return {constant && linear, fmt("peak tape nodes for T=5/10/25: imaml %zu/%zu/%zu, maml %zu/%zu/%zu", implicit[0],
                                    implicit[1], implicit[2], unrolled[0], unrolled[1], unrolled[2])};
}

Outcome loss_identities() {
    std::vector<std::string> failed;
    int checks = 0;
    auto check = [&](const std::string& name, bool ok) {
        ++checks;
        if (!ok) failed.push_back(name);
    };
    using ad::Tensor;
    std::mt19937_64 rng(7);
    const Tensor target = binary_target(7, {2, 1, 8, 8});
    check("bce(0.5) = ln 2", std::abs(bce(Tensor::full(target.shape(), 0.5), target).item() - std::log(2.0)) <= 1e-9);
    const double perfect = bce(target, target).item();
    check("bce(target, target) <= -ln(1-eps)", perfect >= 0.0 && perfect <= -std::log(1.0 - 1e-7) + 1e-15);
    check("bce two pixels", std::abs(bce(Tensor({2}, {0.9, 0.1}), Tensor({2}, {1, 0})).item() - 0.105361) < 1e-6);
    check("dice all ones", dice_loss(Tensor::full({9}, 1.0), Tensor::full({9}, 1.0)).item() == 0.0);
    check("dice all zeros", dice_loss(Tensor::zeros({9}), Tensor::zeros({9})).item() == 0.0);
    check("dice ones vs zeros", std::abs(dice_loss(Tensor::full({4}, 1.0), Tensor::zeros({4})).item() - 0.8) < 1e-15);
    check("logcosh_dice(0) = 0", logcosh_dice(Tensor::full({3}, 1.0), Tensor::full({3}, 1.0)).item() == 0.0);
    check("logcosh_dice(0.8) = log cosh 0.8",
          std::abs(logcosh_dice(Tensor::full({4}, 1.0), Tensor::zeros({4})).item() - std::log(std::cosh(0.8))) <= 1e-9);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 200; ++i) {
        const Tensor p = random_tensor(rng, target.shape(), 0.0, 1.0);
        pairs.emplace_back(dice_loss(p, target).item(), logcosh_dice(p, target).item());
    }
    std::sort(pairs.begin(), pairs.end());
    bool monotone = true;
    for (std::size_t i = 1; i < pairs.size(); ++i) monotone = monotone && pairs[i - 1].second <= pairs[i].second;
    check("logcosh_dice monotone in dice", monotone);

    const auto layout = make_layout({{"a", {2}}});
    const ParamVector theta(layout, {0.0, 0.0});
    const ParamVector phi(layout, {0.1, 0.1});
    const Tensor pred = random_tensor(rng, target.shape(), 0.05, 0.95);
    LossConfig cfg;
    check("regularizer 0 at anchor",
          compound_loss(pred, target, constant(theta), &theta, cfg).item() == data_loss(pred, target, cfg).item());
    cfg.lambda_reg = 0.0;
    check("lambda 0 is bce + logcosh dice", compound_loss(pred, target, constant(phi), &theta, cfg).item() ==
                                                bce(pred, target).item() + logcosh_dice(pred, target).item());
    const Tensor mask({1, 1, 2, 2}, {1, 0, 0, 1});
    check("perfect prediction, lambda 100, |phi-theta|^2 0.02 -> 1",
          std::abs(compound_loss(mask, mask, constant(phi), &theta, LossConfig{}).item() - 1.0) < 1e-6);
    const Tensor p4({1, 1, 2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
    const Tensor t4({1, 1, 2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
    const Tensor disjoint({1, 1, 2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
    check("dsc P == T", dsc(p4, p4) == 1.0);
    check("dsc disjoint", dsc(p4, disjoint) == 0.0);
    check("dsc overlap 2 of 4", dsc(p4, t4) == 0.5);
    std::string detail = fmt("%d identities", checks);
    for (const auto& f : failed) detail += "; failed: " + f;
    return {failed.empty(), detail};
}

fs::path source_path(const std::string& rel) { return fs::path(IMAML_SOURCE_DIR) / rel; }

double mean_dsc(const std::vector<ReportSummary>& summary, const std::string& algo) {
    for (const auto& s : summary) {
        if (s.algo == algo) return s.mean_dsc;
    }
    throw Error("no reports for '" + algo + "'");
}

double committed_dsc(const nlohmann::json& j, const std::string& algo) {
    for (const auto& g : j.at("groups")) {
        if (g.at("algo") == algo) return g.at("mean_dsc").get<double>();
    }
    throw Error("committed summary has no '" + algo + "'");
}

Outcome end_to_end() {
    ExperimentConfig cfg = load_experiment(source_path("configs/desk.ini").string());
    cfg.out_dir = (g_out / "desk").string();
    std::ofstream log((g_out / "desk.log").string());
    const RunResult r = run_experiment(cfg, 1, log);
    const double imaml = mean_dsc(r.summary, "imaml");
    const double maml = mean_dsc(r.summary, "maml");
    const double naive = mean_dsc(r.summary, "naive");
    const fs::path expected = source_path("configs/expected/desk");
    const auto committed = nlohmann::json::parse(slurp(expected / "summary.json"));
    const double committed_margin = committed_dsc(committed, "imaml") - committed_dsc(committed, "naive");
    const double margin = imaml - naive;
    const bool ordered = imaml >= maml && maml >= naive;
    const bool ok = ordered && margin >= 0.10 && std::abs(margin - committed_margin) <= 0.02;
    const bool identical = slurp(expected / "reports.csv") == slurp(fs::path(cfg.out_dir) / "reports.csv");
    return {ok, fmt("DSC imaml %.4f, maml %.4f, naive %.4f; imaml-maml %+.2g; margin %.4f (>= 0.10, committed %.4f "
                    "+-0.02); reports %s the committed run",
                    imaml, maml, naive, imaml - maml, margin, committed_margin,
                    identical ? "byte-identical to" : "differ from")};
}

Outcome ablation() {
    ExperimentConfig cfg = load_experiment(source_path("configs/desk.ini").string());
    cfg.name = "desk-ablation";
    cfg.out_dir = (g_out / "desk_ablation").string();
    cfg.algos = {Algo::imaml};
    cfg.ablation = true;
    std::ofstream log((g_out / "desk_ablation.log").string());
    const RunResult r = run_experiment(cfg, 1, log);
    const double dice = mean_dsc(r.summary, "imaml-dice");
    const double logcosh = mean_dsc(r.summary, "imaml-logcosh");
    return {logcosh >= dice, fmt("imaml DSC with dice %.4f, with log-cosh dice %.4f (%+.4f)", dice, logcosh,
                                 logcosh - dice),
            true};
}

Outcome reproducibility() {
    std::string differing;
    const std::vector<std::string> files{"reports.csv", "loss_curve.csv", "naive_curve.csv", "summary.json"};
    std::vector<fs::path> dirs;
    for (const char* tag : {"smoke_1", "smoke_2"}) {
        ExperimentConfig cfg = load_experiment(source_path("configs/smoke.ini").string());
        cfg.out_dir = (g_out / tag).string();
        std::ostringstream log;
        run_experiment(cfg, 1, log);
        dirs.emplace_back(cfg.out_dir);
    }
    for (const auto& f : files) {
        if (slurp(dirs[0] / f) != slurp(dirs[1] / f)) differing += " " + f;
    }
    return {differing.empty(), differing.empty() ? "two single-threaded runs of configs/smoke.ini: " +
                                                       std::to_string(files.size()) + " outputs byte-identical"
                                                 : "differing:" + differing};
}

struct Criterion {
    int id;
    const char* title;
    double budget_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::vector<int> only;
    std::string out = (fs::temp_directory_path() / "imaml_acceptance").string();
    std::uint64_t oracle_seed = 20240601;
    app.add_option("criteria", only, "criterion numbers to run (default all)");
    app.add_option("--out", out, "scratch directory for experiment outputs");
    CLI11_PARSE(app, argc, argv);
    g_out = out;
    fs::create_directories(g_out);

    const std::vector<Criterion> criteria{
        {1, "gradient correctness", 60, gradients},
        {2, "hvp correctness", 60, hvps},
        {3, "cg correctness", 60, [&] { return from_oracle(oracles::check_cg_direct_solve(oracle_seed)); }},
        {4, "implicit = closed form", 60,
         [&] { return from_oracle(oracles::check_implicit_closed_form(oracle_seed + 1)); }},
        {5, "implicit <-> unrolled convergence", 120,
         [&] { return from_oracle(oracles::check_unrolled_convergence(oracle_seed + 1)); }},
        {6, "memory contract", 120, memory},
        {7, "loss identities", 60, loss_identities},
        {8, "end-to-end ordering at desk scale", 900, end_to_end},
        {9, "ablation direction (informational)", 900, ablation},
        {10, "reproducibility", 300, reproducibility},
    };
    const std::set<int> wanted(only.begin(), only.end());
    bool all_ok = true;
    for (const auto& c : criteria) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what(), c.id == 9};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs <= c.budget_s;
        if (!in_time) o.detail += fmt("; over the %.0f s budget", c.budget_s);
        const bool ok = o.passed && in_time;
        const char* verdict = ok ? "PASS" : (o.warn_only ? "WARN" : "FAIL");
        std::cout << "criterion " << c.id << " " << verdict << " " << c.title << " (" << fmt("%.1f s", secs)
                  << "): " << o.detail << std::endl;
        if (!ok && !o.warn_only) all_ok = false;
    }
    return all_ok ? 0 : 1;
}
