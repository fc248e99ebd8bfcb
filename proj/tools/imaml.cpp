#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "imaml/experiment.hpp"
#include "imaml/oracles.hpp"

using namespace imaml;

namespace {

ExperimentConfig load_with_overrides(const std::string& path, const std::optional<std::uint64_t>& seed) {
    ExperimentConfig cfg = load_experiment(path);
    if (seed) cfg.seed = *seed;
    if (const char* out = std::getenv("IMAML_OUT"); out && *out) cfg.out_dir = out;
    return cfg;
}

int verify(std::uint64_t seed) {
    bool ok = true;
    for (const auto& r : oracles::run_oracle_suite(seed)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": worst " << r.worst << " (tolerance " << r.tolerance
                  << "); " << r.detail << "\n";
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iMAML / MAML few-shot segmentation experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::size_t threads = 1;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;

    auto* run = app.add_subcommand("run", "meta-train and evaluate every algorithm of a config");
    run->add_option("--config", config_path, "experiment config file")->required();
    run->add_option("--threads", threads, "worker threads (1 is bit-exact)")->check(CLI::PositiveNumber);
    run->add_option("--seed", seed, "overrides [run] seed");
    run->add_flag("--dry-run", dry_run, "print the resolved plan and exit");

    std::vector<std::string> dirs;
    std::string compare_csv;
    auto* compare = app.add_subcommand("compare", "merge the summaries of run directories");
    compare->add_option("dirs", dirs, "run output directories")->required();
    compare->add_option("--csv", compare_csv, "also write the merged table as CSV");

    std::string data_out;
    auto* gen = app.add_subcommand("gen-data", "write the synthetic families of a config as image/mask folders");
    gen->add_option("--config", config_path, "experiment config file")->required();
    gen->add_option("--out", data_out, "destination directory")->required();

    std::uint64_t verify_seed = 0;
    auto* ver = app.add_subcommand("verify", "run the CG and meta-gradient oracle suites");
    ver->add_option("--seed", verify_seed, "problem generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const ExperimentConfig cfg = load_with_overrides(config_path, seed);
            if (dry_run) {
                std::cout << describe_plan(cfg);
                return 0;
            }
            run_experiment(cfg, threads, std::cout);
            return 0;
        }
        if (*compare) {
            const auto rows = compare_runs(dirs);
            std::cout << format_table(rows);
            if (!compare_csv.empty()) write_compare_csv(compare_csv, rows);
            return 0;
        }
        if (*gen) {
            for (const auto& d : generate_data(load_experiment(config_path), data_out)) std::cout << d << "\n";
            return 0;
        }
        if (*ver) return verify(verify_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
