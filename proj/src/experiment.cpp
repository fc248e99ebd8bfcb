#include "imaml/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "imaml/error.hpp"
#include "imaml/rng.hpp"

namespace imaml {

namespace fs = std::filesystem;

const char* const kSummarySchema = "imaml-summary/1";

namespace {

constexpr std::string_view kFamilyPrefix = "family.";

// Sub-config seeds come from [run] seed; these tags pick the stream.
constexpr std::uint64_t kModelSeedTag = 1;
constexpr std::uint64_t kEpisodeSeedTag = 2;
constexpr std::uint64_t kFinetuneSeedTag = 3;
constexpr std::uint64_t kNaiveSeedTag = 4;

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        std::size_t end = s.find(',', start);
        if (end == std::string_view::npos) end = s.size();
        std::string_view item = s.substr(start, end - start);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (!item.empty()) out.emplace_back(item);
        start = end + 1;
    }
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
    return out;
}

kv::Fields without_seed(kv::Fields fields) {
    std::erase_if(fields, [](const auto& f) { return f.first == "seed"; });
    return fields;
}

kv::Fields family_fields(const FamilySource& f) {
    if (!f.path.empty()) return {{"path", f.path}, {"category", f.synth.category}};
    kv::Fields fields = f.synth.fields();
    std::erase_if(fields, [](const auto& e) { return e.first == "name"; });
    return fields;
}

template <class Config>
void set_unseeded(Config& cfg, std::string_view key, std::string_view value) {
    if (key == "seed") throw Error("seeds derive from [run] seed; 'seed' is not settable here");
    cfg.set(key, value);
}

void set_run(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    if (key == "name") cfg.name = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "algos") {
        cfg.algos.clear();
        for (const auto& a : split_list(value)) cfg.algos.push_back(parse_algo(a));
    } else if (key == "ablation") cfg.ablation = kv::to_bool(key, value);
    else if (key == "seed") cfg.seed = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

void set_data(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    if (key == "train") cfg.train = split_list(value);
    else if (key == "holdout") cfg.holdout = value;
    else if (key == "pool_size") cfg.pool_size = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

void set_family(FamilySource& f, std::string_view key, std::string_view value) {
    if (key == "name") throw Error("the family name comes from the section header");
    if (key == "path") f.path = value;
    else f.synth.set(key, value);
}

std::string csv_double(double v) { return kv::from_double(v); }

}  // namespace

std::vector<FamilySource> ExperimentConfig::default_families() {
    SynthFamilyConfig a;
    a.name = "a";
    a.category = "lesion";
    a.contrast = -0.3;
    a.background = 0.6;
    a.seed = 11;
    SynthFamilyConfig b = a;
    b.name = "b";
    b.contrast = -0.25;
    b.roughness = 0.3;
    b.texture_freq = 5.0;
    b.seed = 12;
    SynthFamilyConfig c;
    c.name = "c";
    c.category = "polyp";
    c.contrast = 0.3;
    c.background = 0.35;
    c.distractor_count = 2;
    c.distractor_contrast = -0.2;
    c.seed = 13;
    return {{a, ""}, {b, ""}, {c, ""}};
}

const FamilySource& ExperimentConfig::family(const std::string& family_name) const {
    for (const auto& f : families) {
        if (f.name() == family_name) return f;
    }
    throw Error("experiment config: no [family." + family_name + "] section");
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw Error("experiment config: [run] name is empty");
    if (name.find_first_of(",\"\n") != std::string::npos) {
        throw Error("experiment config: [run] name must not contain commas, quotes or newlines");
    }
    if (algos.empty()) throw Error("experiment config: [run] algos is empty");
    for (std::size_t i = 0; i < algos.size(); ++i) {
        if (std::find(algos.begin(), algos.begin() + static_cast<std::ptrdiff_t>(i), algos[i]) !=
            algos.begin() + static_cast<std::ptrdiff_t>(i)) {
            throw Error("experiment config: algorithm '" + to_string(algos[i]) + "' listed twice");
        }
    }
    if (train.empty()) throw Error("experiment config: [data] train is empty");
    if (pool_size < 1) throw Error("experiment config: [data] pool_size must be >= 1");
    std::set<std::string> seen;
    for (const auto& f : families) {
        if (!seen.insert(f.name()).second) throw Error("experiment config: family '" + f.name() + "' defined twice");
        if (f.path.empty()) {
            f.synth.validate();
            if (f.synth.resolution != model.input_size) {
                throw Error("experiment config: family '" + f.name() + "' has resolution " +
                            std::to_string(f.synth.resolution) + " but the model expects " +
                            std::to_string(model.input_size));
            }
            if (model.in_channels != 1) {
                throw Error("experiment config: synthetic family '" + f.name() + "' is single-channel");
            }
        }
    }
    for (const auto& t : train) {
        (void)family(t);
        if (t == holdout) throw Error("experiment config: holdout family '" + holdout + "' is also a training family");
    }
    (void)family(holdout);
    model.validate();
    episode.validate();
    inner.validate();
    cg.validate();
    outer.validate();
    loss.validate();
    finetune.validate();
    naive.validate();
    const bool maml = std::find(algos.begin(), algos.end(), Algo::maml) != algos.end();
    if (maml && inner.steps > kMaxUnrolledSteps) {
        throw Error("experiment config: maml unrolls at most " + std::to_string(kMaxUnrolledSteps) +
                    " inner steps, [inner] steps is " + std::to_string(inner.steps));
    }
    if (maml && inner.optimizer != Optimizer::gd) throw Error("experiment config: maml needs [inner] optimizer = gd");
    if (episode.setup == Setup::same_category_cross_test) {
        const std::string& category = family(train.front()).synth.category;
        for (const auto& t : train) {
            if (family(t).synth.category != category) {
                throw Error("experiment config: same-category-cross-test needs training families of one category");
            }
        }
        if (family(holdout).synth.category == category) {
            throw Error("experiment config: same-category-cross-test needs a holdout of another category, '" +
                        holdout + "' is '" + category + "'");
        }
    }
}

ExperimentConfig ExperimentConfig::resolved() const {
    ExperimentConfig out = *this;
    out.model.seed = derive_seed({seed, kModelSeedTag});
    out.episode.seed = derive_seed({seed, kEpisodeSeedTag});
    out.finetune.seed = derive_seed({seed, kFinetuneSeedTag});
    out.naive.seed = derive_seed({seed, kNaiveSeedTag});
    return out;
}

ExperimentConfig parse_experiment(std::string_view text, const std::string& source) {
    ExperimentConfig cfg;
    std::vector<kv::Entry> entries;
    try {
        entries = kv::parse(text);
    } catch (const std::exception& e) {
        throw Error(source + ": " + e.what());
    }
    bool families_replaced = false;
    for (const auto& e : entries) {
        try {
            const std::string_view section = e.section;
            if (section == "run") set_run(cfg, e.key, e.value);
            else if (section == "data") set_data(cfg, e.key, e.value);
            else if (section.starts_with(kFamilyPrefix)) {
                const std::string family_name(section.substr(kFamilyPrefix.size()));
                if (family_name.empty()) throw Error("family section needs a name, e.g. [family.a]");
                if (!families_replaced) {
                    cfg.families.clear();
                    families_replaced = true;
                }
                auto it = std::find_if(cfg.families.begin(), cfg.families.end(),
                                       [&](const FamilySource& f) { return f.name() == family_name; });
                if (it == cfg.families.end()) {
                    FamilySource f;
                    f.synth.name = family_name;
                    cfg.families.push_back(f);
                    it = std::prev(cfg.families.end());
                }
                set_family(*it, e.key, e.value);
            } else if (section == "model") set_unseeded(cfg.model, e.key, e.value);
            else if (section == "episode") set_unseeded(cfg.episode, e.key, e.value);
            else if (section == "inner") cfg.inner.set(e.key, e.value);
            else if (section == "cg") cfg.cg.set(e.key, e.value);
            else if (section == "outer") cfg.outer.set(e.key, e.value);
            else if (section == "loss") cfg.loss.set(e.key, e.value);
            else if (section == "finetune") set_unseeded(cfg.finetune, e.key, e.value);
            else if (section == "naive") set_unseeded(cfg.naive, e.key, e.value);
            else if (section.empty()) throw Error("key outside any [section]");
            else throw Error("unknown section [" + e.section + "]");
        } catch (const std::exception& ex) {
            throw Error(source + ":" + std::to_string(e.line) + ": [" + e.section + "] " + e.key + ": " + ex.what());
        }
    }
    try {
        cfg.validate();
    } catch (const std::exception& ex) {
        throw Error(source + ": " + ex.what());
    }
    return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment(buf.str(), path);
}

std::string format_experiment(const ExperimentConfig& cfg) {
    std::vector<std::string> algos;
    for (Algo a : cfg.algos) algos.push_back(to_string(a));
    std::string out = kv::format_section("run", {{"name", cfg.name},
                                                 {"out_dir", cfg.out_dir},
                                                 {"algos", join(algos)},
                                                 {"ablation", kv::from_bool(cfg.ablation)},
                                                 {"seed", std::to_string(cfg.seed)}});
    out += "\n" + kv::format_section("data", {{"train", join(cfg.train)},
                                              {"holdout", cfg.holdout},
                                              {"pool_size", std::to_string(cfg.pool_size)}});
    for (const auto& f : cfg.families) {
        out += "\n" + kv::format_section(std::string(kFamilyPrefix) + f.name(), family_fields(f));
    }
    out += "\n" + kv::format_section("model", without_seed(cfg.model.fields()));
    out += "\n" + kv::format_section("episode", without_seed(cfg.episode.fields()));
    out += "\n" + kv::format_section("inner", cfg.inner.fields());
    out += "\n" + kv::format_section("cg", cfg.cg.fields());
    out += "\n" + kv::format_section("outer", cfg.outer.fields());
    out += "\n" + kv::format_section("loss", cfg.loss.fields());
    out += "\n" + kv::format_section("finetune", without_seed(cfg.finetune.fields()));
    out += "\n" + kv::format_section("naive", without_seed(cfg.naive.fields()));
    return out;
}

std::vector<DataPool> build_pools(const ExperimentConfig& cfg) {
    std::vector<std::string> wanted = cfg.train;
    wanted.push_back(cfg.holdout);
    std::vector<DataPool> pools;
    for (const auto& name : wanted) {
        const FamilySource& f = cfg.family(name);
        try {
            if (f.path.empty()) {
                pools.push_back(generate_pool(f.synth, cfg.pool_size));
            } else {
                pools.push_back(load_pool(f.path, cfg.model.input_size, cfg.model.in_channels, f.name(),
                                          f.synth.category));
            }
        } catch (const std::exception& e) {
            rethrow_with_context("family '" + name + "'", e);
        }
    }
    return pools;
}

std::string variant_label(Algo algo, bool ablation, bool use_logcosh) {
    std::string label = to_string(algo);
    if (ablation) label += use_logcosh ? "-logcosh" : "-dice";
    return label;
}

namespace {

struct Variant {
    Algo algo;
    bool use_logcosh;
    std::string label;
};

std::vector<Variant> variants(const ExperimentConfig& cfg) {
    std::vector<Variant> out;
    for (Algo a : cfg.algos) {
        if (cfg.ablation) {
            out.push_back({a, false, variant_label(a, true, false)});
            out.push_back({a, true, variant_label(a, true, true)});
        } else {
            out.push_back({a, cfg.loss.use_logcosh, variant_label(a, false, cfg.loss.use_logcosh)});
        }
    }
    return out;
}

std::size_t outer_steps(const OuterConfig& o) { return (o.total_tasks + o.meta_batch - 1) / o.meta_batch; }

}  // namespace

std::string describe_plan(const ExperimentConfig& config) {
    const ExperimentConfig cfg = config.resolved();
    cfg.validate();
    std::ostringstream out;
    out << "experiment '" << cfg.name << "' -> " << cfg.out_dir << "\n";
    out << "model: attention u-net " << cfg.model.input_size << "x" << cfg.model.input_size << ", base "
        << cfg.model.base_channels << ", depth " << cfg.model.depth << ", " << build_layout(cfg.model)->total()
        << " parameters\n";
    out << "pools:";
    for (const auto& name : cfg.train) {
        const auto& f = cfg.family(name);
        out << " " << name << " (" << f.synth.category << (f.path.empty() ? ", synthetic" : ", " + f.path) << ")";
    }
    const auto& h = cfg.family(cfg.holdout);
    out << "; holdout " << cfg.holdout << " (" << h.synth.category << (h.path.empty() ? ", synthetic" : ", " + h.path)
        << ")\n";
    out << "episodes: " << to_string(cfg.episode.setup) << ", " << cfg.episode.n_ways << "-way " << cfg.episode.k_shots
        << "-shot, " << cfg.episode.q_queries << " queries per way\n";
    for (const auto& v : variants(cfg)) {
        out << "  " << v.label << ": ";
        if (v.algo == Algo::naive) {
            out << cfg.naive.epochs << " epochs of batch " << cfg.naive.batch_size << ", no fine-tuning";
        } else {
            out << cfg.outer.total_tasks << " tasks in " << outer_steps(cfg.outer) << " outer steps, "
                << cfg.inner.steps << " inner steps";
            if (v.algo == Algo::imaml) out << ", cg " << cfg.cg.max_iters;
            out << ", fine-tune " << cfg.finetune.steps << " steps";
        }
        out << ", loss " << (v.use_logcosh ? "bce+logcosh-dice" : "bce+dice") << ", " << cfg.finetune.eval_tasks
            << " eval tasks (" << cfg.finetune.k_shots << "-shot)\n";
    }
    out << "\n" << format_experiment(cfg);
    return out.str();
}

std::string summary_json(const std::string& run_name, const std::vector<ReportSummary>& summary) {
    nlohmann::ordered_json j;
    j["schema"] = kSummarySchema;
    j["run"] = run_name;
    j["groups"] = nlohmann::ordered_json::array();
    for (const auto& s : summary) {
        j["groups"].push_back({{"algo", s.algo},
                               {"setup", s.setup},
                               {"k_shots", s.k_shots},
                               {"tasks", s.tasks},
                               {"mean_dsc", s.mean_dsc},
                               {"std_dsc", s.std_dsc},
                               {"mean_iou", s.mean_iou},
                               {"std_iou", s.std_iou},
                               {"mean_support_loss", s.mean_support_loss}});
    }
    return j.dump(2) + "\n";
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write '" + path.string() + "'");
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, std::size_t threads, std::ostream& log) {
    const ExperimentConfig cfg = config.resolved();
    cfg.validate();
    const fs::path out(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw Error("cannot create output directory '" + cfg.out_dir + "': " + ec.message());
    const std::string config_text = format_experiment(cfg);
    write_text(out / "config.ini", config_text);

    std::vector<DataPool> pools = build_pools(cfg);
    const DataPool holdout = std::move(pools.back());
    pools.pop_back();
    log << "pools:";
    for (const auto& p : pools) log << " " << p.name << "[" << p.size() << "]";
    log << " holdout " << holdout.name << "[" << holdout.size() << "]\n";

    const SegModel init = SegModel::init(cfg.model);
    const std::string setup = to_string(cfg.episode.setup);
    RunResult result;
    result.out_dir = cfg.out_dir;
    std::string naive_curve = "algo,epoch,loss,dsc\n";

    for (const auto& v : variants(cfg)) {
        LossConfig loss = cfg.loss;
        loss.use_logcosh = v.use_logcosh;
        const fs::path dir = out / v.label;
        fs::create_directories(dir, ec);
        if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
        try {
            std::vector<EpisodeReport> reports;
            if (v.algo == Algo::naive) {
                log << v.label << ": supervised training on " << pools.size() << " pools\n";
                const NaiveTraining trained = train_naive(init, pools, loss, cfg.naive);
                for (std::size_t e = 0; e < trained.epoch_loss.size(); ++e) {
                    log << v.label << " epoch " << e + 1 << " loss " << trained.epoch_loss[e] << " dsc "
                        << trained.epoch_dsc[e] << "\n";
                    naive_curve += v.label + "," + std::to_string(e + 1) + "," + csv_double(trained.epoch_loss[e]) +
                                   "," + csv_double(trained.epoch_dsc[e]) + "\n";
                }
                save_model((dir / "model.ck").string(), SegModel(cfg.model, trained.theta));
                FinetuneConfig zero_shot = cfg.finetune;
                zero_shot.steps = 0;
                std::vector<std::string> names;
                for (const auto& p : pools) names.push_back(p.name);
                reports = meta_test(init, trained.theta, holdout, names, loss, zero_shot, {v.label, setup, 0.0},
                                    threads);
            } else {
                MetaTrainConfig mt{cfg.episode, cfg.inner, cfg.cg, cfg.outer, loss, v.algo, threads};
                double cg_total = 0.0;
                std::uint64_t last_seen = 0;
                const auto on_step = [&](const StepLog& s, const MetaState&) {
                    cg_total += s.mean_cg_iters * static_cast<double>(s.tasks_seen - last_seen);
                    last_seen = s.tasks_seen;
                    result.curve.push_back(
                        {v.label, s.outer_step, s.tasks_seen, s.mean_query_loss, s.mean_support_loss});
                    log << v.label << " step " << s.outer_step << " tasks " << s.tasks_seen << " query "
                        << s.mean_query_loss << " support " << s.mean_support_loss << "\n";
                };
                const MetaState state =
                    meta_train(init, pools, mt, MetaState::initial(init.params(), cfg.episode.seed), on_step);
                if (state.converged) log << v.label << ": loss window settled after " << state.tasks_seen << " tasks\n";
                save_meta_state((dir / "meta_state.ck").string(), state, config_text);
                const double cg_mean = last_seen ? cg_total / static_cast<double>(last_seen) : 0.0;
                std::vector<std::string> names;
                for (const auto& p : pools) names.push_back(p.name);
                reports = meta_test(init, state.theta, holdout, names, loss, cfg.finetune, {v.label, setup, cg_mean},
                                    threads);
            }
            result.reports.insert(result.reports.end(), reports.begin(), reports.end());
        } catch (const std::exception& e) {
            rethrow_with_context(v.label, e);
        }
    }

    write_reports_file((out / "reports.csv").string(), result.reports);
    std::string curve = "algo,epoch,tasks_seen,mean_query_loss,mean_support_loss\n";
    for (const auto& c : result.curve) {
        curve += c.algo + "," + std::to_string(c.epoch) + "," + std::to_string(c.tasks_seen) + "," +
                 csv_double(c.mean_query_loss) + "," + csv_double(c.mean_support_loss) + "\n";
    }
    write_text(out / "loss_curve.csv", curve);
    write_text(out / "naive_curve.csv", naive_curve);
    result.summary = summarize(result.reports);
    write_text(out / "summary.json", summary_json(cfg.name, result.summary));
    std::vector<CompareRow> rows;
    for (const auto& s : result.summary) rows.push_back({cfg.name, s});
    log << "\n" << format_table(rows);
    return result;
}

std::vector<CompareRow> compare_runs(const std::vector<std::string>& dirs) {
    if (dirs.empty()) throw Error("compare: no report directories given");
    std::vector<CompareRow> rows;
    for (const auto& d : dirs) {
        const fs::path dir(d);
        const fs::path summary_path = dir / "summary.json";
        std::ifstream in(summary_path);
        if (!in) throw Error("compare: cannot read '" + summary_path.string() + "'");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const std::exception& e) {
            throw Error("compare: '" + summary_path.string() + "' is not valid JSON: " + e.what());
        }
        if (!j.contains("schema") || j["schema"] != kSummarySchema) {
            throw Error("compare: '" + summary_path.string() + "' has schema " +
                        (j.contains("schema") ? j["schema"].dump() : std::string("(none)")) + ", expected \"" +
                        kSummarySchema + "\"");
        }
        const std::string run = j.value("run", dir.filename().string());
        std::vector<EpisodeReport> reports;
        try {
            reports = read_reports_file((dir / "reports.csv").string());
        } catch (const std::exception& e) {
            rethrow_with_context("compare", e);
        }
        for (const auto& s : summarize(reports)) rows.push_back({run, s});
    }
    return rows;
}

std::string format_table(const std::vector<CompareRow>& rows) {
    std::size_t run_w = 3, algo_w = 4, setup_w = 5;
    for (const auto& r : rows) {
        run_w = std::max(run_w, r.run.size());
        algo_w = std::max(algo_w, r.summary.algo.size());
        setup_w = std::max(setup_w, r.summary.setup.size());
    }
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(run_w)) << "run" << "  " << std::setw(static_cast<int>(algo_w))
        << "algo" << "  " << std::setw(static_cast<int>(setup_w)) << "setup" << "  " << std::right << std::setw(2)
        << "K" << std::setw(7) << "tasks" << std::setw(10) << "DSC" << std::setw(9) << "+-" << std::setw(10) << "IoU"
        << "\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        const auto& s = r.summary;
        out << std::left << std::setw(static_cast<int>(run_w)) << r.run << "  " << std::setw(static_cast<int>(algo_w))
            << s.algo << "  " << std::setw(static_cast<int>(setup_w)) << s.setup << "  " << std::right << std::setw(2)
            << s.k_shots << std::setw(7) << s.tasks << std::setw(10) << s.mean_dsc << std::setw(9) << s.std_dsc
            << std::setw(10) << s.mean_iou << "\n";
    }
    return out.str();
}

void write_compare_csv(const std::string& path, const std::vector<CompareRow>& rows) {
    std::string text = "run,algo,setup,k_shots,tasks,mean_dsc,std_dsc,mean_iou,std_iou,mean_support_loss\n";
    for (const auto& r : rows) {
        const auto& s = r.summary;
        text += r.run + "," + s.algo + "," + s.setup + "," + std::to_string(s.k_shots) + "," +
                std::to_string(s.tasks) + "," + csv_double(s.mean_dsc) + "," + csv_double(s.std_dsc) + "," +
                csv_double(s.mean_iou) + "," + csv_double(s.std_iou) + "," + csv_double(s.mean_support_loss) + "\n";
    }
    write_text(path, text);
}

std::vector<std::string> generate_data(const ExperimentConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::vector<std::string> written;
    for (const auto& f : cfg.families) {
        if (!f.path.empty()) continue;
        const std::string dir = (fs::path(out_dir) / f.name()).string();
        try {
            save_pool(generate_pool(f.synth, cfg.pool_size), dir);
        } catch (const std::exception& e) {
            rethrow_with_context("family '" + f.name() + "'", e);
        }
        written.push_back(dir);
    }
    return written;
}

}  // namespace imaml
