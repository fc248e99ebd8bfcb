#include "imaml/meta_gradient.hpp"

#include <algorithm>
#include <cmath>

#include "imaml/checkpoint.hpp"
#include "imaml/error.hpp"
#include "imaml/ops.hpp"
#include "imaml/parallel.hpp"

namespace imaml {

namespace {

const std::string kMomentPrefix[2] = {"adam_m.", "adam_v."};

void require_finite(const char* what, const ParamVector& v) {
    if (!all_finite(v)) throw Error(std::string(what) + ": non-finite values in the meta-gradient");
}

ParamVector gradient_and_value(const LossFn& fn, const ParamVector& at, double& value, std::size_t& peak) {
    ad::Tape tape;
    const ParamTensors params = bind(tape, at);
    const ad::Tensor loss = fn(params);
    value = loss.item();
    if (!std::isfinite(value)) throw Error("query loss is not finite");
    ParamVector g = loss.requires_grad() ? grad(loss, params) : ParamVector(at.layout_ptr());
    peak = std::max(peak, tape.peak_size());
    return g;
}

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : ",") + kv::from_double(x);
    return out;
}

std::vector<double> split_doubles(std::string_view key, std::string_view text) {
    std::vector<double> out;
    while (!text.empty()) {
        const auto comma = text.find(',');
        out.push_back(kv::to_double(key, text.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        text = text.substr(comma + 1);
    }
    return out;
}

}  // namespace

void CGConfig::validate() const {
    if (!(residual_tol >= 0.0)) throw Error("cg config: residual_tol must be >= 0");
}

kv::Fields CGConfig::fields() const {
    return {{"max_iters", std::to_string(max_iters)}, {"residual_tol", kv::from_double(residual_tol)}};
}

void CGConfig::set(std::string_view key, std::string_view value) {
    if (key == "max_iters") max_iters = kv::to_u64(key, value);
    else if (key == "residual_tol") residual_tol = kv::to_double(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

CGResult conjugate_gradient(const LinearOperator& apply_a, const ParamVector& b, const CGConfig& cfg) {
    cfg.validate();
    CGResult out;
    out.x = ParamVector(b.layout_ptr());
    ParamVector r = b;
    ParamVector p = r;
    double rs = dot(r, r);
    if (!std::isfinite(rs)) throw Error("conjugate_gradient: right-hand side is not finite");
    out.residual_norms.push_back(std::sqrt(rs));
    while (out.iterations < cfg.max_iters && rs >= cfg.residual_tol && rs > 0.0) {
        const ParamVector ap = apply_a(p);
        require_same_layout("conjugate_gradient", p, ap);
        const double pap = dot(p, ap);
        if (!std::isfinite(pap)) throw Error("conjugate_gradient: operator returned non-finite values");
        if (pap <= 0.0) {
            throw Error("conjugate_gradient: breakdown at iteration " + std::to_string(out.iterations) +
                        " (p^T A p = " + kv::from_double(pap) +
                        "); the operator is not positive definite, increase lambda");
        }
        const double alpha = rs / pap;
        axpy(out.x, alpha, p);
        axpy(r, -alpha, ap);
        const double rs_next = dot(r, r);
        ++out.iterations;
        out.residual_norms.push_back(std::sqrt(rs_next));
        if (rs_next < cfg.residual_tol) break;
        const double beta = rs_next / rs;
        auto pd = p.data();
        const auto rd = r.data();
        for (std::size_t i = 0; i < pd.size(); ++i) pd[i] = rd[i] + beta * pd[i];
        rs = rs_next;
    }
    return out;
}

MetaGradient implicit_meta_grad(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& inner,
                                const CGConfig& cg) {
    if (!(inner.lambda_prox > 0.0)) {
        throw Error("implicit_meta_grad: lambda must be > 0, got " + kv::from_double(inner.lambda_prox));
    }
    cg.validate();
    const InnerResult adapted = adapt(objective, theta, inner);
    MetaGradient out;
    out.support_loss_final = adapted.final_loss;
    out.peak_tape_nodes = adapted.peak_tape_nodes;

    const LossFn query = [&](const ParamTensors& p) { return objective.query_loss(p); };
    const ParamVector g_query = gradient_and_value(query, adapted.phi, out.query_loss, out.peak_tape_nodes);
    if (cg.max_iters == 0) {
        out.grad = g_query;
    } else {
        CurvatureOperator curvature([&](const ParamTensors& p) { return objective.support_loss(p); }, adapted.phi);
        const double inv_lambda = 1.0 / inner.lambda_prox;
        const LinearOperator op = [&](const ParamVector& v) {
            ParamVector hv = curvature.apply(v);
            auto h = hv.data();
            const auto vd = v.data();
            for (std::size_t i = 0; i < h.size(); ++i) h[i] = vd[i] + inv_lambda * h[i];
            return hv;
        };
        CGResult solved = conjugate_gradient(op, g_query, cg);
        out.grad = std::move(solved.x);
        out.cg_iters = solved.iterations;
        out.peak_tape_nodes = std::max(out.peak_tape_nodes, curvature.peak_tape_size());
    }
    require_finite("implicit_meta_grad", out.grad);
    return out;
}

MetaGradient unrolled_meta_grad(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& inner) {
    inner.validate();
    if (inner.steps > kMaxUnrolledSteps) {
        throw Error("unrolled_meta_grad: " + std::to_string(inner.steps) + " inner steps exceed the cap of " +
                    std::to_string(kMaxUnrolledSteps));
    }
    if (inner.optimizer != Optimizer::gd) throw Error("unrolled_meta_grad: only the gd inner optimizer is supported");

    ad::Tape tape;
    const ParamTensors theta_t = bind(tape, theta);
    ParamTensors phi = theta_t;
    for (std::size_t step = 0; step < inner.steps; ++step) {
        ad::Tensor loss = objective.support_loss(phi);
        const ad::Tensor reg = regularizer(phi, &theta_t, inner.lambda_prox);
        if (reg.defined()) loss = ad::add(loss, reg);
        if (!std::isfinite(loss.item())) {
            throw Error("inner loop: non-finite support loss " + kv::from_double(loss.item()) + " at step " +
                        std::to_string(step));
        }
        const auto g = ad::grad(loss, phi.tensors, true);
        for (std::size_t i = 0; i < phi.size(); ++i) {
            phi.tensors[i] = ad::sub(phi.tensors[i], ad::mul_scalar(g[i], inner.learning_rate));
        }
    }
    const ad::Tensor q = objective.query_loss(phi);
    MetaGradient out;
    out.query_loss = q.item();
    if (!std::isfinite(out.query_loss)) throw Error("query loss is not finite");
    out.grad = q.requires_grad() ? grad(q, theta_t) : ParamVector(theta.layout_ptr());
    out.peak_tape_nodes = tape.peak_size();

    const ParamVector phi_values = values(phi);
    const ParamTensors anchor = constant(theta);
    const ParamTensors phi_c = constant(phi_values);
    ad::Tensor final_loss = objective.support_loss(phi_c);
    const ad::Tensor reg = regularizer(phi_c, &anchor, inner.lambda_prox);
    out.support_loss_final = (reg.defined() ? ad::add(final_loss, reg) : final_loss).item();
    require_finite("unrolled_meta_grad", out.grad);
    return out;
}

void OuterConfig::validate() const {
    if (!(learning_rate > 0.0)) throw Error("outer config: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw Error("outer config: weight_decay must be >= 0");
    if (meta_batch < 1) throw Error("outer config: meta_batch must be >= 1");
    if (total_tasks < 1) throw Error("outer config: total_tasks must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw Error("outer config: adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw Error("outer config: eps must be > 0");
    if (!(convergence_delta >= 0.0)) throw Error("outer config: convergence_delta must be >= 0");
    if (convergence_window < 1) throw Error("outer config: convergence_window must be >= 1");
}

kv::Fields OuterConfig::fields() const {
    return {{"learning_rate", kv::from_double(learning_rate)},
            {"weight_decay", kv::from_double(weight_decay)},
            {"meta_batch", std::to_string(meta_batch)},
            {"total_tasks", std::to_string(total_tasks)},
            {"beta1", kv::from_double(beta1)},
            {"beta2", kv::from_double(beta2)},
            {"eps", kv::from_double(eps)},
            {"convergence_delta", kv::from_double(convergence_delta)},
            {"convergence_window", std::to_string(convergence_window)}};
}

void OuterConfig::set(std::string_view key, std::string_view value) {
    if (key == "learning_rate") learning_rate = kv::to_double(key, value);
    else if (key == "weight_decay") weight_decay = kv::to_double(key, value);
    else if (key == "meta_batch") meta_batch = kv::to_u64(key, value);
    else if (key == "total_tasks") total_tasks = kv::to_u64(key, value);
    else if (key == "beta1") beta1 = kv::to_double(key, value);
    else if (key == "beta2") beta2 = kv::to_double(key, value);
    else if (key == "eps") eps = kv::to_double(key, value);
    else if (key == "convergence_delta") convergence_delta = kv::to_double(key, value);
    else if (key == "convergence_window") convergence_window = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

MetaState MetaState::initial(const ParamVector& theta, std::uint64_t rng_state) {
    MetaState s;
    s.theta = theta;
    s.adam_m = ParamVector(theta.layout_ptr());
    s.adam_v = ParamVector(theta.layout_ptr());
    s.rng_state = rng_state;
    return s;
}

MetaState outer_step(MetaState state, const std::vector<ParamVector>& meta_grads, double mean_query_loss,
                     const OuterConfig& cfg) {
    cfg.validate();
    if (meta_grads.empty()) throw Error("outer_step: no meta-gradients");
    ParamVector mean(state.theta.layout_ptr());
    for (const auto& g : meta_grads) {
        require_same_layout("outer_step", state.theta, g);
        axpy(mean, 1.0, g);
    }
    const double inv_n = 1.0 / static_cast<double>(meta_grads.size());

    ++state.outer_steps;
    const double t = static_cast<double>(state.outer_steps);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    auto theta = state.theta.data();
    auto m = state.adam_m.data();
    auto v = state.adam_v.data();
    const auto g = mean.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i] * inv_n;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        const double step = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        theta[i] -= cfg.learning_rate * (step + cfg.weight_decay * theta[i]);
    }
    if (!all_finite(state.theta)) throw Error("outer_step: parameters became non-finite");

    state.loss_history.push_back(mean_query_loss);
    state.loss_window.push_back(mean_query_loss);
    if (state.loss_window.size() > cfg.convergence_window) {
        state.loss_window.erase(state.loss_window.begin(),
                                state.loss_window.end() - static_cast<std::ptrdiff_t>(cfg.convergence_window));
    }
    if (state.loss_window.size() == cfg.convergence_window) {
        const auto [lo, hi] = std::minmax_element(state.loss_window.begin(), state.loss_window.end());
        state.converged = *hi - *lo <= cfg.convergence_delta;
    }
    return state;
}

std::string to_string(Algo a) {
    switch (a) {
        case Algo::imaml: return "imaml";
        case Algo::maml: return "maml";
        case Algo::naive: return "naive";
    }
    return "?";
}

Algo parse_algo(std::string_view s) {
    if (s == "imaml") return Algo::imaml;
    if (s == "maml") return Algo::maml;
    if (s == "naive") return Algo::naive;
    throw Error("algo must be imaml, maml or naive, got '" + std::string(s) + "'");
}

MetaState meta_train(const SegModel& model, const std::vector<DataPool>& pools, const MetaTrainConfig& cfg,
                     MetaState state, const StepCallback& on_step) {
    if (cfg.algo == Algo::naive) throw Error("meta_train: the naive baseline is not meta-trained");
    cfg.episode.validate();
    cfg.inner.validate();
    cfg.cg.validate();
    cfg.outer.validate();
    cfg.loss.validate();
    if (!state.theta.same_layout(model.params())) throw Error("meta_train: state does not match the model layout");

    EpisodeConfig episode = cfg.episode;
    while (state.tasks_seen < cfg.outer.total_tasks && !state.converged) {
        episode.seed = state.rng_state;
        const std::size_t n =
            std::min<std::uint64_t>(cfg.outer.meta_batch, cfg.outer.total_tasks - state.tasks_seen);
        std::vector<MetaGradient> results(n);
        parallel_for(n, cfg.threads, [&](std::size_t j) {
            const std::uint64_t index = state.tasks_seen + j;
            try {
                const Task task = sample_task(pools, episode, index);
                const SegmentationObjective objective(model, task, cfg.loss);
                results[j] = cfg.algo == Algo::imaml ? implicit_meta_grad(objective, state.theta, cfg.inner, cfg.cg)
                                                     : unrolled_meta_grad(objective, state.theta, cfg.inner);
            } catch (const std::exception& e) {
                rethrow_with_context("task " + std::to_string(index), e);
            }
        });

        StepLog log;
        std::vector<ParamVector> grads;
        for (const auto& r : results) {
            grads.push_back(r.grad);
            log.mean_query_loss += r.query_loss;
            log.mean_support_loss += r.support_loss_final;
            log.mean_cg_iters += static_cast<double>(r.cg_iters);
        }
        log.mean_query_loss /= static_cast<double>(n);
        log.mean_support_loss /= static_cast<double>(n);
        log.mean_cg_iters /= static_cast<double>(n);
        state = outer_step(std::move(state), grads, log.mean_query_loss, cfg.outer);
        state.tasks_seen += n;
        log.outer_step = state.outer_steps;
        log.tasks_seen = state.tasks_seen;
        if (on_step) on_step(log, state);
    }
    return state;
}

void save_meta_state(const std::string& path, const MetaState& state, const std::string& config_text) {
    require_same_layout("save_meta_state", state.theta, state.adam_m);
    require_same_layout("save_meta_state", state.theta, state.adam_v);
    auto layout = std::make_shared<ParamLayout>();
    for (const auto& s : state.theta.layout().segments()) layout->add(s.name, s.shape);
    for (const auto& prefix : kMomentPrefix) {
        for (const auto& s : state.theta.layout().segments()) layout->add(prefix + s.name, s.shape);
    }
    std::vector<double> data;
    data.reserve(layout->total());
    for (const auto* v : {&state.theta, &state.adam_m, &state.adam_v}) data.insert(data.end(), v->data().begin(), v->data().end());

    const std::string header = kv::format_section("state", {{"tasks_seen", std::to_string(state.tasks_seen)},
                                                            {"outer_steps", std::to_string(state.outer_steps)},
                                                            {"rng_state", std::to_string(state.rng_state)},
                                                            {"converged", kv::from_bool(state.converged)},
                                                            {"loss_window", join_doubles(state.loss_window)},
                                                            {"loss_history", join_doubles(state.loss_history)}});
    write_checkpoint(path, header + config_text, ParamVector(layout, std::move(data)));
}

std::pair<MetaState, std::string> load_meta_state(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    MetaState state;
    std::string config_text;
    // The state block comes first; everything from the next section header on is the config.
    const auto next = ck.text.find("\n[");
    const std::string state_text = ck.text.substr(0, next == std::string::npos ? ck.text.size() : next + 1);
    if (next != std::string::npos) config_text = ck.text.substr(next + 1);
    bool have_state = false;
    for (const auto& e : kv::parse(state_text)) {
        if (e.section != "state") continue;
        have_state = true;
        if (e.key == "tasks_seen") state.tasks_seen = kv::to_u64(e.key, e.value);
        else if (e.key == "outer_steps") state.outer_steps = kv::to_u64(e.key, e.value);
        else if (e.key == "rng_state") state.rng_state = kv::to_u64(e.key, e.value);
        else if (e.key == "converged") state.converged = kv::to_bool(e.key, e.value);
        else if (e.key == "loss_window") state.loss_window = split_doubles(e.key, e.value);
        else if (e.key == "loss_history") state.loss_history = split_doubles(e.key, e.value);
        else throw Error("checkpoint '" + path + "': unknown state key '" + e.key + "'");
    }
    if (!have_state) throw Error("checkpoint '" + path + "' holds no meta-training state");

    const auto& segs = ck.values.layout().segments();
    if (segs.size() % 3 != 0) throw Error("checkpoint '" + path + "': segment table is not theta plus two moments");
    const std::size_t n = segs.size() / 3;
    auto layout = std::make_shared<ParamLayout>();
    for (std::size_t i = 0; i < n; ++i) layout->add(segs[i].name, segs[i].shape);
    for (std::size_t k = 0; k < 2; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = segs[(k + 1) * n + i];
            if (s.name != kMomentPrefix[k] + segs[i].name || s.shape != segs[i].shape) {
                throw Error("checkpoint '" + path + "': unexpected segment '" + s.name + "'");
            }
        }
    }
    const std::size_t total = layout->total();
    const auto all = ck.values.data();
    auto slice = [&](std::size_t k) {
        return ParamVector(layout, std::vector<double>(all.begin() + static_cast<std::ptrdiff_t>(k * total),
                                                       all.begin() + static_cast<std::ptrdiff_t>((k + 1) * total)));
    };
    state.theta = slice(0);
    state.adam_m = slice(1);
    state.adam_v = slice(2);
    return {std::move(state), std::move(config_text)};
}

}  // namespace imaml
