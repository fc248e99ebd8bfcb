#pragma once

// Outer level: per-task meta-gradients (implicit via conjugate gradient, or
// exact by differentiating the unrolled inner loop), the AdamW outer update and
// the episodic meta-training driver.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "imaml/inner_loop.hpp"
#include "imaml/kv_text.hpp"
#include "imaml/params.hpp"
#include "imaml/tasks.hpp"

namespace imaml {

struct CGConfig {
    std::size_t max_iters = 5;
    /// Absolute threshold on the squared residual norm.
    double residual_tol = 1e-10;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const CGConfig&) const = default;
};

struct CGResult {
    ParamVector x;
    std::size_t iterations = 0;
    /// |r_k| for k = 0..iterations.
    std::vector<double> residual_norms;
};

using LinearOperator = std::function<ParamVector(const ParamVector&)>;

/// Conjugate gradient from x0 = 0 for a symmetric positive definite operator.
CGResult conjugate_gradient(const LinearOperator& apply_a, const ParamVector& b, const CGConfig& cfg);

struct MetaGradient {
    ParamVector grad;
    double query_loss = 0.0;
    double support_loss_final = 0.0;
    std::size_t cg_iters = 0;
    /// Largest tape node count reached while computing this gradient.
    std::size_t peak_tape_nodes = 0;
};

/// Solves (I + H/lambda) x = g_query at the adapted parameters, H being the
/// Hessian of the support loss without its proximal term.
MetaGradient implicit_meta_grad(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& inner,
                                const CGConfig& cg);

constexpr std::size_t kMaxUnrolledSteps = 25;

/// Differentiates the query loss through every inner gradient step back to theta.
MetaGradient unrolled_meta_grad(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& inner);

struct OuterConfig {
    double learning_rate = 1e-5;
    double weight_decay = 5e-4;
    std::size_t meta_batch = 4;
    std::size_t total_tasks = 50;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double convergence_delta = 1e-3;
    std::size_t convergence_window = 10;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const OuterConfig&) const = default;
};

struct MetaState {
    ParamVector theta;
    ParamVector adam_m;
    ParamVector adam_v;
    std::uint64_t tasks_seen = 0;
    std::uint64_t outer_steps = 0;
    /// Seed of the task sampler; task i of the run is sample_task(..., tasks_seen + i).
    std::uint64_t rng_state = 0;
    std::vector<double> loss_window;
    /// Mean query loss of every outer step, in order.
    std::vector<double> loss_history;
    bool converged = false;

    static MetaState initial(const ParamVector& theta, std::uint64_t rng_state);
    bool operator==(const MetaState&) const = default;
};

/// Averages the gradients, applies decoupled weight decay and one Adam step,
/// and records `mean_query_loss` for the convergence rule.
MetaState outer_step(MetaState state, const std::vector<ParamVector>& meta_grads, double mean_query_loss,
                     const OuterConfig& cfg);

enum class Algo { imaml, maml, naive };
std::string to_string(Algo a);
Algo parse_algo(std::string_view s);

struct MetaTrainConfig {
    EpisodeConfig episode;
    InnerConfig inner;
    CGConfig cg;
    OuterConfig outer;
    LossConfig loss;
    Algo algo = Algo::imaml;
    std::size_t threads = 1;
};

struct StepLog {
    std::uint64_t outer_step = 0;
    std::uint64_t tasks_seen = 0;
    double mean_query_loss = 0.0;
    double mean_support_loss = 0.0;
    double mean_cg_iters = 0.0;
};

using StepCallback = std::function<void(const StepLog&, const MetaState&)>;

/// Runs outer steps from `state` until total_tasks tasks are consumed or the
/// loss window settles.
MetaState meta_train(const SegModel& model, const std::vector<DataPool>& pools, const MetaTrainConfig& cfg,
                     MetaState state, const StepCallback& on_step = {});

void save_meta_state(const std::string& path, const MetaState& state, const std::string& config_text);
/// Returns the state and the config text stored alongside it.
std::pair<MetaState, std::string> load_meta_state(const std::string& path);

}  // namespace imaml
