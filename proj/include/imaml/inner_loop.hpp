#pragma once

// Task-level optimization: gradient descent on a task's support loss from a
// starting point, with a proximal pull towards an anchor (meta-training), a
// plain weight decay (fine-tuning, baselines) or no parameter term at all.

#include <string_view>
#include <vector>

#include "imaml/kv_text.hpp"
#include "imaml/losses.hpp"
#include "imaml/model.hpp"
#include "imaml/params.hpp"
#include "imaml/tasks.hpp"

namespace imaml {

/// Support and query losses of one task as functions of the parameters.
/// Neither includes a parameter regularizer.
class TaskObjective {
public:
    virtual ~TaskObjective() = default;
    virtual ad::Tensor support_loss(const ParamTensors& params) const = 0;
    virtual ad::Tensor query_loss(const ParamTensors& params) const = 0;
};

class SegmentationObjective : public TaskObjective {
public:
    SegmentationObjective(const SegModel& model, const Task& task, const LossConfig& loss)
        : model_(model), task_(task), loss_(loss) {}

    ad::Tensor support_loss(const ParamTensors& params) const override;
    ad::Tensor query_loss(const ParamTensors& params) const override;

private:
    const SegModel& model_;
    const Task& task_;
    LossConfig loss_;
};

enum class Optimizer { gd, adam };
std::string to_string(Optimizer o);
Optimizer parse_optimizer(std::string_view s);

struct InnerConfig {
    std::size_t steps = 10;
    double learning_rate = 1e-2;
    double lambda_prox = 100.0;
    Optimizer optimizer = Optimizer::gd;
    /// Stop early once the gradient norm falls below this; 0 disables.
    double grad_tol = 0.0;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const InnerConfig&) const = default;
};

struct InnerResult {
    ParamVector phi;
    /// Objective value before each update that was taken.
    std::vector<double> support_loss_trace;
    /// Objective value at the returned phi.
    double final_loss = 0.0;
    bool converged = false;
    std::size_t peak_tape_nodes = 0;
};

struct Regularization {
    enum class Kind { none, proximal, weight_decay };
    Kind kind = Kind::none;
    double lambda = 0.0;
    const ParamVector* anchor = nullptr;

    static Regularization none() { return {}; }
    static Regularization proximal(const ParamVector& anchor, double lambda) {
        return {Kind::proximal, lambda, &anchor};
    }
    static Regularization weight_decay(double lambda) { return {Kind::weight_decay, lambda, nullptr}; }
};

struct DescentConfig {
    std::size_t steps = 10;
    double learning_rate = 1e-2;
    Optimizer optimizer = Optimizer::gd;
    double grad_tol = 0.0;
};

/// Minimizes support_loss + regularizer from `start`.
InnerResult descend(const TaskObjective& objective, const ParamVector& start, const Regularization& reg,
                    const DescentConfig& cfg);

/// phi_0 = theta, proximal anchor theta, strength lambda_prox.
InnerResult adapt(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& cfg);

}  // namespace imaml
