#include "imaml/inner_loop.hpp"

#include <cmath>
#include <cstdio>

#include "imaml/error.hpp"
#include "imaml/ops.hpp"

namespace imaml {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

ad::Tensor objective_value(const TaskObjective& objective, const ParamTensors& params, const Regularization& reg,
                           const ParamTensors* anchor) {
    ad::Tensor loss = objective.support_loss(params);
    if (reg.kind == Regularization::Kind::none) return loss;
    const ad::Tensor r = regularizer(params, reg.kind == Regularization::Kind::proximal ? anchor : nullptr, reg.lambda);
    return r.defined() ? ad::add(loss, r) : loss;
}

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

ad::Tensor SegmentationObjective::support_loss(const ParamTensors& params) const {
    return data_loss(model_.forward(params, task_.support_images), task_.support_masks, loss_);
}

ad::Tensor SegmentationObjective::query_loss(const ParamTensors& params) const {
    return data_loss(model_.forward(params, task_.query_images), task_.query_masks, loss_);
}

std::string to_string(Optimizer o) { return o == Optimizer::gd ? "gd" : "adam"; }

Optimizer parse_optimizer(std::string_view s) {
    if (s == "gd") return Optimizer::gd;
    if (s == "adam") return Optimizer::adam;
    throw Error("optimizer must be gd or adam, got '" + std::string(s) + "'");
}

void InnerConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw Error("inner config: learning_rate must be >= 0");
    if (!(lambda_prox >= 0.0)) throw Error("inner config: lambda_prox must be >= 0");
    if (!(grad_tol >= 0.0)) throw Error("inner config: grad_tol must be >= 0");
}

kv::Fields InnerConfig::fields() const {
    return {{"steps", std::to_string(steps)},
            {"learning_rate", kv::from_double(learning_rate)},
            {"lambda_prox", kv::from_double(lambda_prox)},
            {"optimizer", to_string(optimizer)},
            {"grad_tol", kv::from_double(grad_tol)}};
}

void InnerConfig::set(std::string_view key, std::string_view value) {
    if (key == "steps") steps = kv::to_u64(key, value);
    else if (key == "learning_rate") learning_rate = kv::to_double(key, value);
    else if (key == "lambda_prox") lambda_prox = kv::to_double(key, value);
    else if (key == "optimizer") optimizer = parse_optimizer(value);
    else if (key == "grad_tol") grad_tol = kv::to_double(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

InnerResult descend(const TaskObjective& objective, const ParamVector& start, const Regularization& reg,
                    const DescentConfig& cfg) {
    if (reg.kind == Regularization::Kind::proximal) {
        if (!reg.anchor) throw Error("descend: proximal regularization without an anchor");
        require_same_layout("descend", start, *reg.anchor);
    }
    const ParamTensors anchor = reg.anchor ? constant(*reg.anchor) : ParamTensors{};
    InnerResult result;
    result.phi = start;
    ParamVector m, v;
    if (cfg.optimizer == Optimizer::adam) {
        m = ParamVector(start.layout_ptr());
        v = ParamVector(start.layout_ptr());
    }

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        const ParamTensors params = bind(tape, result.phi);
        const ad::Tensor loss = objective_value(objective, params, reg, &anchor);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw Error("inner loop: non-finite support loss " + format_value(value) + " at step " +
                        std::to_string(step));
        }
        result.support_loss_trace.push_back(value);
        const ParamVector g = loss.requires_grad() ? grad(loss, params) : ParamVector(start.layout_ptr());
        result.peak_tape_nodes = std::max(result.peak_tape_nodes, tape.peak_size());
        if (cfg.grad_tol > 0.0 && norm(g) < cfg.grad_tol) {
            result.converged = true;
            break;
        }

        auto phi = result.phi.data();
        const auto gd = g.data();
        if (cfg.optimizer == Optimizer::gd) {
            for (std::size_t i = 0; i < phi.size(); ++i) phi[i] -= cfg.learning_rate * gd[i];
        } else {
            const double t = static_cast<double>(step + 1);
            const double c1 = 1.0 - std::pow(kAdamBeta1, t);
            const double c2 = 1.0 - std::pow(kAdamBeta2, t);
            auto md = m.data();
            auto vd = v.data();
            for (std::size_t i = 0; i < phi.size(); ++i) {
                md[i] = kAdamBeta1 * md[i] + (1.0 - kAdamBeta1) * gd[i];
                vd[i] = kAdamBeta2 * vd[i] + (1.0 - kAdamBeta2) * gd[i] * gd[i];
                phi[i] -= cfg.learning_rate * (md[i] / c1) / (std::sqrt(vd[i] / c2) + kAdamEps);
            }
        }
    }

    result.final_loss = objective_value(objective, constant(result.phi), reg, &anchor).item();
    if (!std::isfinite(result.final_loss)) {
        throw Error("inner loop: non-finite support loss " + format_value(result.final_loss) + " after step " +
                    std::to_string(result.support_loss_trace.size()));
    }
    return result;
}

InnerResult adapt(const TaskObjective& objective, const ParamVector& theta, const InnerConfig& cfg) {
    cfg.validate();
    return descend(objective, theta, Regularization::proximal(theta, cfg.lambda_prox),
                   DescentConfig{cfg.steps, cfg.learning_rate, cfg.optimizer, cfg.grad_tol});
}

}  // namespace imaml
