#pragma once

// Differentiable test functions shared by the unit tests and the acceptance
// binary: every primitive, every loss and the model's building blocks, each
// reduced to a scalar, plus two losses with nontrivial curvature.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "imaml/losses.hpp"
#include "imaml/model.hpp"
#include "imaml/ops.hpp"
#include "testing.hpp"

namespace imaml::testing {

using namespace imaml::ad;

// Weighted sum with fixed random weights, so every output element matters.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, random_tensor(rng, y.shape())));
}

struct PrimitiveCase {
    std::string name;
    std::vector<std::pair<std::string, Shape>> inputs;
    std::function<Tensor(const ParamTensors&)> fn;
    // Input sampler; by default uniform in [-1, 1].
    std::function<ParamVector(std::mt19937_64&, const LayoutPtr&)> sample;
    double tolerance = 1e-5;
};

inline void PrintTo(const PrimitiveCase& c, std::ostream* os) { *os << c.name; }

inline ParamVector positive(std::mt19937_64& rng, const LayoutPtr& layout) {
    return random_params(rng, layout, 0.5, 2.0);
}

inline ParamVector away_from_zero(std::mt19937_64& rng, const LayoutPtr& layout) {
    return ParamVector(layout, random_away_from_zero(rng, layout->total(), 0.1, 1.0));
}

inline std::vector<PrimitiveCase> primitive_cases() {
    std::vector<PrimitiveCase> cases;
    auto add_case = [&](std::string name, std::vector<std::pair<std::string, Shape>> in,
                        std::function<Tensor(const ParamTensors&)> fn, double tol = 1e-5,
                        std::function<ParamVector(std::mt19937_64&, const LayoutPtr&)> sample = {}) {
        cases.push_back({std::move(name), std::move(in), std::move(fn), std::move(sample), tol});
    };
    add_case("add", {{"a", {6}}, {"b", {6}}}, [](const ParamTensors& p) { return project(add(p[0], p[1]), 1); });
    add_case("sub", {{"a", {6}}, {"b", {6}}}, [](const ParamTensors& p) { return project(sub(p[0], p[1]), 2); });
    add_case("mul", {{"a", {6}}, {"b", {6}}}, [](const ParamTensors& p) { return project(mul(p[0], p[1]), 3); });
    add_case("div", {{"a", {6}}, {"b", {6}}}, [](const ParamTensors& p) { return project(div(p[0], p[1]), 4); },
             1e-5, positive);
    add_case("neg", {{"a", {6}}}, [](const ParamTensors& p) { return project(neg(p[0]), 5); });
    add_case("scalar_ops", {{"a", {6}}},
             [](const ParamTensors& p) { return project(mul_scalar(add_scalar(p[0], 0.3), -1.7), 6); });
    add_case("relu", {{"a", {12}}}, [](const ParamTensors& p) { return project(relu(p[0]), 7); }, 1e-4,
             away_from_zero);
    add_case("sigmoid", {{"a", {6}}}, [](const ParamTensors& p) { return project(sigmoid(p[0]), 8); });
    add_case("log", {{"a", {6}}}, [](const ParamTensors& p) { return project(log(p[0]), 9); }, 1e-5, positive);
    add_case("exp", {{"a", {6}}}, [](const ParamTensors& p) { return project(exp(p[0]), 10); });
    add_case("cosh", {{"a", {6}}}, [](const ParamTensors& p) { return project(cosh(p[0]), 11); });
    add_case("sinh", {{"a", {6}}}, [](const ParamTensors& p) { return project(sinh(p[0]), 12); });
    add_case("sqrt", {{"a", {6}}}, [](const ParamTensors& p) { return project(sqrt(p[0]), 13); }, 1e-5, positive);
    add_case("clamp", {{"a", {12}}}, [](const ParamTensors& p) { return project(clamp(p[0], -0.5, 0.5), 14); },
             1e-4, [](std::mt19937_64& rng, const LayoutPtr& layout) {
                 // keep away from the clamp boundaries
                 auto v = random_values(rng, layout->total(), -1.0, 1.0);
                 for (auto& x : v) {
                     if (std::abs(std::abs(x) - 0.5) < 0.05) x *= 0.8;
                 }
                 return ParamVector(layout, v);
             });
    add_case("sum_mean", {{"a", {2, 3}}},
             [](const ParamTensors& p) { return add(mul(sum(p[0]), sum(p[0])), mean(mul(p[0], p[0]))); });
    add_case("expand", {{"s", {1}}}, [](const ParamTensors& p) { return project(expand(p[0], {2, 3}), 15); });
    add_case("reshape", {{"a", {2, 3}}}, [](const ParamTensors& p) { return project(reshape(p[0], {3, 2}), 16); });
    add_case("matmul", {{"a", {3, 4}}, {"b", {4, 2}}},
             [](const ParamTensors& p) { return project(matmul(p[0], p[1]), 17); });
    add_case("transpose", {{"a", {3, 4}}}, [](const ParamTensors& p) { return project(transpose(p[0]), 18); });
    add_case("conv2d_s1", {{"x", {2, 2, 5, 5}}, {"w", {3, 2, 3, 3}}},
             [](const ParamTensors& p) { return project(conv2d(p[0], p[1], 1, 1), 19); });
    add_case("conv2d_s2", {{"x", {2, 2, 6, 6}}, {"w", {3, 2, 2, 2}}},
             [](const ParamTensors& p) { return project(conv2d(p[0], p[1], 2, 0), 20); });
    add_case("conv_transpose2d", {{"x", {2, 3, 3, 3}}, {"w", {3, 2, 2, 2}}},
             [](const ParamTensors& p) { return project(conv_transpose2d(p[0], p[1], 2, 0), 21); });
    add_case("conv2d_weight_grad", {{"x", {1, 2, 4, 4}}, {"g", {1, 3, 4, 4}}},
             [](const ParamTensors& p) { return project(conv2d_weight_grad(p[0], p[1], {3, 2, 3, 3}, 1, 1), 22); });
    add_case("max_pool2", {{"x", {2, 2, 4, 4}}}, [](const ParamTensors& p) { return project(max_pool2(p[0]), 23); },
             1e-5, [](std::mt19937_64& rng, const LayoutPtr& layout) {
                 // distinct values with gaps larger than the probe step
                 std::vector<double> v(layout->total());
                 for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
                 std::shuffle(v.begin(), v.end(), rng);
                 return ParamVector(layout, v);
             });
    add_case("upsample2", {{"x", {2, 2, 3, 3}}}, [](const ParamTensors& p) { return project(upsample2(p[0]), 24); });
    add_case("concat_slice", {{"a", {2, 2, 3, 3}}, {"b", {2, 1, 3, 3}}}, [](const ParamTensors& p) {
        const Tensor c = concat_channels(p[0], p[1]);
        return add(project(c, 25), project(slice_channels(c, 1, 2), 26));
    });
    add_case("channel_broadcast_sum", {{"v", {3}}, {"x", {2, 3, 2, 2}}}, [](const ParamTensors& p) {
        return add(project(channel_broadcast(p[0], {2, 3, 2, 2}), 27), project(channel_sum(p[1]), 28));
    });
    add_case("repeat_sum_channels", {{"a", {2, 1, 3, 3}}, {"x", {2, 3, 3, 3}}}, [](const ParamTensors& p) {
        return add(project(repeat_channels(p[0], 4), 29), project(sum_channels(p[1]), 30));
    });
    add_case("sample_broadcast_sum", {{"v", {2}}, {"x", {2, 3, 2}}}, [](const ParamTensors& p) {
        return add(project(sample_broadcast(p[0], {2, 3, 2}), 31), project(sample_sum(p[1]), 32));
    });
    return cases;
}


// Logistic regression on fixed synthetic data; weights w[5].
inline LossFn logistic_loss(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor features = random_tensor(rng, {8, 5});
    std::vector<double> labels(8);
    for (auto& y : labels) y = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
    const Tensor targets({8, 1}, labels);
    return [features, targets](const ParamTensors& p) {
        const Tensor prob = sigmoid(matmul(features, reshape(p[0], {5, 1})));
        const Tensor ll = add(mul(targets, log(prob)),
                              mul(add_scalar(neg(targets), 1.0), log(add_scalar(neg(prob), 1.0))));
        return neg(mean(ll));
    };
}

// Small conv net exercising second derivatives of conv, pooling and gating ops.
inline LossFn conv_net_loss(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor image = random_tensor(rng, {2, 1, 4, 4});
    const Tensor target = random_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0);
    return [image, target](const ParamTensors& p) {
        Tensor h = relu(add(conv2d(image, p[0], 1, 1), channel_broadcast(p[1], {2, 2, 4, 4})));
        Tensor down = max_pool2(h);
        Tensor gate = sigmoid(conv2d(down, p[2], 1, 0));
        Tensor up = mul(h, repeat_channels(upsample2(gate), 2));
        Tensor out = sigmoid(conv2d(concat_channels(up, h), p[3], 1, 0));
        return mean(mul(sub(out, target), sub(out, target)));
    };
}


inline ParamVector soft_predictions(std::mt19937_64& rng, const LayoutPtr& layout) {
    return random_params(rng, layout, 0.05, 0.95);
}

inline Tensor binary_target(std::uint64_t seed, const Shape& shape) {
    std::mt19937_64 rng(seed);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = std::bernoulli_distribution(0.4)(rng) ? 1.0 : 0.0;
    return Tensor(shape, std::move(v));
}

/// Every loss term; predictions stay inside (0, 1) away from the BCE clamp.
inline std::vector<PrimitiveCase> loss_cases() {
    const Shape shape{2, 1, 4, 4};
    const Tensor target = binary_target(41, shape);
    const auto anchor_layout = make_layout({{"phi", {6}}});
    const ParamVector anchor(anchor_layout, {0.1, -0.2, 0.3, -0.4, 0.5, -0.6});
    std::vector<PrimitiveCase> cases;
    cases.push_back({"bce", {{"pred", shape}}, [target](const ParamTensors& p) { return bce(p[0], target); },
                     soft_predictions});
    cases.push_back({"dice", {{"pred", shape}}, [target](const ParamTensors& p) { return dice_loss(p[0], target); },
                     soft_predictions});
    cases.push_back({"logcosh_dice", {{"pred", shape}},
                     [target](const ParamTensors& p) { return logcosh_dice(p[0], target); }, soft_predictions});
    cases.push_back({"proximal", {{"phi", {6}}},
                     [anchor](const ParamTensors& p) {
                         const ParamTensors a = constant(anchor);
                         return regularizer(p, &a, 3.0);
                     },
                     {}});
    cases.push_back({"weight_decay", {{"phi", {6}}},
                     [](const ParamTensors& p) { return regularizer(p, nullptr, 0.7); },
                     {}});
    for (bool logcosh : {true, false}) {
        cases.push_back({logcosh ? "compound_logcosh" : "compound_dice",
                         {{"pred", shape}, {"phi", {6}}},
                         [target, anchor, logcosh](const ParamTensors& p) {
                             LossConfig cfg;
                             cfg.use_logcosh = logcosh;
                             cfg.lambda_reg = 2.0;
                             const ParamTensors phi{anchor.layout_ptr(), {p[1]}};
                             const ParamTensors a = constant(anchor);
                             return compound_loss(p[0], target, phi, &a, cfg);
                         },
                         soft_predictions});
    }
    return cases;
}

/// The network's building blocks and a whole small network. ReLU sits inside
/// the blocks, hence the looser tolerance.
inline std::vector<PrimitiveCase> model_cases() {
    std::vector<PrimitiveCase> cases;
    cases.push_back({"group_norm",
                     {{"x", {2, 3, 3, 3}}, {"gamma", {3}}, {"beta", {3}}},
                     [](const ParamTensors& p) { return project(group_norm(p[0], p[1], p[2]), 51); },
                     {}});
    cases.push_back({"gate_skip", {{"skip", {2, 3, 2, 2}}, {"alpha", {2, 1, 2, 2}}},
                     [](const ParamTensors& p) { return project(gate_skip(p[0], p[1]), 52); },
                     {}});
    cases.push_back({"attention_gate",
                     {{"skip", {1, 2, 4, 4}},
                      {"gating", {1, 3, 2, 2}},
                      {"wx", {2, 2, 2, 2}},
                      {"wg", {2, 3, 1, 1}},
                      {"bias", {2}},
                      {"psi", {1, 2, 1, 1}},
                      {"psi_bias", {1}}},
                     [](const ParamTensors& p) {
                         return project(attention_gate(GateWeights{p[2], p[3], p[4], p[5], p[6]}, p[0], p[1]).gated,
                                        53);
                     },
                     {},
                     1e-4});
    AttnUNetConfig mc;
    mc.input_size = 8;
    mc.base_channels = 2;
    mc.depth = 2;
    const auto model = std::make_shared<SegModel>(SegModel::init(mc));
    std::mt19937_64 rng(54);
    const Tensor images = random_tensor(rng, {2, 1, 8, 8});
    std::vector<std::pair<std::string, Shape>> segments;
    for (const auto& s : model->params().layout().segments()) segments.emplace_back(s.name, s.shape);
    cases.push_back({"attn_unet",
                     segments,
                     [model, images](const ParamTensors& p) {
                         const ParamTensors bound{model->params().layout_ptr(), p.tensors};
                         return project(model->forward(bound, images), 55);
                     },
                     [model](std::mt19937_64& r, const LayoutPtr& layout) {
                         // Perturb the initialization rather than sampling
                         // weights on an unrelated scale.
                         ParamVector v(layout, model->params().values());
                         for (auto& x : v.data()) x += std::uniform_real_distribution<double>(-0.05, 0.05)(r);
                         return v;
                     },
                     1e-4});
    return cases;
}

/// Relative error of one random directional derivative at each of `points`
/// sampled inputs. A probe whose central differences at h and h/2 disagree
/// straddles a kink (ReLU, max-pool switch) and is redrawn; `skipped` counts
/// those.
inline std::vector<double> case_errors(const PrimitiveCase& c, int points, std::uint64_t seed,
                                       int* skipped = nullptr) {
    constexpr double h = 1e-5;
    const auto layout = make_layout(c.inputs);
    std::mt19937_64 rng(seed);
    std::vector<double> errors;
    int redrawn = 0;
    while (static_cast<int>(errors.size()) < points) {
        const ParamVector at = c.sample ? c.sample(rng, layout) : random_params(rng, layout);
        const ParamVector dir = random_params(rng, layout);
        const double fd = directional_fd(c.fn, at, dir, h);
        const double fd_half = directional_fd(c.fn, at, dir, h / 2);
        if (relative_error(fd, fd_half, 1e-10) > 0.1 * c.tolerance) {
            if (++redrawn > 10 * points) throw std::runtime_error(c.name + ": no smooth probe found");
            continue;
        }
        errors.push_back(relative_error(dot(gradient(c.fn, at), dir), fd, 1e-10));
    }
    if (skipped) *skipped = redrawn;
    return errors;
}

}  // namespace imaml::testing
