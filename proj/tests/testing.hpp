#pragma once

// Test-only helpers: seeded random inputs and finite-difference oracles.
// Nothing here calls the library's backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "imaml/ops.hpp"
#include "imaml/params.hpp"

namespace imaml::testing {

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

/// Uniform in [lo, hi] with random sign, magnitude bounded away from zero.
inline std::vector<double> random_away_from_zero(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> mag(lo, hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(n);
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return v;
}

inline ad::Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    const auto n = ad::numel(shape);
    return ad::Tensor(std::move(shape), random_values(rng, n, lo, hi));
}

inline LayoutPtr make_layout(std::vector<std::pair<std::string, ad::Shape>> segments) {
    auto layout = std::make_shared<ParamLayout>();
    for (auto& [name, shape] : segments) layout->add(name, shape);
    return layout;
}

inline ParamVector random_params(std::mt19937_64& rng, const LayoutPtr& layout, double lo = -1.0,
                                 double hi = 1.0) {
    return ParamVector(layout, random_values(rng, layout->total(), lo, hi));
}

/// Loss value of `fn` at `at` with no tape involvement.
inline double evaluate(const LossFn& fn, const ParamVector& at) {
    return fn(constant(at)).item();
}

/// Central difference of `fn` along `dir`.
inline double directional_fd(const LossFn& fn, const ParamVector& at, const ParamVector& dir, double h) {
    ParamVector plus = at;
    ParamVector minus = at;
    axpy(plus, h, dir);
    axpy(minus, -h, dir);
    return (evaluate(fn, plus) - evaluate(fn, minus)) / (2.0 * h);
}

/// Central difference of one coordinate.
inline double coordinate_fd(const LossFn& fn, const ParamVector& at, std::size_t i, double h) {
    ParamVector plus = at;
    ParamVector minus = at;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    return (evaluate(fn, plus) - evaluate(fn, minus)) / (2.0 * h);
}

/// (grad(x + h v) - grad(x - h v)) / 2h
inline ParamVector gradient_fd(const LossFn& fn, const ParamVector& at, const ParamVector& v, double h) {
    ParamVector plus = at;
    ParamVector minus = at;
    axpy(plus, h, v);
    axpy(minus, -h, v);
    return (1.0 / (2.0 * h)) * (gradient(fn, plus) - gradient(fn, minus));
}

inline double relative_error(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double relative_error(const ParamVector& a, const ParamVector& b, double floor = 1e-12) {
    return norm(a - b) / std::max({norm(a), norm(b), floor});
}

/// Worst relative error between analytic directional derivatives and central
/// differences over `probes` random directions.
inline double worst_directional_error(const LossFn& fn, const ParamVector& at, std::mt19937_64& rng,
                                      int probes, double h = 1e-5) {
    const ParamVector g = gradient(fn, at);
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const ParamVector dir = random_params(rng, at.layout_ptr());
        worst = std::max(worst, relative_error(dot(g, dir), directional_fd(fn, at, dir, h), 1e-10));
    }
    return worst;
}

}  // namespace imaml::testing
