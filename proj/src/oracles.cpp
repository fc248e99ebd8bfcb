#include "imaml/oracles.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

#include "imaml/meta_gradient.hpp"
#include "imaml/ops.hpp"

namespace imaml::oracles {

namespace {

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

std::string fmt(const char* format, double a, double b) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), format, a, b);
    return buf;
}

struct Problem {
    QuadraticObjective objective;
    Eigen::VectorXd theta;
    double lambda;
    double learning_rate;
};

// Even k: diagonal Hessian; odd k: rotated. Eigenvalues in [0.5, 4], n <= 20.
Problem make_problem(std::mt19937_64& rng, int k) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 20)(rng);
    std::vector<double> eigs(n);
    std::uniform_real_distribution<double> spread(0.5, 4.0);
    for (auto& e : eigs) e = spread(rng);
    const Eigen::MatrixXd a = k % 2 == 0
                                  ? Eigen::MatrixXd(Eigen::Map<const Eigen::VectorXd>(eigs.data(), static_cast<Eigen::Index>(n)).asDiagonal())
                                  : random_spd(rng, eigs);
    const double lambda = std::vector<double>{2.0, 4.0, 8.0}[static_cast<std::size_t>(k) % 3];
    const double a_max = *std::max_element(eigs.begin(), eigs.end());
    QuadraticObjective obj(a, random_vec(rng, n), random_vec(rng, n), random_vec(rng, n), 1.0);
    return {std::move(obj), random_vec(rng, n), lambda, 1.0 / (a_max + lambda)};
}

InnerConfig gd(std::size_t steps, double lr, double lambda) {
    InnerConfig cfg;
    cfg.steps = steps;
    cfg.learning_rate = lr;
    cfg.lambda_prox = lambda;
    return cfg;
}

CGConfig exact_cg(std::size_t n) {
    CGConfig cfg;
    cfg.max_iters = n;
    cfg.residual_tol = 0.0;
    return cfg;
}

}  // namespace

QuadraticObjective::QuadraticObjective(Eigen::MatrixXd a, Eigen::VectorXd b, Eigen::VectorXd l, Eigen::VectorXd c,
                                       double query_curvature)
    : a_(std::move(a)), b_(std::move(b)), l_(std::move(l)), c_(std::move(c)), qc_(query_curvature) {
    const std::size_t n = dim();
    auto layout = std::make_shared<ParamLayout>();
    layout->add("w", {n, 1});
    layout_ = layout;
    std::vector<double> d(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            d[i * n + j] = a_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
    a_tensor_ = ad::Tensor({n, n}, std::move(d));
}

ParamVector QuadraticObjective::vec(const Eigen::VectorXd& v) const { return ParamVector(layout_, to_std(v)); }

Eigen::VectorXd QuadraticObjective::eig(const ParamVector& p) {
    return Eigen::Map<const Eigen::VectorXd>(p.data().data(), static_cast<Eigen::Index>(p.size()));
}

ad::Tensor QuadraticObjective::column(const Eigen::VectorXd& v) const { return ad::Tensor({dim(), 1}, to_std(v)); }

ad::Tensor QuadraticObjective::support_loss(const ParamTensors& params) const {
    const ad::Tensor d = ad::sub(params[0], column(b_));
    return ad::mul_scalar(ad::sum(ad::mul(d, ad::matmul(a_tensor_, d))), 0.5);
}

ad::Tensor QuadraticObjective::query_loss(const ParamTensors& params) const {
    ad::Tensor out = ad::sum(ad::mul(params[0], column(l_)));
    if (qc_ != 0.0) {
        const ad::Tensor d = ad::sub(params[0], column(c_));
        out = ad::add(out, ad::mul_scalar(ad::sum(ad::mul(d, d)), 0.5 * qc_));
    }
    return out;
}

Eigen::VectorXd QuadraticObjective::inner_solution(const Eigen::VectorXd& theta, double lambda) const {
    const Eigen::MatrixXd m = a_ + lambda * Eigen::MatrixXd::Identity(a_.rows(), a_.cols());
    return m.ldlt().solve(a_ * b_ + lambda * theta);
}

Eigen::VectorXd QuadraticObjective::exact_meta_grad(const Eigen::VectorXd& theta, double lambda) const {
    const Eigen::VectorXd phi = inner_solution(theta, lambda);
    const Eigen::VectorXd g_query = l_ + qc_ * (phi - c_);
    const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(a_.rows(), a_.cols()) + a_ / lambda;
    return m.ldlt().solve(g_query);
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, const std::vector<double>& eigs) {
    const auto n = static_cast<Eigen::Index>(eigs.size());
    Eigen::MatrixXd g(n, n);
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(eigs.data(), n);
    return q * d.asDiagonal() * q.transpose();
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
    return v;
}

OracleResult check_cg_direct_solve(std::uint64_t seed, int systems, std::size_t max_n) {
    OracleResult r{"cg vs direct solve", true, 0.0, 1e-8, ""};
    std::mt19937_64 rng(seed);
    std::size_t largest = 0;
    for (int s = 0; s < systems; ++s) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(5, max_n)(rng);
        largest = std::max(largest, n);
        std::vector<double> eigs(n);
        std::uniform_real_distribution<double> spread(1.0, 10.0);
        for (auto& e : eigs) e = spread(rng);
        const Eigen::MatrixXd a = random_spd(rng, eigs);
        const Eigen::VectorXd b = random_vec(rng, n);
        auto layout = std::make_shared<ParamLayout>();
        layout->add("x", {n});
        const LayoutPtr lp = layout;
        const LinearOperator op = [&](const ParamVector& v) {
            return ParamVector(lp, to_std(a * QuadraticObjective::eig(v)));
        };
        const CGResult res = conjugate_gradient(op, ParamVector(lp, to_std(b)), exact_cg(n));
        const Eigen::VectorXd x = QuadraticObjective::eig(res.x);
        const double residual = (a * x - b).norm() / b.norm();
        const Eigen::VectorXd direct = a.ldlt().solve(b);
        const double vs_direct = (x - direct).norm() / direct.norm();
        r.worst = std::max({r.worst, residual, vs_direct});
    }
    r.passed = r.worst < r.tolerance;
    r.detail = fmt("%g systems up to n=%g, worst relative residual / error vs LDLT", systems,
                   static_cast<double>(largest));
    return r;
}

OracleResult check_implicit_closed_form(std::uint64_t seed, int problems) {
    OracleResult r{"implicit meta-gradient vs closed form", true, 0.0, 1e-6, ""};
    std::mt19937_64 rng(seed);
    for (int k = 0; k < problems; ++k) {
        const Problem p = make_problem(rng, k);
        const MetaGradient g = implicit_meta_grad(p.objective, p.objective.vec(p.theta),
                                                  gd(500, p.learning_rate, p.lambda), exact_cg(p.objective.dim()));
        const Eigen::VectorXd exact = p.objective.exact_meta_grad(p.theta, p.lambda);
        r.worst = std::max(r.worst, (QuadraticObjective::eig(g.grad) - exact).norm() / exact.norm());
    }
    r.passed = r.worst < r.tolerance;
    r.detail = fmt("%g quadratics (diagonal and rotated, n<=20), %g inner steps", problems, 500.0);
    return r;
}

OracleResult check_unrolled_convergence(std::uint64_t seed, int problems) {
    OracleResult r{"unrolled -> implicit as T grows", true, 0.0, 1e-3, ""};
    std::mt19937_64 rng(seed);
    int non_monotone = 0;
    for (int k = 0; k < problems; ++k) {
        const Problem p = make_problem(rng, k);
        const ParamVector theta = p.objective.vec(p.theta);
        const ParamVector implicit =
            implicit_meta_grad(p.objective, theta, gd(500, p.learning_rate, p.lambda), exact_cg(p.objective.dim()))
                .grad;
        double previous = std::numeric_limits<double>::infinity();
        for (std::size_t t : {1u, 5u, 10u, 25u}) {
            const ParamVector unrolled = unrolled_meta_grad(p.objective, theta, gd(t, p.learning_rate, p.lambda)).grad;
            const double gap = norm(unrolled - implicit) / norm(implicit);
            if (!(gap < previous)) ++non_monotone;
            previous = gap;
        }
        r.worst = std::max(r.worst, previous);
    }
    r.passed = non_monotone == 0 && r.worst < r.tolerance;
    r.detail = fmt("T in {1,5,10,25} over %g quadratics; non-monotone steps: %g", problems,
                   static_cast<double>(non_monotone));
    return r;
}

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed) {
    return {check_cg_direct_solve(seed), check_implicit_closed_form(seed + 1), check_unrolled_convergence(seed + 1)};
}

}  // namespace imaml::oracles
