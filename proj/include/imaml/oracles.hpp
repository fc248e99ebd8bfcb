#pragma once

// Bilevel quadratic problems with closed-form answers, and the oracle suites
// behind `imaml verify`: CG against a dense direct solve, the implicit
// meta-gradient against its closed form, and the unrolled meta-gradient
// converging onto it.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "imaml/inner_loop.hpp"

namespace imaml::oracles {

/// support(p) = 1/2 (p - b)^T A (p - b)
/// query(p)   = l^T p + curvature/2 |p - c|^2
class QuadraticObjective : public TaskObjective {
public:
    QuadraticObjective(Eigen::MatrixXd a, Eigen::VectorXd b, Eigen::VectorXd l, Eigen::VectorXd c,
                       double query_curvature);

    [[nodiscard]] const LayoutPtr& layout() const { return layout_; }
    [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(b_.size()); }
    [[nodiscard]] const Eigen::MatrixXd& a() const { return a_; }

    [[nodiscard]] ParamVector vec(const Eigen::VectorXd& v) const;
    static Eigen::VectorXd eig(const ParamVector& p);

    ad::Tensor support_loss(const ParamTensors& params) const override;
    ad::Tensor query_loss(const ParamTensors& params) const override;

    /// argmin support + lambda/2 |p - theta|^2
    [[nodiscard]] Eigen::VectorXd inner_solution(const Eigen::VectorXd& theta, double lambda) const;
    /// (I + A/lambda)^-1 grad query at the inner solution.
    [[nodiscard]] Eigen::VectorXd exact_meta_grad(const Eigen::VectorXd& theta, double lambda) const;

private:
    [[nodiscard]] ad::Tensor column(const Eigen::VectorXd& v) const;

    Eigen::MatrixXd a_;
    Eigen::VectorXd b_, l_, c_;
    double qc_;
    LayoutPtr layout_;
    ad::Tensor a_tensor_;
};

/// Q diag(eigs) Q^T with a random orthogonal Q.
Eigen::MatrixXd random_spd(std::mt19937_64& rng, const std::vector<double>& eigs);
Eigen::VectorXd random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0);

struct OracleResult {
    std::string name;
    bool passed = false;
    /// Largest error observed, next to the tolerance it was held to.
    double worst = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

/// Random SPD systems of size <= max_n: CG residual within n iterations.
OracleResult check_cg_direct_solve(std::uint64_t seed, int systems = 20, std::size_t max_n = 50);
/// Diagonal and random SPD quadratics: implicit meta-gradient vs closed form.
OracleResult check_implicit_closed_form(std::uint64_t seed, int problems = 10);
/// Same quadratics: unrolled(T) approaches implicit monotonically in T.
OracleResult check_unrolled_convergence(std::uint64_t seed, int problems = 10);

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed);

}  // namespace imaml::oracles
