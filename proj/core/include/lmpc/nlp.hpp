// Constrained nonlinear program solver: SQP with Gauss-Newton Hessians for
// least-squares-structured costs (damped BFGS otherwise), an L1 merit line
// search, and the ADMM+polish QP of qp.hpp for the subproblems.

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <limits>
#include <stdexcept>

#include "lmpc/qp.hpp"

namespace lmpc {

// Callback filling a vector value and its dense Jacobian at z.
using VectorFn =
    std::function<void(const Eigen::VectorXd& z, Eigen::VectorXd& value, Eigen::MatrixXd& jac)>;

struct NlpProblem {
    int n{0};
    Eigen::VectorXd lower, upper;  // box bounds; +-infinity allowed, empty = free

    // Least-squares structure: cost = 0.5*||r(z)||^2 + linear_cost . z.
    // When `residuals` is set the solver uses Gauss-Newton Hessians.
    int n_res{0};
    VectorFn residuals;
    Eigen::VectorXd linear_cost;  // optional (size n or 0)

    // Generic cost fallback (damped BFGS). Ignored when residuals is set.
    std::function<double(const Eigen::VectorXd&)> cost;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> cost_gradient;  // optional -> FD

    int n_eq{0};
    VectorFn equality;  // c(z) = 0
    int n_ineq{0};
    VectorFn inequality;  // g(z) <= 0

    double eval_cost(const Eigen::VectorXd& z) const;
    Eigen::VectorXd eval_cost_gradient(const Eigen::VectorXd& z) const;
};

struct SolverOptions {
    double kkt_tol{1e-6};
    double feas_tol{1e-6};
    int max_iter{100};
    // Infinity-norm cap on each SQP step, adapted between iterations
    // (grown on full steps, shrunk on rejections). Infinite by default, which
    // disables the mechanism entirely.
    double trust_radius{std::numeric_limits<double>::infinity()};
    QpOptions qp;
};

enum class SolveStatus { Converged, MaxIter, InfeasibleStep };

struct Solution {
    Eigen::VectorXd z;
    double cost_value{0.0};
    SolveStatus status{SolveStatus::MaxIter};
    int iterations{0};
    double kkt_residual{0.0};
    double eq_violation{0.0};
    double ineq_violation{0.0};
    double solve_time{0.0};  // seconds, NLP solve only
};

// Thrown when a callback produces non-finite values; carries the iterate.
class NlpEvalError : public std::runtime_error {
public:
    NlpEvalError(const std::string& what, Eigen::VectorXd iterate)
        : std::runtime_error(what), iterate_(std::move(iterate)) {}
    const Eigen::VectorXd& iterate() const { return iterate_; }

private:
    Eigen::VectorXd iterate_;
};

class SqpSolver {
public:
    explicit SqpSolver(SolverOptions opts = {}) : opts_(opts) {}

    Solution solve(const NlpProblem& p, const Eigen::VectorXd& z0);

    const SolverOptions& options() const { return opts_; }
    SolverOptions& options() { return opts_; }

private:
    SolverOptions opts_;
};

// Compares supplied gradients/Jacobians against central finite differences
// (step 1e-6*(1+|z_i|)); returns the maximum relative deviation.
double check_gradient(const NlpProblem& p, const Eigen::VectorXd& z);

}  // namespace lmpc
