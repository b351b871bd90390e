// Dense convex QP solver: operator-splitting (ADMM) iterations followed by an
// active-set polish step that solves the KKT system of the identified active
// constraints exactly.
//
//   min  0.5 x'Px + q'x   s.t.  l <= Ax <= u
//
// Equality rows are encoded as l_i == u_i.

#pragma once

#include <Eigen/Dense>

namespace lmpc {

struct QpProblem {
    Eigen::MatrixXd P;
    Eigen::VectorXd q;
    Eigen::MatrixXd A;
    Eigen::VectorXd l;
    Eigen::VectorXd u;
};

struct QpOptions {
    int max_iter{4000};
    double eps{1e-7};        // primal/dual residual tolerance
    double rho{0.1};         // base penalty
    double rho_eq_scale{1e3};
    double sigma{1e-6};
    double alpha{1.6};       // relaxation
    bool polish{true};
};

enum class QpStatus { Solved, MaxIter };

struct QpResult {
    Eigen::VectorXd x;
    Eigen::VectorXd y;  // dual for the rows of A (positive on upper side)
    QpStatus status{QpStatus::Solved};
    int iterations{0};
    double primal_residual{0.0};
    double dual_residual{0.0};
    bool polished{false};
};

QpResult solve_qp(const QpProblem& p, const QpOptions& opts = {},
                  const Eigen::VectorXd* x_warm = nullptr,
                  const Eigen::VectorXd* y_warm = nullptr);

}  // namespace lmpc
