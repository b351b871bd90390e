#include "lmpc/qp.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <vector>

#include <Eigen/SparseCholesky>

namespace lmpc {

namespace {

double inf_norm(const Eigen::VectorXd& v) {
    return v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
}

}  // namespace

QpResult solve_qp(const QpProblem& p, const QpOptions& opts,
                  const Eigen::VectorXd* x_warm, const Eigen::VectorXd* y_warm) {
    const int n = static_cast<int>(p.q.size());
    const int m = static_cast<int>(p.l.size());
    if (p.P.rows() != n || p.P.cols() != n || p.A.rows() != m || p.A.cols() != n ||
        p.u.size() != m)
        throw std::invalid_argument("solve_qp: dimension mismatch");

    Eigen::VectorXd rho(m);
    for (int i = 0; i < m; ++i) {
        const bool eq = (p.u[i] - p.l[i]) < 1e-12;
        rho[i] = opts.rho * (eq ? opts.rho_eq_scale : 1.0);
    }

    // the transcriptions produce block-banded P and A; sparse factorization
    // keeps large horizons tractable
    const Eigen::SparseMatrix<double> As = p.A.sparseView();
    const Eigen::SparseMatrix<double> At = As.transpose();
    Eigen::SparseMatrix<double> K = p.P.sparseView();
    {
        Eigen::SparseMatrix<double> I(n, n);
        I.setIdentity();
        K = K + opts.sigma * I +
            Eigen::SparseMatrix<double>(At * rho.asDiagonal() * As);
    }
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(K);
    if (ldlt.info() != Eigen::Success)
        throw std::runtime_error("solve_qp: KKT factorization failed");

    Eigen::VectorXd x = x_warm ? *x_warm : Eigen::VectorXd::Zero(n);
    Eigen::VectorXd y = y_warm ? *y_warm : Eigen::VectorXd::Zero(m);
    Eigen::VectorXd z = (As * x).cwiseMax(p.l).cwiseMin(p.u);

    QpResult res;
    res.status = QpStatus::MaxIter;
    int it = 0;
    for (; it < opts.max_iter; ++it) {
        const Eigen::VectorXd rhs = opts.sigma * x - p.q + At * (rho.cwiseProduct(z) - y);
        const Eigen::VectorXd xt = ldlt.solve(rhs);
        const Eigen::VectorXd zt = As * xt;

        x = opts.alpha * xt + (1.0 - opts.alpha) * x;
        const Eigen::VectorXd z_nom =
            opts.alpha * zt + (1.0 - opts.alpha) * z + y.cwiseQuotient(rho);
        const Eigen::VectorXd z_new = z_nom.cwiseMax(p.l).cwiseMin(p.u);
        y = rho.cwiseProduct(z_nom - z_new);
        z = z_new;

        if ((it % 10) == 0 || it == opts.max_iter - 1) {
            const Eigen::VectorXd Ax = As * x;
            res.primal_residual = inf_norm(Ax - Ax.cwiseMax(p.l).cwiseMin(p.u));
            res.dual_residual = inf_norm(p.P * x + p.q + At * y);
            if (res.primal_residual < opts.eps && res.dual_residual < opts.eps) {
                res.status = QpStatus::Solved;
                ++it;
                break;
            }
        }
    }
    res.iterations = it;
    res.x = x;
    res.y = y;
    if (std::getenv("LMPC_QP_TRACE"))
        std::fprintf(stderr, "qp n=%d m=%d it=%d pr=%.1e du=%.1e\n", n, m, it,
                     res.primal_residual, res.dual_residual);

    if (opts.polish) {
        // active set from the ADMM duals / slack positions
        const Eigen::VectorXd Ax = As * x;
        std::vector<int> act;
        std::vector<double> act_rhs;
        const double tol = 1e-7;
        for (int i = 0; i < m; ++i) {
            const bool eq = (p.u[i] - p.l[i]) < 1e-12;
            if (eq) {
                act.push_back(i);
                act_rhs.push_back(p.l[i]);
            } else if (y[i] < -tol || Ax[i] <= p.l[i] + tol) {
                if (std::isfinite(p.l[i]) && (y[i] < -tol)) {
                    act.push_back(i);
                    act_rhs.push_back(p.l[i]);
                }
            } else if (y[i] > tol || Ax[i] >= p.u[i] - tol) {
                if (std::isfinite(p.u[i]) && (y[i] > tol)) {
                    act.push_back(i);
                    act_rhs.push_back(p.u[i]);
                }
            }
        }
        const int ma = static_cast<int>(act.size());
        // quasi-definite KKT system of the active set: the (1,1) block is made
        // strictly positive and the (2,2) block strictly negative definite, so
        // an unpivoted LDLT exists for any symmetric ordering
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(size_t(K.nonZeros()) + size_t(ma) * 16);
        for (int c = 0; c < n; ++c)
            for (int r = 0; r < n; ++r)
                if (p.P(r, c) != 0.0) trip.emplace_back(r, c, p.P(r, c));
        for (int i = 0; i < n; ++i) trip.emplace_back(i, i, 1e-10);
        for (int r = 0; r < ma; ++r) {
            for (Eigen::SparseMatrix<double>::InnerIterator itA(At, act[r]); itA; ++itA) {
                trip.emplace_back(n + r, int(itA.row()), itA.value());
                trip.emplace_back(int(itA.row()), n + r, itA.value());
            }
            trip.emplace_back(n + r, n + r, -1e-10);
        }
        Eigen::SparseMatrix<double> kkt(n + ma, n + ma);
        kkt.setFromTriplets(trip.begin(), trip.end());
        Eigen::VectorXd rhs(n + ma);
        rhs.head(n) = -p.q;
        for (int r = 0; r < ma; ++r) rhs[n + r] = act_rhs[r];

        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> klu(kkt);
        if (klu.info() == Eigen::Success) {
            Eigen::VectorXd sol = klu.solve(rhs);
            // one round of iterative refinement
            sol += klu.solve(rhs - kkt * sol);

            const Eigen::VectorXd xp = sol.head(n);
            Eigen::VectorXd yp = Eigen::VectorXd::Zero(m);
            for (int r = 0; r < ma; ++r) yp[act[r]] = sol[n + r];

            // accept only if the polished point is feasible and stationary
            const Eigen::VectorXd Axp = As * xp;
            const double pr = inf_norm(Axp - Axp.cwiseMax(p.l).cwiseMin(p.u));
            const double du = inf_norm(p.P * xp + p.q + At * yp);
            bool dual_ok = true;
            for (int r = 0; r < ma; ++r) {
                const int i = act[r];
                const bool eq = (p.u[i] - p.l[i]) < 1e-12;
                if (eq) continue;
                const bool lower = std::abs(Axp[i] - p.l[i]) < std::abs(Axp[i] - p.u[i]);
                if (lower && yp[i] > 1e-7) dual_ok = false;
                if (!lower && yp[i] < -1e-7) dual_ok = false;
            }
            if (xp.allFinite() && pr < 10.0 * opts.eps && du < 10.0 * opts.eps && dual_ok &&
                (pr <= res.primal_residual + opts.eps || du <= res.dual_residual + opts.eps)) {
                res.x = xp;
                res.y = yp;
                res.primal_residual = pr;
                res.dual_residual = du;
                res.polished = true;
                res.status = QpStatus::Solved;
            }
        }
    }
    return res;
}

}  // namespace lmpc
