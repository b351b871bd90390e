#include "lmpc/nlp.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace lmpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double inf_norm(const Eigen::VectorXd& v) {
    return v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
}

Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& z) {
    Eigen::VectorXd g(z.size());
    Eigen::VectorXd zp = z;
    for (int i = 0; i < z.size(); ++i) {
        const double h = 1e-6 * (1.0 + std::abs(z[i]));
        zp[i] = z[i] + h;
        const double fp = f(zp);
        zp[i] = z[i] - h;
        const double fm = f(zp);
        zp[i] = z[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace

double NlpProblem::eval_cost(const Eigen::VectorXd& z) const {
    if (residuals) {
        Eigen::VectorXd r(n_res);
        Eigen::MatrixXd J;  // unused here; callbacks may skip filling when cols()==0
        J.resize(0, 0);
        Eigen::MatrixXd Jr(n_res, n);
        residuals(z, r, Jr);
        double c = 0.5 * r.squaredNorm();
        if (linear_cost.size()) c += linear_cost.dot(z);
        return c;
    }
    return cost(z);
}

Eigen::VectorXd NlpProblem::eval_cost_gradient(const Eigen::VectorXd& z) const {
    if (residuals) {
        Eigen::VectorXd r(n_res);
        Eigen::MatrixXd Jr(n_res, n);
        residuals(z, r, Jr);
        Eigen::VectorXd g = Jr.transpose() * r;
        if (linear_cost.size()) g += linear_cost;
        return g;
    }
    if (cost_gradient) return cost_gradient(z);
    return fd_gradient(cost, z);
}

Solution SqpSolver::solve(const NlpProblem& p, const Eigen::VectorXd& z0) {
    const auto t_start = std::chrono::steady_clock::now();
    const int n = p.n;
    if (z0.size() != n) throw std::invalid_argument("SqpSolver: z0 dimension mismatch");

    const Eigen::VectorXd lb =
        p.lower.size() ? p.lower : Eigen::VectorXd::Constant(n, -kInf);
    const Eigen::VectorXd ub = p.upper.size() ? p.upper : Eigen::VectorXd::Constant(n, kInf);

    Eigen::VectorXd z = z0.cwiseMax(lb).cwiseMin(ub);

    // workspace
    Eigen::VectorXd r(p.n_res), c_eq(p.n_eq), g_in(p.n_ineq);
    Eigen::MatrixXd Jr(p.n_res, n), Jeq(p.n_eq, n), Jin(p.n_ineq, n);
    Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);  // BFGS fallback

    auto eval_all = [&](const Eigen::VectorXd& zz, double& f, Eigen::VectorXd& grad) {
        if (p.residuals) {
            p.residuals(zz, r, Jr);
            f = 0.5 * r.squaredNorm();
            grad = Jr.transpose() * r;
            if (p.linear_cost.size()) {
                f += p.linear_cost.dot(zz);
                grad += p.linear_cost;
            }
        } else {
            f = p.cost(zz);
            grad = p.cost_gradient ? p.cost_gradient(zz) : fd_gradient(p.cost, zz);
        }
        if (p.n_eq) p.equality(zz, c_eq, Jeq);
        if (p.n_ineq) p.inequality(zz, g_in, Jin);
        if (!std::isfinite(f) || !grad.allFinite() || (p.n_eq && !c_eq.allFinite()) ||
            (p.n_ineq && !g_in.allFinite()))
            throw NlpEvalError("NLP callback returned non-finite values", zz);
    };

    // merit-only evaluation used inside the line search; non-finite -> +inf
    auto merit_at = [&](const Eigen::VectorXd& zz, double mu) {
        double f;
        try {
            f = p.eval_cost(zz);
        } catch (...) {
            return kInf;
        }
        if (!std::isfinite(f)) return kInf;
        double v = 0.0;
        if (p.n_eq) {
            Eigen::VectorXd c(p.n_eq);
            Eigen::MatrixXd J(p.n_eq, n);
            p.equality(zz, c, J);
            if (!c.allFinite()) return kInf;
            v += c.cwiseAbs().sum();
        }
        if (p.n_ineq) {
            Eigen::VectorXd g(p.n_ineq);
            Eigen::MatrixXd J(p.n_ineq, n);
            p.inequality(zz, g, J);
            if (!g.allFinite()) return kInf;
            v += g.cwiseMax(0.0).sum();
        }
        return f + mu * v;
    };

    Solution sol;
    sol.z = z;
    double mu = 1.0;
    double f = 0.0;
    Eigen::VectorXd grad(n);
    Eigen::VectorXd grad_prev(n), z_prev(n);
    bool have_prev = false;

    Eigen::VectorXd qp_x_warm, qp_y_warm;
    bool have_qp_warm = false;

    const bool tr_active = std::isfinite(opts_.trust_radius);
    double tr = opts_.trust_radius;

    int iter = 0;
    for (; iter < opts_.max_iter; ++iter) {
        eval_all(z, f, grad);

        const double eq_viol = p.n_eq ? inf_norm(c_eq) : 0.0;
        const double in_viol = p.n_ineq ? std::max(0.0, g_in.size() ? g_in.maxCoeff() : 0.0) : 0.0;

        // Hessian model
        Eigen::MatrixXd H;
        if (p.residuals) {
            H = Jr.transpose() * Jr;
            H.diagonal().array() += 1e-8;
        } else {
            if (have_prev) {
                // damped BFGS on the cost gradient
                const Eigen::VectorXd s = z - z_prev;
                const Eigen::VectorXd yv = grad - grad_prev;
                const double sy = s.dot(yv);
                const Eigen::VectorXd Bs = B * s;
                const double sBs = s.dot(Bs);
                if (sBs > 1e-14) {
                    double theta = 1.0;
                    Eigen::VectorXd yd = yv;
                    if (sy < 0.2 * sBs) {
                        theta = 0.8 * sBs / (sBs - sy);
                        yd = theta * yv + (1.0 - theta) * Bs;
                    }
                    const double syd = s.dot(yd);
                    if (syd > 1e-14) {
                        B -= (Bs * Bs.transpose()) / sBs;
                        B += (yd * yd.transpose()) / syd;
                    }
                }
            }
            H = B;
        }

        // QP subproblem over step d
        const int m_all = p.n_eq + p.n_ineq + n;
        QpProblem qp;
        qp.P = H;
        qp.q = grad;
        qp.A.resize(m_all, n);
        qp.l.resize(m_all);
        qp.u.resize(m_all);
        int row = 0;
        if (p.n_eq) {
            qp.A.middleRows(row, p.n_eq) = Jeq;
            qp.l.segment(row, p.n_eq) = -c_eq;
            qp.u.segment(row, p.n_eq) = -c_eq;
            row += p.n_eq;
        }
        if (p.n_ineq) {
            qp.A.middleRows(row, p.n_ineq) = Jin;
            qp.l.segment(row, p.n_ineq).setConstant(-kInf);
            qp.u.segment(row, p.n_ineq) = -g_in;
            row += p.n_ineq;
        }
        qp.A.middleRows(row, n) = Eigen::MatrixXd::Identity(n, n);
        qp.l.segment(row, n) = (lb - z).cwiseMax(-tr);
        qp.u.segment(row, n) = (ub - z).cwiseMin(tr);

        QpResult qres = solve_qp(qp, opts_.qp, have_qp_warm ? &qp_x_warm : nullptr,
                                 have_qp_warm ? &qp_y_warm : nullptr);
        const Eigen::VectorXd& d = qres.x;
        qp_x_warm = qres.x;
        qp_y_warm = qres.y;
        have_qp_warm = true;

        // KKT residual at the current iterate using the QP multipliers
        const double stat = inf_norm(grad + qp.A.transpose() * qres.y);
        const double kkt = std::max({stat, eq_viol, in_viol});
        sol.kkt_residual = kkt;
        sol.eq_violation = eq_viol;
        sol.ineq_violation = in_viol;

        const double step_norm = inf_norm(d);
        if ((kkt <= opts_.kkt_tol && eq_viol <= opts_.feas_tol && in_viol <= opts_.feas_tol) ||
            (step_norm <= 1e-12 && eq_viol <= opts_.feas_tol && in_viol <= opts_.feas_tol)) {
            sol.status = SolveStatus::Converged;
            ++iter;
            break;
        }

        // L1 merit line search
        const double y_norm = inf_norm(qres.y);
        mu = std::max(mu, 1.5 * y_norm + 1.0);
        const double viol1 = (p.n_eq ? c_eq.cwiseAbs().sum() : 0.0) +
                             (p.n_ineq ? g_in.cwiseMax(0.0).sum() : 0.0);
        const double phi0 = f + mu * viol1;
        const double dphi = grad.dot(d) - mu * viol1;

        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls) {
            const Eigen::VectorXd zt = (z + t * d).cwiseMax(lb).cwiseMin(ub);
            const double phit = merit_at(zt, mu);
            if (phit <= phi0 + 1e-4 * t * std::min(dphi, 0.0) + 1e-14 * std::abs(phi0)) {
                z_prev = z;
                grad_prev = grad;
                have_prev = true;
                z = zt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            if (tr_active && tr > 1e-6) {
                tr *= 0.25;  // retry the subproblem with a tighter step cap
                continue;
            }
            sol.status = SolveStatus::InfeasibleStep;
            ++iter;
            break;
        }
        if (tr_active) {
            if (t >= 1.0)
                tr = std::min(tr * 1.5, 10.0 * opts_.trust_radius);
            else if (t <= 0.25)
                tr = std::max(0.5 * tr, 1e-4);
        }
        // stagnation: the merit function is flat to machine precision, so the
        // accepted step is negligible relative to the iterate -- done if feasible
        if (t * step_norm <= 1e-9 * (1.0 + inf_norm(z)) && eq_viol <= opts_.feas_tol &&
            in_viol <= opts_.feas_tol) {
            sol.status = SolveStatus::Converged;
            ++iter;
            break;
        }
    }

    sol.iterations = iter;
    sol.z = z;
    sol.cost_value = p.eval_cost(z);
    if (sol.status != SolveStatus::Converged && sol.status != SolveStatus::InfeasibleStep)
        sol.status = SolveStatus::MaxIter;
    // recompute final violations
    if (p.n_eq) {
        p.equality(z, c_eq, Jeq);
        sol.eq_violation = inf_norm(c_eq);
    }
    if (p.n_ineq) {
        p.inequality(z, g_in, Jin);
        sol.ineq_violation = g_in.size() ? std::max(0.0, g_in.maxCoeff()) : 0.0;
    }
    sol.solve_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return sol;
}

double check_gradient(const NlpProblem& p, const Eigen::VectorXd& z) {
    const int n = p.n;
    double worst = 0.0;
    auto compare = [&](double analytic, double fd) {
        const double dev = std::abs(analytic - fd) / std::max(1e-6, std::abs(fd));
        worst = std::max(worst, dev);
    };

    // cost gradient
    {
        const Eigen::VectorXd g = p.eval_cost_gradient(z);
        const Eigen::VectorXd gfd =
            fd_gradient([&](const Eigen::VectorXd& zz) { return p.eval_cost(zz); }, z);
        for (int i = 0; i < n; ++i) compare(g[i], gfd[i]);
    }

    auto check_jac = [&](const VectorFn& fn, int m) {
        Eigen::VectorXd v(m), vp(m), vm(m);
        Eigen::MatrixXd J(m, n), Jd(m, n);
        fn(z, v, J);
        Eigen::VectorXd zp = z;
        for (int i = 0; i < n; ++i) {
            const double h = 1e-6 * (1.0 + std::abs(z[i]));
            zp[i] = z[i] + h;
            fn(zp, vp, Jd);
            zp[i] = z[i] - h;
            fn(zp, vm, Jd);
            zp[i] = z[i];
            for (int r = 0; r < m; ++r) compare(J(r, i), (vp[r] - vm[r]) / (2.0 * h));
        }
    };
    if (p.n_eq) check_jac(p.equality, p.n_eq);
    if (p.n_ineq) check_jac(p.inequality, p.n_ineq);
    if (p.residuals) check_jac(p.residuals, p.n_res);
    return worst;
}

}  // namespace lmpc
