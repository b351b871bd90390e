#include "lmpc/control.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace lmpc {

namespace {

constexpr int kNx = 4;
constexpr int kNu = 2;

int state_offset(int k) { return kNx * (k - 1); }  // k = 1..N+1
int input_offset(int N, int k) { return kNx * (N + 1) + kNu * k; }  // k = 0..N-1

// chooses the 2*pi branch of `raw` nearest to `anchor`
double align_angle(double raw, double anchor) {
    return raw + 2.0 * M_PI * std::round((anchor - raw) / (2.0 * M_PI));
}

}  // namespace

void NmpcConfig::validate() const {
    if (N < 1) throw std::invalid_argument("NmpcConfig: N must be >= 1");
    if (Ts <= 0.0) throw std::invalid_argument("NmpcConfig: Ts must be positive");
    if ((Q.array() < 0.0).any() || (R.array() < 0.0).any() || (P.array() < 0.0).any())
        throw std::invalid_argument("NmpcConfig: weights must be nonnegative");
    if (ddelta_max <= 0.0 || dD_max <= 0.0)
        throw std::invalid_argument("NmpcConfig: rate bounds must be positive");
    if (margin < 0.0) throw std::invalid_argument("NmpcConfig: margin must be nonnegative");
    if (v_ref_min <= 0.0)
        throw std::invalid_argument("NmpcConfig: v_ref_min must be positive");
    if (input_bounds.delta_max <= 0.0 || input_bounds.D_min >= input_bounds.D_max)
        throw std::invalid_argument("NmpcConfig: degenerate input bounds");
    if (max_iter < 1) throw std::invalid_argument("NmpcConfig: max_iter must be >= 1");
}

ReferenceWindow build_reference(const RaceLineLookup& lut, const ReducedState& xhat,
                                ControllerState& cs, const NmpcConfig& cfg) {
    ReferenceWindow ref;
    ref.points.reserve(cfg.N);
    ref.thetas.reserve(cfg.N);

    double th = lut.project(xhat.X, xhat.Y, cs.theta_hint);
    cs.theta_hint = th;
    double psi_prev = xhat.psi;
    auto sample = [&](double t, double anchor) {
        ReducedState r;
        const Eigen::Vector2d p = lut.position(t);
        r.X = p.x();
        r.Y = p.y();
        r.psi = align_angle(lut.heading(t), anchor);
        r.v = lut.speed(t);
        return r;
    };
    for (int k = 1; k <= cfg.N + 1; ++k) {
        th = lut.wrap(th + std::max(lut.speed(th), cfg.v_ref_min) * cfg.Ts);
        const ReducedState r = sample(th, psi_prev);
        psi_prev = r.psi;
        if (k <= cfg.N) {
            ref.points.push_back(r);
            ref.thetas.push_back(th);
        } else {
            ref.terminal = r;
            ref.theta_terminal = th;
        }
    }
    return ref;
}

Eigen::VectorXd cold_start(const ReducedState& xhat, const NmpcConfig& cfg) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(kNx * (cfg.N + 1) + kNu * cfg.N);
    for (int k = 1; k <= cfg.N + 1; ++k) z.segment<kNx>(state_offset(k)) = xhat.vec();
    return z;
}

NlpProblem build_ocp(const ReducedState& xhat, const ReferenceWindow& ref,
                     const ControllerState& cs, const NmpcConfig& cfg,
                     const VehicleParams& params, const TrackGeometry& track,
                     const std::vector<StageCorrection>* correction) {
    cfg.validate();
    const int N = cfg.N;
    if (static_cast<int>(ref.points.size()) != N ||
        static_cast<int>(ref.thetas.size()) != N)
        throw std::invalid_argument("build_ocp: reference window size mismatch");
    if (correction && static_cast<int>(correction->size()) != N + 1)
        throw std::invalid_argument("build_ocp: correction must have N+1 stages");

    NlpProblem p;
    p.n = kNx * (N + 1) + kNu * N;

    // boxes: v >= 0 on every state, rate bounds on every du
    p.lower = Eigen::VectorXd::Constant(p.n, -std::numeric_limits<double>::infinity());
    p.upper = Eigen::VectorXd::Constant(p.n, std::numeric_limits<double>::infinity());
    for (int k = 1; k <= N + 1; ++k) p.lower[state_offset(k) + 3] = 0.0;
    for (int k = 0; k < N; ++k) {
        p.lower[input_offset(N, k) + 0] = -cfg.ddelta_max;
        p.upper[input_offset(N, k) + 0] = cfg.ddelta_max;
        p.lower[input_offset(N, k) + 1] = -cfg.dD_max;
        p.upper[input_offset(N, k) + 1] = cfg.dD_max;
    }

    const Eigen::Vector4d sq = cfg.Q.cwiseSqrt();
    const Eigen::Vector2d sr = cfg.R.cwiseSqrt();
    const Eigen::Vector4d sp = cfg.P.cwiseSqrt();
    const std::vector<ReducedState> refs = ref.points;
    const Eigen::Vector4d r_term = ref.terminal.vec();

    p.n_res = kNx * N + kNu * N + kNx;
    p.residuals = [N, sq, sr, sp, refs, r_term](const Eigen::VectorXd& z,
                                                Eigen::VectorXd& val,
                                                Eigen::MatrixXd& jac) {
        val.setZero();
        jac.setZero();
        int row = 0;
        for (int k = 1; k <= N; ++k) {
            const Eigen::Vector4d d =
                z.segment<kNx>(state_offset(k)) - refs[size_t(k - 1)].vec();
            for (int i = 0; i < kNx; ++i) {
                val[row] = sq[i] * d[i];
                jac(row, state_offset(k) + i) = sq[i];
                ++row;
            }
        }
        for (int k = 0; k < N; ++k) {
            for (int i = 0; i < kNu; ++i) {
                val[row] = sr[i] * z[input_offset(N, k) + i];
                jac(row, input_offset(N, k) + i) = sr[i];
                ++row;
            }
        }
        const Eigen::Vector4d dT = z.segment<kNx>(state_offset(N + 1)) - r_term;
        for (int i = 0; i < kNx; ++i) {
            val[row] = sp[i] * dT[i];
            jac(row, state_offset(N + 1) + i) = sp[i];
            ++row;
        }
    };

    const Eigen::Vector4d x0 = xhat.vec();
    const Eigen::Vector2d u_prev = cs.u_prev.vec();
    std::vector<StageCorrection> corr;
    if (correction) corr = *correction;
    const double Ts = cfg.Ts;
    const VehicleParams par = params;

    p.n_eq = kNx * (N + 1);
    p.equality = [N, x0, u_prev, corr, Ts, par](const Eigen::VectorXd& z,
                                                Eigen::VectorXd& val,
                                                Eigen::MatrixXd& jac) {
        val.setZero();
        jac.setZero();
        Eigen::Vector2d u = u_prev;
        for (int k = 0; k <= N; ++k) {
            const int ju_last = std::min(k, N - 1);  // stage N holds u_{N-1}
            if (k <= N - 1) u += z.segment<kNu>(input_offset(N, k));
            const Eigen::Vector4d xk =
                (k == 0) ? x0 : Eigen::Vector4d(z.segment<kNx>(state_offset(k)));
            Eigen::Matrix4d Ad;
            Eigen::Matrix<double, 4, 2> Bd;
            Eigen::Vector4d xn = reduced_rk4_step_jac(
                ReducedState::from_vec(xk), ControlInput::from_vec(u), par, Ts, Ad, Bd);
            if (!corr.empty()) {
                const StageCorrection& c = corr[size_t(k)];
                xn += c.c0 + c.Jx * (xk - c.x_lin) + c.Ju * (u - c.u_lin);
                Ad += c.Jx;
                Bd += c.Ju;
            }
            const int row = kNx * k;
            val.segment<kNx>(row) = z.segment<kNx>(state_offset(k + 1)) - xn;
            jac.block<kNx, kNx>(row, state_offset(k + 1)) = Eigen::Matrix4d::Identity();
            if (k >= 1) jac.block<kNx, kNx>(row, state_offset(k)) = -Ad;
            for (int j = 0; j <= ju_last; ++j)
                jac.block<kNx, kNu>(row, input_offset(N, j)) -= Bd;
        }
    };

    // containment anchors at the reference arc lengths (terminal reuses the
    // last one)
    std::vector<Eigen::Vector4d> anchors;  // (sin phi, cos phi, Xc, Yc)
    std::vector<double> limits;
    anchors.reserve(N + 1);
    limits.reserve(N + 1);
    for (int k = 1; k <= N + 1; ++k) {
        const double th = track.wrap(k <= N ? ref.thetas[size_t(k - 1)]
                                            : ref.theta_terminal);
        const double phi = track.heading(th);
        const Eigen::Vector2d c = track.centerline(th);
        anchors.push_back({std::sin(phi), std::cos(phi), c.x(), c.y()});
        limits.push_back(track.half_width(th) - cfg.margin);
    }

    p.n_ineq = 2 * kNu * N + 2 * (N + 1);
    p.inequality = [N, u_prev, anchors, limits, cfg](const Eigen::VectorXd& z,
                                                     Eigen::VectorXd& val,
                                                     Eigen::MatrixXd& jac) {
        val.setZero();
        jac.setZero();
        int row = 0;
        Eigen::Vector2d u = u_prev;
        for (int k = 0; k < N; ++k) {
            u += z.segment<kNu>(input_offset(N, k));
            const double ub[2] = {cfg.input_bounds.delta_max, cfg.input_bounds.D_max};
            const double lb[2] = {-cfg.input_bounds.delta_max, cfg.input_bounds.D_min};
            for (int i = 0; i < kNu; ++i) {
                val[row] = u[i] - ub[i];
                val[row + 1] = lb[i] - u[i];
                for (int j = 0; j <= k; ++j) {
                    jac(row, input_offset(N, j) + i) = 1.0;
                    jac(row + 1, input_offset(N, j) + i) = -1.0;
                }
                row += 2;
            }
        }
        for (int k = 1; k <= N + 1; ++k) {
            const Eigen::Vector4d& a = anchors[size_t(k - 1)];
            const double X = z[state_offset(k) + 0], Y = z[state_offset(k) + 1];
            const double e = a[0] * (X - a[2]) - a[1] * (Y - a[3]);
            val[row] = e - limits[size_t(k - 1)];
            val[row + 1] = -e - limits[size_t(k - 1)];
            jac(row, state_offset(k) + 0) = a[0];
            jac(row, state_offset(k) + 1) = -a[1];
            jac(row + 1, state_offset(k) + 0) = -a[0];
            jac(row + 1, state_offset(k) + 1) = a[1];
            row += 2;
        }
    };

    return p;
}

NlpProblem build_ocp(const ReducedState& xhat, const ReferenceWindow& ref,
                     const ControllerState& cs, const NmpcConfig& cfg,
                     const VehicleParams& params, const TrackGeometry& track,
                     const std::vector<Eigen::Vector4d>& offsets) {
    std::vector<StageCorrection> corr(offsets.size());
    for (size_t k = 0; k < offsets.size(); ++k) corr[k].c0 = offsets[k];
    return build_ocp(xhat, ref, cs, cfg, params, track, &corr);
}

std::vector<Eigen::Vector4d> evaluate_correction(const std::array<GpModel, 4>& gp,
                                                 const std::vector<ReducedState>& states,
                                                 const std::vector<ControlInput>& inputs) {
    for (const auto& m : gp)
        if (!m.trained())
            throw std::invalid_argument("evaluate_correction: untrained GP channel");
    if (states.size() != inputs.size())
        throw std::invalid_argument("evaluate_correction: stage count mismatch");
    std::vector<Eigen::Vector4d> out(states.size());
    for (size_t k = 0; k < states.size(); ++k) {
        Vector6 z;
        z << states[k].X, states[k].Y, states[k].psi, states[k].v, inputs[k].delta,
            inputs[k].D;
        for (int c = 0; c < 4; ++c) {
            double mean = 0.0, var = 0.0;
            gp[size_t(c)].predict(z, mean, var);
            out[k][c] = mean;
        }
    }
    return out;
}

std::vector<StageCorrection> evaluate_correction_linearized(
    const std::array<GpModel, 4>& gp, const std::vector<ReducedState>& states,
    const std::vector<ControlInput>& inputs) {
    for (const auto& m : gp)
        if (!m.trained())
            throw std::invalid_argument(
                "evaluate_correction_linearized: untrained GP channel");
    if (states.size() != inputs.size())
        throw std::invalid_argument(
            "evaluate_correction_linearized: stage count mismatch");
    std::vector<StageCorrection> out(states.size());
    for (size_t k = 0; k < states.size(); ++k) {
        Vector6 z;
        z << states[k].X, states[k].Y, states[k].psi, states[k].v, inputs[k].delta,
            inputs[k].D;
        StageCorrection& c = out[k];
        c.x_lin = states[k].vec();
        c.u_lin = inputs[k].vec();
        for (int ch = 0; ch < 4; ++ch) {
            double mean = 0.0;
            Vector6 grad;
            gp[size_t(ch)].predict_gradient(z, mean, grad);
            c.c0[ch] = mean;
            c.Jx.row(ch) = grad.head<4>().transpose();
            c.Ju.row(ch) = grad.tail<2>().transpose();
        }
    }
    return out;
}

NmpcController::NmpcController(const RaceLine& rl, const TrackGeometry& track,
                               NmpcConfig cfg, VehicleParams params)
    : lut_(rl), track_(track), cfg_(cfg), params_(params) {
    cfg_.validate();
    params_.validate();
}

void NmpcController::attach_correction(std::array<GpModel, 4> gp) {
    for (const auto& m : gp)
        if (!m.trained())
            throw std::invalid_argument("attach_correction: untrained GP channel");
    gp_ = std::move(gp);
}

void NmpcController::clear_correction() { gp_.reset(); }

void NmpcController::reset() { cs_ = ControllerState{}; }

ControlInput NmpcController::step(const ReducedState& xhat, NmpcDiagnostics* diag) {
    const int N = cfg_.N;
    const ReferenceWindow ref = build_reference(lut_, xhat, cs_, cfg_);

    const bool have_warm = cs_.warm.size() == kNx * (N + 1) + kNu * N;
    const Eigen::VectorXd z0 = have_warm ? cs_.warm : cold_start(xhat, cfg_);

    SolverOptions opts;
    opts.kkt_tol = cfg_.kkt_tol;
    opts.feas_tol = 1e-6;
    opts.max_iter = cfg_.max_iter;
    // The ADMM dual residual on this problem plateaus near 3e-7; a tight QP
    // tolerance just burns the iteration budget while the active-set polish
    // supplies the final accuracy. Loosen the inner tolerance and cap the
    // iterations to keep each SQP step cheap.
    opts.qp.eps = 1e-5;
    opts.qp.max_iter = 400;

    Solution sol;
    if (!gp_) {
        sol = SqpSolver(opts).solve(build_ocp(xhat, ref, cs_, cfg_, params_, track_), z0);
    } else {
        // The correction is evaluated on a frozen trajectory, so a single
        // solve lets the optimizer move to inputs where that correction is
        // invalid (the GP is strongly input-dependent through delta). Iterate
        // correction and solve to an approximate fixed point: re-evaluate on
        // each solution and re-solve warm-started, which is cheap.
        Eigen::VectorXd zi = z0;
        Eigen::Vector2d u_prev = cs_.u_prev.vec();
        for (int pass = 0; pass < 3; ++pass) {
            std::vector<ReducedState> xs;
            std::vector<ControlInput> us;
            xs.push_back(xhat);
            for (int k = 1; k <= N; ++k)
                xs.push_back(ReducedState::from_vec(zi.segment<kNx>(state_offset(k))));
            Eigen::Vector2d u = u_prev;
            for (int k = 0; k <= N; ++k) {
                if (k <= N - 1) u += zi.segment<kNu>(input_offset(N, k));
                us.push_back(ControlInput::from_vec(u));  // stage N holds u_{N-1}
            }
            std::vector<StageCorrection> corr =
                evaluate_correction_linearized(*gp_, xs, us);
            if (std::getenv("LMPC_CORR_TRACE")) {
                Eigen::Vector4d mx = Eigen::Vector4d::Zero();
                for (const auto& c : corr) mx = mx.cwiseMax(c.c0.cwiseAbs());
                std::fprintf(stderr, "corr pass %d max |X|=%.4g |Y|=%.4g |psi|=%.4g |v|=%.4g\n",
                             pass, mx[0], mx[1], mx[2], mx[3]);
            }
            const NlpProblem ocp =
                build_ocp(xhat, ref, cs_, cfg_, params_, track_, &corr);
            Solution si = SqpSolver(opts).solve(ocp, zi);
            const double move = (si.z - zi).cwiseAbs().maxCoeff();
            sol.solve_time += si.solve_time;
            sol.iterations += si.iterations;
            sol.cost_value = si.cost_value;
            sol.kkt_residual = si.kkt_residual;
            sol.status = si.status;
            sol.z = si.z;
            zi = si.z;
            if (move < 1e-4) break;
        }
    }

    const Eigen::Vector2d du0 = sol.z.segment<kNu>(input_offset(N, 0));
    ControlInput u{cs_.u_prev.delta + du0[0], cs_.u_prev.D + du0[1]};
    u.delta = std::clamp(u.delta, -cfg_.input_bounds.delta_max,
                         cfg_.input_bounds.delta_max);
    u.D = std::clamp(u.D, cfg_.input_bounds.D_min, cfg_.input_bounds.D_max);

    if (diag) {
        diag->cost = sol.cost_value;
        diag->kkt_residual = sol.kkt_residual;
        diag->iterations = sol.iterations;
        diag->solve_time = sol.solve_time;
        diag->status = sol.status;
        diag->degraded = sol.status != SolveStatus::Converged;
        diag->theta = cs_.theta_hint.value_or(0.0);
        diag->reference = ref.points.front();
        diag->ref_theta = ref.thetas.front();
    }

    // shift for the next step: states and rates advance one stage, the last
    // state is duplicated and the trailing rate is zero
    Eigen::VectorXd warm(sol.z.size());
    for (int k = 1; k <= N; ++k)
        warm.segment<kNx>(state_offset(k)) = sol.z.segment<kNx>(state_offset(k + 1));
    warm.segment<kNx>(state_offset(N + 1)) = sol.z.segment<kNx>(state_offset(N + 1));
    for (int k = 0; k + 1 < N; ++k)
        warm.segment<kNu>(input_offset(N, k)) =
            sol.z.segment<kNu>(input_offset(N, k + 1));
    warm.segment<kNu>(input_offset(N, N - 1)).setZero();
    cs_.warm = std::move(warm);
    cs_.u_prev = u;
    return u;
}

}  // namespace lmpc
