#include "lmpc/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "lmpc/nlp.hpp"

namespace lmpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kThetaRate = 8.0;  // m/s, loose cap on progress speed

// track heading continued across lap boundaries (the track's own lookup is
// periodic over one lap)
double heading_cont(const TrackGeometry& t, double theta, double lap_turn) {
    if (!t.closed()) return t.heading(theta);
    const double L = t.length();
    const double k = std::floor(theta / L);
    return t.heading(theta - k * L) + k * lap_turn;
}

struct RolloutStep {
    Eigen::Vector2d u;              // input applied at the previous state
    Eigen::Matrix<double, 6, 1> x;  // resulting state
    double theta;                   // its (unwrapped) progress
};

// Curvature-limited target speed with braking lookahead: the tightest curve
// within the next couple of meters caps the speed at sqrt(ay_lim / |kappa|).
double rollout_target_speed(const TrackGeometry& track, double th) {
    constexpr double kAyLim = 4.5;   // m/s^2, lateral limit holding the car well
                                     // inside the boundary at Table-1 tire peaks
    constexpr double kVMax = 4.2;    // m/s, just under the drivetrain top speed
    constexpr double kVMin = 0.8;    // m/s, floor so progress never stalls
    constexpr double kLook = 2.0;    // m, braking lookahead
    double vt = kVMax;
    for (double d = 0.0; d <= kLook; d += 0.25) {
        const double kap = std::abs(track.curvature(track.wrap(th + d)));
        if (kap > 1e-6) vt = std::min(vt, std::sqrt(kAyLim / kap));
    }
    return std::clamp(vt, kVMin, kVMax);
}

// Dynamically feasible seed trajectory: rolls the full model forward under a
// centerline-tracking feedback law (curvature feedforward plus contour and
// heading feedback, proportional speed control toward the curvature-limited
// target). Keeping the equality constraints satisfied at the initial iterate
// is what lets the SQP converge from cold starts; the same law is the
// fallback that carries the plan through stages where a window solve fails.
std::vector<RolloutStep> rollout_guess(const TrackGeometry& track,
                                       const VehicleParams& params, double Ts,
                                       const InputBounds& ib,
                                       Eigen::Matrix<double, 6, 1> x, double th,
                                       int steps) {
    const double L = track.length();
    const double wb = params.lf + params.lr;
    std::vector<RolloutStep> out;
    out.reserve(size_t(steps));
    for (int k = 0; k < steps; ++k) {
        const double kappa = track.curvature(track.wrap(th));
        const double e = track.contour_error(x[0], x[1], track.wrap(th));
        const double dpsi =
            std::remainder(x[2] - track.heading(track.wrap(th)), 2.0 * M_PI);
        const double delta =
            std::clamp(std::atan(wb * kappa) + 1.2 * e - 1.8 * dpsi, -ib.delta_max,
                       ib.delta_max);
        const double D = std::clamp(
            0.8 * (rollout_target_speed(track, th) - x[3]), ib.D_min, ib.D_max);
        const ControlInput u{delta, D};
        x = full_rk4_step(FullState::from_vec(x), u, params, Ts);
        const double proj = track.project(x[0], x[1], track.wrap(th));
        const double dth = track.closed() ? std::remainder(proj - track.wrap(th), L)
                                          : proj - th;
        th += std::max(dth, 1e-6);  // keep the progress guess monotone
        out.push_back({Eigen::Vector2d(u.delta, u.D), x, th});
    }
    return out;
}

// exact forward rollout of a fixed input sequence; thetas by projection
std::vector<RolloutStep> realize_inputs(const TrackGeometry& track,
                                        const VehicleParams& params, double Ts,
                                        Eigen::Matrix<double, 6, 1> x, double th,
                                        const std::vector<Eigen::Vector2d>& inputs) {
    const double L = track.length();
    std::vector<RolloutStep> out;
    out.reserve(inputs.size());
    for (const auto& uv : inputs) {
        const ControlInput u{uv[0], uv[1]};
        x = full_rk4_step(FullState::from_vec(x), u, params, Ts);
        const double proj = track.project(x[0], x[1], track.wrap(th));
        const double dth = track.closed() ? std::remainder(proj - track.wrap(th), L)
                                          : proj - th;
        th += std::max(dth, 1e-9);
        out.push_back({uv, x, th});
    }
    return out;
}

struct WindowProblem {
    // decision layout: [x_1..x_Np (6) | u_0..u_{Np-1} (2) | theta_1..theta_Np]
    int Np{0};
    int off_u{0};
    int off_th{0};
    int n{0};
};

struct WindowResult {
    std::vector<Eigen::Matrix<double, 6, 1>> x;  // stages 1..Np
    std::vector<Eigen::Vector2d> u;              // stages 0..Np-1
    std::vector<double> theta;                   // stages 1..Np
    Eigen::VectorXd z;
    SolveStatus status{SolveStatus::MaxIter};
    double ineq_violation{0.0};
};

WindowResult solve_window(const TrackGeometry& track, const VehicleParams& params,
                          const PlannerConfig& cfg, double q_eff, double margin_eff,
                          const Eigen::Matrix<double, 6, 1>& x0, double theta0,
                          const Eigen::VectorXd* warm, double lap_turn) {
    const int Np = cfg.Np;
    WindowProblem wp;
    wp.Np = Np;
    wp.off_u = 6 * Np;
    wp.off_th = 8 * Np;
    wp.n = 9 * Np;

    const double sq = std::sqrt(q_eff);
    const double sl = std::sqrt(cfg.lag_weight);
    const double Ts = cfg.Ts;
    const double v0 = std::hypot(x0[3], x0[4]);

    NlpProblem p;
    p.n = wp.n;

    // cost: contour residuals + lag regularization, progress reward linear
    p.n_res = 2 * Np;
    p.residuals = [&, sq, sl, Ts, theta0, v0](const Eigen::VectorXd& z, Eigen::VectorXd& r,
                                              Eigen::MatrixXd& J) {
        J.setZero();
        for (int k = 1; k <= Np; ++k) {
            const int ix = 6 * (k - 1);
            const double X = z[ix], Y = z[ix + 1];
            const double th = z[wp.off_th + (k - 1)];
            const double phi = track.heading(th);
            const double s = std::sin(phi), c = std::cos(phi);
            const Eigen::Vector2d ref = track.centerline(th);
            const Eigen::Vector2d tan = track.tangent(th);
            const double dphi = track.heading_rate(th);
            const double e = s * (X - ref.x()) - c * (Y - ref.y());
            const int row = k - 1;
            r[row] = sq * e;
            J(row, ix) = sq * s;
            J(row, ix + 1) = -sq * c;
            J(row, wp.off_th + (k - 1)) =
                sq * (dphi * (c * (X - ref.x()) + s * (Y - ref.y())) - s * tan.x() +
                      c * tan.y());
        }
        for (int k = 0; k < Np; ++k) {
            const int row = Np + k;
            const double th_next = z[wp.off_th + k];
            const double th_k = k == 0 ? theta0 : z[wp.off_th + (k - 1)];
            double vk, dvx = 0.0, dvy = 0.0;
            int ivx = -1;
            if (k == 0) {
                vk = v0;
            } else {
                const int ix = 6 * (k - 1);
                ivx = ix + 3;
                vk = std::hypot(z[ix + 3], z[ix + 4]);
                if (vk > 1e-9) {
                    dvx = z[ix + 3] / vk;
                    dvy = z[ix + 4] / vk;
                }
            }
            r[row] = sl * (th_next - th_k - vk * Ts);
            J(row, wp.off_th + k) = sl;
            if (k > 0) {
                J(row, wp.off_th + (k - 1)) = -sl;
                J(row, ivx) = -sl * Ts * dvx;
                J(row, ivx + 1) = -sl * Ts * dvy;
            }
        }
    };
    p.linear_cost = Eigen::VectorXd::Zero(wp.n);
    p.linear_cost[wp.off_th + Np - 1] = -cfg.r;

    // dynamics equalities
    p.n_eq = 6 * Np;
    p.equality = [&, Ts](const Eigen::VectorXd& z, Eigen::VectorXd& c, Eigen::MatrixXd& J) {
        J.setZero();
        for (int k = 0; k < Np; ++k) {
            const Eigen::Matrix<double, 6, 1> xk =
                k == 0 ? x0 : Eigen::Matrix<double, 6, 1>(z.segment<6>(6 * (k - 1)));
            const ControlInput uk = ControlInput::from_vec(z.segment<2>(wp.off_u + 2 * k));
            Eigen::Matrix<double, 6, 6> Ad;
            Eigen::Matrix<double, 6, 2> Bd;
            const auto xn = full_rk4_step_jac(FullState::from_vec(xk), uk, params, Ts, Ad, Bd);
            c.segment<6>(6 * k) = z.segment<6>(6 * k) - xn;
            J.block<6, 6>(6 * k, 6 * k) = Eigen::Matrix<double, 6, 6>::Identity();
            if (k > 0) J.block<6, 6>(6 * k, 6 * (k - 1)) = -Ad;
            J.block<6, 2>(6 * k, wp.off_u + 2 * k) = -Bd;
        }
    };

    // monotone progress + boundary containment + heading-deviation cap
    p.n_ineq = 5 * Np;
    p.inequality = [&, theta0](const Eigen::VectorXd& z, Eigen::VectorXd& g,
                               Eigen::MatrixXd& J) {
        J.setZero();
        for (int k = 0; k < Np; ++k) {
            const double prev = k == 0 ? theta0 : z[wp.off_th + (k - 1)];
            g[k] = prev - z[wp.off_th + k];
            if (k > 0) J(k, wp.off_th + (k - 1)) = 1.0;
            J(k, wp.off_th + k) = -1.0;
        }
        for (int k = 1; k <= Np; ++k) {
            const int ix = 6 * (k - 1);
            const double X = z[ix], Y = z[ix + 1];
            const double th = z[wp.off_th + (k - 1)];
            const double phi = track.heading(th);
            const double s = std::sin(phi), c = std::cos(phi);
            const Eigen::Vector2d ref = track.centerline(th);
            const Eigen::Vector2d tan = track.tangent(th);
            const double dphi = track.heading_rate(th);
            const double e = s * (X - ref.x()) - c * (Y - ref.y());
            const double de_dth =
                dphi * (c * (X - ref.x()) + s * (Y - ref.y())) - s * tan.x() + c * tan.y();
            const double hw = track.half_width(th) - margin_eff;
            const double dhw = track.half_width_deriv(th);
            const int r1 = Np + 2 * (k - 1);
            const int r2 = r1 + 1;
            g[r1] = e - hw;
            g[r2] = -e - hw;
            J(r1, ix) = s;
            J(r1, ix + 1) = -c;
            J(r1, wp.off_th + (k - 1)) = de_dth - dhw;
            J(r2, ix) = -s;
            J(r2, ix + 1) = c;
            J(r2, wp.off_th + (k - 1)) = -de_dth - dhw;
        }
        // |psi_k - phi(theta_k)| <= psi_dev_max: rules out spin solutions
        for (int k = 1; k <= Np; ++k) {
            const int ix = 6 * (k - 1);
            const double th = z[wp.off_th + (k - 1)];
            const double phi = heading_cont(track, th, lap_turn);
            const double dphi = track.heading_rate(th);
            const double dev = z[ix + 2] - phi;
            const int r1 = 3 * Np + 2 * (k - 1);
            const int r2 = r1 + 1;
            g[r1] = dev - cfg.psi_dev_max;
            g[r2] = -dev - cfg.psi_dev_max;
            J(r1, ix + 2) = 1.0;
            J(r1, wp.off_th + (k - 1)) = -dphi;
            J(r2, ix + 2) = -1.0;
            J(r2, wp.off_th + (k - 1)) = dphi;
        }
    };

    // boxes
    p.lower = Eigen::VectorXd::Constant(wp.n, -kInf);
    p.upper = Eigen::VectorXd::Constant(wp.n, kInf);
    for (int k = 1; k <= Np; ++k) {
        const int ix = 6 * (k - 1);
        p.lower[ix + 3] = 0.0;  // forward motion only
        p.lower[ix + 4] = -cfg.vy_max;
        p.upper[ix + 4] = cfg.vy_max;
        p.lower[ix + 5] = -cfg.omega_max;
        p.upper[ix + 5] = cfg.omega_max;
    }
    for (int k = 0; k < Np; ++k) {
        p.lower[wp.off_u + 2 * k] = -cfg.input_bounds.delta_max;
        p.upper[wp.off_u + 2 * k] = cfg.input_bounds.delta_max;
        p.lower[wp.off_u + 2 * k + 1] = cfg.input_bounds.D_min;
        p.upper[wp.off_u + 2 * k + 1] = cfg.input_bounds.D_max;
        p.lower[wp.off_th + k] = theta0;
        p.upper[wp.off_th + k] = theta0 + (k + 1) * Ts * kThetaRate;
    }

    // initial guess: feasible feedback rollout from the window start
    Eigen::VectorXd z0(wp.n);
    if (warm && warm->size() == wp.n) {
        z0 = *warm;
    } else {
        const auto seed =
            rollout_guess(track, params, Ts, cfg.input_bounds, x0, theta0, Np);
        for (int k = 1; k <= Np; ++k) {
            const auto& st = seed[size_t(k - 1)];
            z0.segment<6>(6 * (k - 1)) = st.x;
            z0[wp.off_th + (k - 1)] =
                std::min(st.theta, theta0 + k * Ts * kThetaRate);
            z0.segment<2>(wp.off_u + 2 * (k - 1)) = st.u;
        }
    }

    SolverOptions opts;
    opts.max_iter = cfg.max_iter;
    opts.kkt_tol = cfg.kkt_tol;
    opts.qp.max_iter = 1000;
    opts.trust_radius = 0.5;
    SqpSolver solver(opts);
    const Solution sol = solver.solve(p, z0);

    if (std::getenv("LMPC_PLANNER_TRACE"))
        std::fprintf(stderr,
                     "window th0=%.3f dpsi0=%.3f vy0=%.3f om0=%.3f "
                     "iters=%d status=%d kkt=%.3e eq=%.3e in=%.3e t=%.3fs "
                     "v0=%.3f vN=%.3f thN=%.3f u0=[%.3f %.3f] uN=[%.3f %.3f]\n",
                     theta0,
                     std::remainder(x0[2] - heading_cont(track, theta0, lap_turn), 2.0 * M_PI),
                     x0[4], x0[5],
                     sol.iterations, static_cast<int>(sol.status), sol.kkt_residual,
                     sol.eq_violation, sol.ineq_violation, sol.solve_time, v0,
                     std::hypot(sol.z[6 * (Np - 1) + 3], sol.z[6 * (Np - 1) + 4]),
                     sol.z[wp.off_th + Np - 1] - theta0, sol.z[wp.off_u],
                     sol.z[wp.off_u + 1], sol.z[wp.off_u + 2 * (Np - 1)],
                     sol.z[wp.off_u + 2 * (Np - 1) + 1]);

    WindowResult res;
    res.z = sol.z;
    res.status = sol.status;
    res.ineq_violation = sol.ineq_violation;
    for (int k = 1; k <= Np; ++k) {
        res.x.push_back(sol.z.segment<6>(6 * (k - 1)));
        res.theta.push_back(sol.z[wp.off_th + (k - 1)]);
    }
    for (int k = 0; k < Np; ++k) res.u.push_back(sol.z.segment<2>(wp.off_u + 2 * k));
    return res;
}

}  // namespace

void PlannerConfig::validate() const {
    if (Np < 2) throw std::invalid_argument("PlannerConfig: Np must be >= 2");
    if (!(Ts > 0.0)) throw std::invalid_argument("PlannerConfig: Ts must be positive");
    if (!(q > 0.0) || !(r > 0.0))
        throw std::invalid_argument("PlannerConfig: q and r must be positive");
    if (margin < 0.0) throw std::invalid_argument("PlannerConfig: margin must be >= 0");
}

RaceLine plan_raceline(const TrackGeometry& track, const VehicleParams& params,
                       const PlannerConfig& cfg, PlannedTrajectory* debug) {
    cfg.validate();
    params.validate();
    const double L = track.length();
    const double lap_turn = track.closed() ? track.heading(L) - track.heading(0.0) : 0.0;
    // extra clearance the window NLP keeps so the exact input replay, which
    // drifts from the transcription by the residual dynamics violation, still
    // respects the configured margin
    const double kMarginSlack = 0.05;

    Eigen::Matrix<double, 6, 1> x0;
    {
        const Eigen::Vector2d pos = track.centerline(0.0);
        x0 << pos.x(), pos.y(), track.heading(0.0), 1.0, 0.0, 0.0;
    }
    double theta0 = 0.0;

    const int adv = std::max(1, cfg.Np / 2);
    std::vector<double> rec_t, rec_theta, rec_psi, rec_v;
    std::vector<Eigen::Vector2d> rec_pos;
    rec_t.push_back(0.0);
    rec_theta.push_back(0.0);
    rec_pos.emplace_back(x0[0], x0[1]);
    rec_psi.push_back(x0[2]);
    rec_v.push_back(std::hypot(x0[3], x0[4]));

    PlannedTrajectory traj;
    traj.Ts = cfg.Ts;
    traj.states.push_back(x0);
    traj.thetas.push_back(0.0);

    Eigen::VectorXd warm;
    bool have_warm = false;
    double t_now = 0.0;
    const int max_windows = 2 + static_cast<int>(std::ceil(8.0 * L / (adv * cfg.Ts)));

    for (int w = 0; w < max_windows && theta0 < L; ++w) {
        double q_eff = cfg.q;
        bool ok = false;
        bool have_res = false;
        int commit = adv;
        WindowResult res;
        std::vector<RolloutStep> realized;
        // A window is accepted on what the model actually does, not on solver
        // status: the optimized inputs are replayed exactly; the committed
        // prefix must respect the configured margin and make progress, and
        // the remainder of the window must at least stay on the track so the
        // committed endpoint has a known safe continuation.
        auto acceptable = [&](const std::vector<RolloutStep>& rs) {
            for (size_t k = 0; k < rs.size(); ++k) {
                const auto& st = rs[k];
                const double e = track.contour_error(st.x[0], st.x[1], st.theta);
                const double room = track.half_width(st.theta) -
                                    (k < size_t(adv) ? cfg.margin : 0.0);
                if (std::abs(e) > room) return false;
            }
            return rs[size_t(adv - 1)].theta - theta0 >= 1e-3;
        };
        for (int attempt = 0; attempt < 3; ++attempt) {
            res = solve_window(track, params, cfg, q_eff, cfg.margin + kMarginSlack, x0,
                               theta0, (have_warm && attempt == 0) ? &warm : nullptr,
                               lap_turn);
            realized = realize_inputs(track, params, cfg.Ts, x0, theta0, res.u);
            if (acceptable(realized)) {
                ok = true;
                have_res = true;
                break;
            }
            q_eff *= 2.0;  // escalate the contour weight and retry cold
        }
        if (!ok) {
            // fallback: carry the plan forward under the centerline-tracking
            // feedback law, which is contained by construction at the
            // curvature-limited speed; the next window re-optimizes from there
            const auto fb =
                rollout_guess(track, params, cfg.Ts, cfg.input_bounds, x0, theta0, cfg.Np);
            std::vector<Eigen::Vector2d> fu;
            fu.reserve(fb.size());
            for (const auto& st : fb) fu.push_back(st.u);
            realized = realize_inputs(track, params, cfg.Ts, x0, theta0, fu);
            ok = acceptable(realized);
        }
        if (!ok) {
            std::ostringstream msg;
            msg << "plan_raceline: window solve stuck at theta = " << theta0;
            throw std::runtime_error(msg.str());
        }

        for (int k = 0; k < commit; ++k) {
            const auto& st = realized[size_t(k)];
            t_now += cfg.Ts;
            rec_t.push_back(t_now);
            rec_theta.push_back(st.theta);
            rec_pos.emplace_back(st.x[0], st.x[1]);
            rec_psi.push_back(st.x[2]);
            rec_v.push_back(std::hypot(st.x[3], st.x[4]));
            traj.states.push_back(st.x);
            traj.inputs.push_back(st.u);
            traj.thetas.push_back(st.theta);
        }
        x0 = realized[size_t(commit - 1)].x;
        theta0 = realized[size_t(commit - 1)].theta;

        if (!have_res) {
            have_warm = false;
            continue;
        }

        // shift the solution by adv stages for the next window's warm start;
        // the vacated tail is filled by continuing the feedback rollout from
        // the final planned state so it stays dynamically feasible
        const int Np = cfg.Np;
        const int off_u = 6 * Np, off_th = 8 * Np;
        const auto tail = rollout_guess(track, params, cfg.Ts, cfg.input_bounds,
                                        res.x.back(), res.theta.back(), commit);
        warm.resize(9 * Np);
        for (int k = 1; k <= Np; ++k) {
            const int src = k + commit;  // old stage index
            if (src <= Np) {
                warm.segment<6>(6 * (k - 1)) = res.x[size_t(src - 1)];
                warm[off_th + (k - 1)] = res.theta[size_t(src - 1)];
            } else {
                const auto& st = tail[size_t(src - Np - 1)];
                warm.segment<6>(6 * (k - 1)) = st.x;
                warm[off_th + (k - 1)] = st.theta;
            }
        }
        for (int k = 0; k < Np; ++k) {
            const int src = k + commit;
            warm.segment<2>(off_u + 2 * k) =
                src <= Np - 1 ? res.u[size_t(src)] : tail[size_t(src - Np)].u;
        }
        have_warm = true;
    }
    if (theta0 < L)
        throw std::runtime_error("plan_raceline: lap did not close within the window budget");

    // lap time: linear interpolation of the theta = L crossing
    double lap_time = rec_t.back();
    for (size_t i = 1; i < rec_theta.size(); ++i) {
        if (rec_theta[i] >= L) {
            const double f =
                (L - rec_theta[i - 1]) / std::max(rec_theta[i] - rec_theta[i - 1], 1e-12);
            lap_time = rec_t[i - 1] + f * (rec_t[i] - rec_t[i - 1]);
            break;
        }
    }

    if (debug) *debug = traj;

    RaceLine raw;
    raw.lap_length = L;
    raw.lap_time = lap_time;
    double last_th = -kInf;
    for (size_t i = 0; i < rec_theta.size(); ++i) {
        if (rec_theta[i] <= last_th + 1e-9) continue;  // strictly increasing knots
        if (rec_theta[i] >= L) {
            // interpolate the final knot exactly onto theta = L
            const double f = (L - last_th) / std::max(rec_theta[i] - last_th, 1e-12);
            const auto& a = raw.samples.back();
            raw.samples.push_back({L, a.X + f * (rec_pos[i].x() - a.X),
                                   a.Y + f * (rec_pos[i].y() - a.Y),
                                   a.psi + f * (rec_psi[i] - a.psi),
                                   a.v + f * (rec_v[i] - a.v)});
            break;
        }
        last_th = rec_theta[i];
        raw.samples.push_back(
            {rec_theta[i], rec_pos[i].x(), rec_pos[i].y(), rec_psi[i], rec_v[i]});
    }
    if (raw.samples.size() < 4)
        throw std::runtime_error("plan_raceline: degenerate planned trajectory");

    // uniform-theta race line
    return resample_raceline(raw, L / 400.0);
}

RaceLine resample_raceline(const RaceLine& rl, double d_theta) {
    if (!(d_theta > 0.0)) throw std::invalid_argument("resample_raceline: d_theta must be > 0");
    if (rl.samples.size() < 4)
        throw std::invalid_argument("resample_raceline: need at least 4 samples");
    std::vector<double> th, xs, ys, ps, vs;
    for (const auto& s : rl.samples) {
        th.push_back(s.theta);
        xs.push_back(s.X);
        ys.push_back(s.Y);
        ps.push_back(s.psi);
        vs.push_back(s.v);
    }
    const CubicSpline1D sx(th, xs, CubicSpline1D::Bc::Natural);
    const CubicSpline1D sy(th, ys, CubicSpline1D::Bc::Natural);
    const CubicSpline1D sp(th, ps, CubicSpline1D::Bc::Natural);
    const CubicSpline1D sv(th, vs, CubicSpline1D::Bc::Natural);

    RaceLine out;
    out.lap_length = rl.lap_length;
    out.lap_time = rl.lap_time;
    const double t0 = th.front(), t1 = th.back();
    for (double t = t0; t <= t1 + 1e-9; t += d_theta) {
        const double tt = std::min(t, t1);
        out.samples.push_back({tt, sx.eval(tt), sy.eval(tt), sp.eval(tt), sv.eval(tt)});
        if (tt >= t1) break;
    }
    return out;
}

RaceLineLookup::RaceLineLookup(const RaceLine& rl) {
    if (rl.samples.size() < 4)
        throw std::invalid_argument("RaceLineLookup: need at least 4 samples");
    L_ = rl.lap_length > 0.0 ? rl.lap_length : rl.samples.back().theta;
    std::vector<double> th, xs, ys, ps, vs;
    for (const auto& s : rl.samples) {
        th.push_back(s.theta);
        xs.push_back(s.X);
        ys.push_back(s.Y);
        ps.push_back(s.psi);
        vs.push_back(s.v);
    }
    const bool covers_lap = th.back() - th.front() >= L_ - 1e-6;
    const double closure = std::hypot(xs.back() - xs.front(), ys.back() - ys.front());
    if (covers_lap && std::abs(th.back() - th.front() - L_) < 1e-6 &&
        closure < std::max(0.02 * L_, 0.5)) {
        // closing knot present: force periodicity on x, y, v; psi is periodic
        // up to the lap turn, interpolate it naturally instead
        std::vector<double> xs2 = xs, ys2 = ys, vs2 = vs;
        xs2.back() = xs2.front();
        ys2.back() = ys2.front();
        vs2.back() = vs2.front();
        x_ = CubicSpline1D(th, xs2, CubicSpline1D::Bc::Periodic);
        y_ = CubicSpline1D(th, ys2, CubicSpline1D::Bc::Periodic);
        v_ = CubicSpline1D(th, vs2, CubicSpline1D::Bc::Periodic);
    } else {
        x_ = CubicSpline1D(th, xs, CubicSpline1D::Bc::Natural);
        y_ = CubicSpline1D(th, ys, CubicSpline1D::Bc::Natural);
        v_ = CubicSpline1D(th, vs, CubicSpline1D::Bc::Natural);
    }
    psi_ = CubicSpline1D(th, ps, CubicSpline1D::Bc::Natural);
}

double RaceLineLookup::wrap(double theta) const {
    if (x_.periodic()) {
        double t = std::fmod(theta - x_.t_min(), L_);
        if (t < 0.0) t += L_;
        return x_.t_min() + t;
    }
    return std::clamp(theta, x_.t_min(), x_.t_max());
}

Eigen::Vector2d RaceLineLookup::position(double theta) const {
    const double t = wrap(theta);
    return {x_.eval(t), y_.eval(t)};
}

double RaceLineLookup::heading(double theta) const { return psi_.eval(wrap(theta)); }

double RaceLineLookup::speed(double theta) const { return v_.eval(wrap(theta)); }

double RaceLineLookup::project(double X, double Y, std::optional<double> hint) const {
    const Eigen::Vector2d pt(X, Y);
    double best_t = x_.t_min();
    double best_d = kInf;
    if (hint) {
        const double span = std::max(L_ / 16.0, 0.5);
        for (int i = 0; i <= 24; ++i) {
            const double t = wrap(*hint - span + 2.0 * span * i / 24.0);
            const double d = (position(t) - pt).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best_t = t;
            }
        }
    } else {
        const int M = 1024;
        for (int i = 0; i < M; ++i) {
            const double t = x_.t_min() + (x_.t_max() - x_.t_min()) * i / M;
            const double d = (position(t) - pt).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best_t = t;
            }
        }
    }
    double t = best_t;
    for (int it = 0; it < 20; ++it) {
        const double tw = wrap(t);
        const Eigen::Vector2d c(x_.eval(tw), y_.eval(tw));
        const Eigen::Vector2d d1(x_.deriv(tw), y_.deriv(tw));
        const Eigen::Vector2d d2(x_.deriv2(tw), y_.deriv2(tw));
        const double g = (c - pt).dot(d1);
        const double h = d1.squaredNorm() + (c - pt).dot(d2);
        if (std::abs(h) < 1e-12) break;
        double step = -g / h;
        step = std::clamp(step, -L_ / 8.0, L_ / 8.0);
        t += step;
        if (std::abs(step) < 1e-12) break;
    }
    const double tw = wrap(t);
    if ((position(tw) - pt).squaredNorm() <= best_d + 1e-12) return tw;
    return best_t;
}

void save_raceline_csv(const RaceLine& rl, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_raceline_csv: cannot write " + path);
    out.precision(17);
    out << "theta,x,y,psi,v\n";
    for (const auto& s : rl.samples)
        out << s.theta << "," << s.X << "," << s.Y << "," << s.psi << "," << s.v << "\n";
    if (!out) throw std::runtime_error("save_raceline_csv: write failed for " + path);
}

RaceLine load_raceline_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_raceline_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "theta,x,y,psi,v")
        throw std::runtime_error("load_raceline_csv: bad header in " + path);
    RaceLine rl;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        RaceLineSample s;
        char comma;
        if (!(ss >> s.theta >> comma >> s.X >> comma >> s.Y >> comma >> s.psi >> comma >>
              s.v))
            throw std::runtime_error("load_raceline_csv: bad row in " + path);
        rl.samples.push_back(s);
    }
    if (rl.samples.size() < 2)
        throw std::runtime_error("load_raceline_csv: too few samples in " + path);
    rl.lap_length = rl.samples.back().theta;
    return rl;
}

}  // namespace lmpc
