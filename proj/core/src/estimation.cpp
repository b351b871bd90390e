#include "lmpc/estimation.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace lmpc {

void MheConfig::validate() const {
    if (Ne < 1) throw std::invalid_argument("MheConfig: Ne must be >= 1");
    if (!(Ts > 0.0)) throw std::invalid_argument("MheConfig: Ts must be positive");
    if ((sigma_y.array() <= 0.0).any() || (sigma_u.array() <= 0.0).any())
        throw std::invalid_argument("MheConfig: noise scales must be positive");
    if (max_iter < 1) throw std::invalid_argument("MheConfig: max_iter must be >= 1");
}

MeasurementBuffer::MeasurementBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("MeasurementBuffer: capacity must be >= 1");
}

void MeasurementBuffer::push(const ReducedState& y, const ControlInput& u) {
    data_.push_back({y, u});
    if (static_cast<int>(data_.size()) > capacity_) data_.pop_front();
}

namespace {

// Decision vector: [x_0 .. x_{M-1} (4 each) | u_0 .. u_{M-2} (2 each)].
int n_vars(int M) { return 4 * M + 2 * (M - 1); }

}  // namespace

MheResult solve_mhe(const MeasurementBuffer& buf, const MheConfig& cfg,
                    const VehicleParams& params, const Eigen::VectorXd* warm) {
    cfg.validate();
    if (buf.empty()) throw std::invalid_argument("solve_mhe: empty measurement buffer");

    const int M = buf.size();
    const int n = n_vars(M);
    const int off_u = 4 * M;
    const Eigen::Vector4d V = cfg.V();
    const Eigen::Vector2d W = cfg.W();

    NlpProblem p;
    p.n = n;
    p.n_res = 4 * M + 2 * (M - 1);
    p.residuals = [&buf, M, off_u, V, W](const Eigen::VectorXd& z, Eigen::VectorXd& r,
                                         Eigen::MatrixXd& J) {
        J.setZero();
        for (int i = 0; i < M; ++i) {
            const Eigen::Vector4d yi = buf[i].y.vec();
            for (int j = 0; j < 4; ++j) {
                r[4 * i + j] = V[j] * (yi[j] - z[4 * i + j]);
                J(4 * i + j, 4 * i + j) = -V[j];
            }
        }
        for (int i = 0; i < M - 1; ++i) {
            const Eigen::Vector2d ui = buf[i].u.vec();
            for (int j = 0; j < 2; ++j) {
                const int row = 4 * M + 2 * i + j;
                const int col = off_u + 2 * i + j;
                r[row] = W[j] * (ui[j] - z[col]);
                J(row, col) = -W[j];
            }
        }
    };

    if (M > 1) {
        p.n_eq = 4 * (M - 1);
        p.equality = [&params, &cfg, M, off_u](const Eigen::VectorXd& z, Eigen::VectorXd& c,
                                               Eigen::MatrixXd& J) {
            J.setZero();
            for (int i = 0; i < M - 1; ++i) {
                const ReducedState xi = ReducedState::from_vec(z.segment<4>(4 * i));
                const ControlInput ui = ControlInput::from_vec(z.segment<2>(off_u + 2 * i));
                Eigen::Matrix4d Ad;
                Eigen::Matrix<double, 4, 2> Bd;
                const Eigen::Vector4d xn = reduced_rk4_step_jac(xi, ui, params, cfg.Ts, Ad, Bd);
                c.segment<4>(4 * i) = z.segment<4>(4 * (i + 1)) - xn;
                J.block<4, 4>(4 * i, 4 * (i + 1)) = Eigen::Matrix4d::Identity();
                J.block<4, 4>(4 * i, 4 * i) = -Ad;
                J.block<4, 2>(4 * i, off_u + 2 * i) = -Bd;
            }
        };
    }

    constexpr double kInf = std::numeric_limits<double>::infinity();
    p.lower = Eigen::VectorXd::Constant(n, -kInf);
    p.upper = Eigen::VectorXd::Constant(n, kInf);
    for (int i = 0; i < M; ++i) p.lower[4 * i + 3] = 0.0;  // v >= 0
    for (int i = 0; i < M - 1; ++i) {
        p.lower[off_u + 2 * i] = -cfg.input_bounds.delta_max;
        p.upper[off_u + 2 * i] = cfg.input_bounds.delta_max;
        p.lower[off_u + 2 * i + 1] = cfg.input_bounds.D_min;
        p.upper[off_u + 2 * i + 1] = cfg.input_bounds.D_max;
    }

    Eigen::VectorXd z0;
    if (warm && warm->size() == n) {
        z0 = *warm;
    } else {
        z0.resize(n);
        for (int i = 0; i < M; ++i) z0.segment<4>(4 * i) = buf[i].y.vec();
        for (int i = 0; i < M - 1; ++i) z0.segment<2>(off_u + 2 * i) = buf[i].u.vec();
    }

    SolverOptions opts;
    opts.max_iter = cfg.max_iter;
    opts.kkt_tol = cfg.kkt_tol;
    SqpSolver solver(opts);
    const Solution sol = solver.solve(p, z0);

    MheResult res;
    res.window_states.reserve(M);
    for (int i = 0; i < M; ++i)
        res.window_states.push_back(ReducedState::from_vec(sol.z.segment<4>(4 * i)));
    res.window_inputs.reserve(M - 1);
    for (int i = 0; i < M - 1; ++i)
        res.window_inputs.push_back(ControlInput::from_vec(sol.z.segment<2>(off_u + 2 * i)));
    res.x_hat = res.window_states.back();
    res.degraded = sol.status != SolveStatus::Converged;
    res.cost = sol.cost_value;
    res.kkt_residual = sol.kkt_residual;
    res.iterations = sol.iterations;
    res.solve_time = sol.solve_time;
    return res;
}

MovingHorizonEstimator::MovingHorizonEstimator(MheConfig cfg, VehicleParams params)
    : cfg_(cfg), params_(params), buf_(cfg.Ne + 1) {
    cfg_.validate();
    params_.validate();
}

void MovingHorizonEstimator::push_measurement(const ReducedState& y, const ControlInput& u) {
    const bool evict = buf_.size() == buf_.capacity();
    buf_.push(y, u);
    if (evict && warm_window_ > 0) {
        // shift the previous solution so it stays aligned with the window
        const int M = warm_window_;
        const int off_u = 4 * M;
        Eigen::VectorXd shifted = warm_;
        shifted.segment(0, 4 * (M - 1)) = warm_.segment(4, 4 * (M - 1));
        if (M > 2)
            shifted.segment(off_u, 2 * (M - 2)) = warm_.segment(off_u + 2, 2 * (M - 2));
        // newest slots: propagate the previous terminal estimate with the
        // newest measured input
        ControlInput un = u;
        un.delta = std::clamp(un.delta, -cfg_.input_bounds.delta_max, cfg_.input_bounds.delta_max);
        un.D = std::clamp(un.D, cfg_.input_bounds.D_min, cfg_.input_bounds.D_max);
        const ReducedState prev_term = ReducedState::from_vec(warm_.segment<4>(4 * (M - 1)));
        shifted.segment<4>(4 * (M - 1)) = reduced_rk4_step(prev_term, un, params_, cfg_.Ts);
        if (M > 1) shifted.segment<2>(off_u + 2 * (M - 2)) = un.vec();
        warm_ = shifted;
    } else if (!evict && warm_window_ > 0) {
        // window grew: extend the previous solution with measurement-based slots
        const int Mp = warm_window_;
        const int M = buf_.size();
        Eigen::VectorXd ext(n_vars(M));
        ext.segment(0, 4 * Mp) = warm_.segment(0, 4 * Mp);
        for (int i = Mp; i < M; ++i) ext.segment<4>(4 * i) = buf_[i].y.vec();
        if (Mp > 1) ext.segment(4 * M, 2 * (Mp - 1)) = warm_.segment(4 * Mp, 2 * (Mp - 1));
        for (int i = Mp - 1; i < M - 1; ++i)
            ext.segment<2>(4 * M + 2 * i) = buf_[i].u.vec();
        warm_ = ext;
        warm_window_ = M;
    }
}

MheResult MovingHorizonEstimator::estimate() {
    const int M = buf_.size();
    const Eigen::VectorXd* warm =
        (warm_window_ == M && warm_.size() == n_vars(M)) ? &warm_ : nullptr;
    MheResult res = solve_mhe(buf_, cfg_, params_, warm);
    warm_.resize(n_vars(M));
    for (int i = 0; i < M; ++i) warm_.segment<4>(4 * i) = res.window_states[i].vec();
    for (int i = 0; i < M - 1; ++i)
        warm_.segment<2>(4 * M + 2 * i) = res.window_inputs[i].vec();
    warm_window_ = M;
    return res;
}

}  // namespace lmpc
