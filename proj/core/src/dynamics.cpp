#include "lmpc/dynamics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lmpc {

namespace {

double guarded_vx(double vx) {
    const double s = (vx < 0.0) ? -1.0 : 1.0;
    return s * std::max(std::abs(vx), kSpeedGuard);
}

void require_finite(double v, const char* name) {
    if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "non-finite input '" << name << "' = " << v;
        throw std::domain_error(os.str());
    }
}

}  // namespace

void VehicleParams::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            std::ostringstream os;
            os << "VehicleParams." << name << " must be positive, got " << v;
            throw std::invalid_argument(os.str());
        }
    };
    positive(m, "m");
    positive(Iz, "Iz");
    positive(lf, "lf");
    positive(lr, "lr");
    positive(Bf, "Bf");
    positive(Cf, "Cf");
    positive(Df, "Df");
    positive(Br, "Br");
    positive(Cr, "Cr");
    positive(Dr, "Dr");
}

SlipAngles slip_angles(const FullState& s, double delta, const VehicleParams& p) {
    require_finite(s.vx, "vx");
    require_finite(s.vy, "vy");
    require_finite(s.omega, "omega");
    require_finite(delta, "delta");
    const double vg = guarded_vx(s.vx);
    SlipAngles a;
    a.alpha_f = delta - std::atan((s.vy + p.lf * s.omega) / vg);
    a.alpha_r = std::atan((p.lr * s.omega - s.vy) / vg);
    return a;
}

TireForces tire_lateral_forces(double alpha_f, double alpha_r, const VehicleParams& p) {
    TireForces f;
    f.Fyf = p.Df * std::sin(p.Cf * std::atan(p.Bf * alpha_f));
    f.Fyr = p.Dr * std::sin(p.Cr * std::atan(p.Br * alpha_r));
    return f;
}

double longitudinal_force(double vx, double D, const VehicleParams& p) {
    return (p.Cm1 - p.Cm2 * vx) * D - p.Cr1 - p.Cr2 * vx * vx;
}

Eigen::Matrix<double, 6, 1> full_dynamics(const FullState& s, const ControlInput& u,
                                          const VehicleParams& p) {
    const SlipAngles a = slip_angles(s, u.delta, p);
    const TireForces fy = tire_lateral_forces(a.alpha_f, a.alpha_r, p);
    const double fxr = longitudinal_force(s.vx, u.D, p);  // specific force

    const double cd = std::cos(u.delta);
    const double sd = std::sin(u.delta);
    const double cp = std::cos(s.psi);
    const double sp = std::sin(s.psi);

    Eigen::Matrix<double, 6, 1> dx;
    dx[0] = s.vx * cp - s.vy * sp;
    dx[1] = s.vx * sp + s.vy * cp;
    dx[2] = s.omega;
    dx[3] = fxr - (fy.Fyf * sd) / p.m + s.vy * s.omega;
    dx[4] = (fy.Fyr + fy.Fyf * cd) / p.m - s.vx * s.omega;
    dx[5] = (fy.Fyf * p.lf * cd - fy.Fyr * p.lr) / p.Iz;

    // standstill clamp: rolling resistance must not drive the car backwards
    if (s.vx <= 0.0 && dx[3] < 0.0) dx[3] = 0.0;
    return dx;
}

Eigen::Vector4d reduced_dynamics(const ReducedState& s, const ControlInput& u,
                                 const VehicleParams& p) {
    const double g1 = p.g1();
    const double g2 = p.g2();
    const double beta = s.psi + g1 * u.delta;

    Eigen::Vector4d dx;
    dx[0] = s.v * std::cos(beta);
    dx[1] = s.v * std::sin(beta);
    dx[2] = s.v * u.delta * g2;
    dx[3] = (p.Cm1 - p.Cm2 * s.v) * u.D - p.Cr2 * s.v * s.v - p.Cr1 -
            (s.v * u.delta) * (s.v * u.delta) * g1 * g1 * g2;

    if (s.v <= 0.0 && dx[3] < 0.0) dx[3] = 0.0;
    return dx;
}

void full_dynamics_jacobian(const FullState& s, const ControlInput& u,
                            const VehicleParams& p,
                            Eigen::Matrix<double, 6, 6>& A,
                            Eigen::Matrix<double, 6, 2>& B) {
    const double vg = guarded_vx(s.vx);
    const double dvg = (std::abs(s.vx) > kSpeedGuard) ? 1.0 : 0.0;

    // slip angles and their partials
    const double pf = (s.vy + p.lf * s.omega) / vg;
    const double qr = (p.lr * s.omega - s.vy) / vg;
    const double wf = 1.0 / (1.0 + pf * pf);
    const double wr = 1.0 / (1.0 + qr * qr);
    const double alpha_f = u.delta - std::atan(pf);
    const double alpha_r = std::atan(qr);

    // d alpha / d (vx, vy, omega, delta)
    const double daf_dvx = wf * pf * dvg / vg;
    const double daf_dvy = -wf / vg;
    const double daf_dw = -wf * p.lf / vg;
    const double daf_dd = 1.0;
    const double dar_dvx = -wr * qr * dvg / vg;
    const double dar_dvy = -wr / vg;
    const double dar_dw = wr * p.lr / vg;

    // tire forces and slopes dFy/dalpha
    const double tf = std::atan(p.Bf * alpha_f);
    const double tr = std::atan(p.Br * alpha_r);
    const double Fyf = p.Df * std::sin(p.Cf * tf);
    const double Fyr = p.Dr * std::sin(p.Cr * tr);
    const double dFyf = p.Df * std::cos(p.Cf * tf) * p.Cf * p.Bf / (1.0 + p.Bf * p.Bf * alpha_f * alpha_f);
    const double dFyr = p.Dr * std::cos(p.Cr * tr) * p.Cr * p.Br / (1.0 + p.Br * p.Br * alpha_r * alpha_r);

    const double cd = std::cos(u.delta);
    const double sd = std::sin(u.delta);
    const double cp = std::cos(s.psi);
    const double sp = std::sin(s.psi);

    A.setZero();
    B.setZero();

    // dX/dt = vx cos(psi) - vy sin(psi)
    A(0, 2) = -s.vx * sp - s.vy * cp;
    A(0, 3) = cp;
    A(0, 4) = -sp;
    // dY/dt = vx sin(psi) + vy cos(psi)
    A(1, 2) = s.vx * cp - s.vy * sp;
    A(1, 3) = sp;
    A(1, 4) = cp;
    // dpsi/dt = omega
    A(2, 5) = 1.0;

    // dvx/dt = Fxr - Fyf sin(delta)/m + vy omega
    const double dfxr_dvx = -p.Cm2 * u.D - 2.0 * p.Cr2 * s.vx;
    A(3, 3) = dfxr_dvx - (dFyf * daf_dvx) * sd / p.m;
    A(3, 4) = -(dFyf * daf_dvy) * sd / p.m + s.omega;
    A(3, 5) = -(dFyf * daf_dw) * sd / p.m + s.vy;
    B(3, 0) = -(dFyf * daf_dd * sd + Fyf * cd) / p.m;
    B(3, 1) = p.Cm1 - p.Cm2 * s.vx;

    // dvy/dt = (Fyr + Fyf cos(delta))/m - vx omega
    A(4, 3) = (dFyr * dar_dvx + dFyf * daf_dvx * cd) / p.m - s.omega;
    A(4, 4) = (dFyr * dar_dvy + dFyf * daf_dvy * cd) / p.m;
    A(4, 5) = (dFyr * dar_dw + dFyf * daf_dw * cd) / p.m - s.vx;
    B(4, 0) = (dFyf * daf_dd * cd - Fyf * sd) / p.m;

    // domega/dt = (Fyf lf cos(delta) - Fyr lr)/Iz
    A(5, 3) = (dFyf * daf_dvx * p.lf * cd - dFyr * dar_dvx * p.lr) / p.Iz;
    A(5, 4) = (dFyf * daf_dvy * p.lf * cd - dFyr * dar_dvy * p.lr) / p.Iz;
    A(5, 5) = (dFyf * daf_dw * p.lf * cd - dFyr * dar_dw * p.lr) / p.Iz;
    B(5, 0) = (p.lf * (dFyf * daf_dd * cd - Fyf * sd)) / p.Iz;
}

void reduced_dynamics_jacobian(const ReducedState& s, const ControlInput& u,
                               const VehicleParams& p,
                               Eigen::Matrix<double, 4, 4>& A,
                               Eigen::Matrix<double, 4, 2>& B) {
    const double g1 = p.g1();
    const double g2 = p.g2();
    const double beta = s.psi + g1 * u.delta;
    const double cb = std::cos(beta);
    const double sb = std::sin(beta);

    A.setZero();
    B.setZero();

    A(0, 2) = -s.v * sb;
    A(0, 3) = cb;
    A(1, 2) = s.v * cb;
    A(1, 3) = sb;
    A(2, 3) = u.delta * g2;
    A(3, 3) = -p.Cm2 * u.D - 2.0 * p.Cr2 * s.v - 2.0 * s.v * u.delta * u.delta * g1 * g1 * g2;

    B(0, 0) = -s.v * g1 * sb;
    B(1, 0) = s.v * g1 * cb;
    B(2, 0) = s.v * g2;
    B(3, 0) = -2.0 * s.v * s.v * u.delta * g1 * g1 * g2;
    B(3, 1) = p.Cm1 - p.Cm2 * s.v;
}

ReducedState reduce_state(const FullState& s) {
    return {s.X, s.Y, s.psi, std::hypot(s.vx, s.vy)};
}

Eigen::VectorXd rk4_step(const OdeFn& f, const Eigen::VectorXd& x, const ControlInput& u,
                         double Ts) {
    if (!(Ts > 0.0)) throw std::invalid_argument("rk4_step: Ts must be positive");
    const Eigen::VectorXd k1 = f(x, u);
    const Eigen::VectorXd k2 = f(x + 0.5 * Ts * k1, u);
    const Eigen::VectorXd k3 = f(x + 0.5 * Ts * k2, u);
    const Eigen::VectorXd k4 = f(x + Ts * k3, u);
    Eigen::VectorXd out = x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!out.allFinite()) throw std::runtime_error("rk4_step: non-finite result");
    return out;
}

namespace {

// RK4 step with discrete Jacobians, chained through the four stages.
template <int N>
Eigen::Matrix<double, N, 1> rk4_step_jac_impl(
    const Eigen::Matrix<double, N, 1>& x, const ControlInput& u, double Ts,
    const std::function<Eigen::Matrix<double, N, 1>(const Eigen::Matrix<double, N, 1>&)>& f,
    const std::function<void(const Eigen::Matrix<double, N, 1>&, Eigen::Matrix<double, N, N>&,
                             Eigen::Matrix<double, N, 2>&)>& jac,
    Eigen::Matrix<double, N, N>& Ad, Eigen::Matrix<double, N, 2>& Bd) {
    using MatN = Eigen::Matrix<double, N, N>;
    using MatN2 = Eigen::Matrix<double, N, 2>;
    using VecN = Eigen::Matrix<double, N, 1>;

    MatN A;
    MatN2 B;
    const MatN I = MatN::Identity();

    const VecN k1 = f(x);
    jac(x, A, B);
    MatN dk1x = A;
    MatN2 dk1u = B;

    const VecN x2 = x + 0.5 * Ts * k1;
    const VecN k2 = f(x2);
    jac(x2, A, B);
    MatN dk2x = A * (I + 0.5 * Ts * dk1x);
    MatN2 dk2u = A * (0.5 * Ts * dk1u) + B;

    const VecN x3 = x + 0.5 * Ts * k2;
    const VecN k3 = f(x3);
    jac(x3, A, B);
    MatN dk3x = A * (I + 0.5 * Ts * dk2x);
    MatN2 dk3u = A * (0.5 * Ts * dk2u) + B;

    const VecN x4 = x + Ts * k3;
    const VecN k4 = f(x4);
    jac(x4, A, B);
    MatN dk4x = A * (I + Ts * dk3x);
    MatN2 dk4u = A * (Ts * dk3u) + B;

    Ad = I + (Ts / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x);
    Bd = (Ts / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u);
    return x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

Eigen::Vector4d reduced_rk4_step(const ReducedState& s, const ControlInput& u,
                                 const VehicleParams& p, double Ts) {
    const Eigen::Vector4d k1 = reduced_dynamics(s, u, p);
    const Eigen::Vector4d k2 = reduced_dynamics(ReducedState::from_vec(s.vec() + 0.5 * Ts * k1), u, p);
    const Eigen::Vector4d k3 = reduced_dynamics(ReducedState::from_vec(s.vec() + 0.5 * Ts * k2), u, p);
    const Eigen::Vector4d k4 = reduced_dynamics(ReducedState::from_vec(s.vec() + Ts * k3), u, p);
    return s.vec() + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Eigen::Vector4d reduced_rk4_step_jac(const ReducedState& s, const ControlInput& u,
                                     const VehicleParams& p, double Ts,
                                     Eigen::Matrix4d& Ad, Eigen::Matrix<double, 4, 2>& Bd) {
    auto f = [&](const Eigen::Vector4d& x) {
        return reduced_dynamics(ReducedState::from_vec(x), u, p);
    };
    auto jac = [&](const Eigen::Vector4d& x, Eigen::Matrix4d& A, Eigen::Matrix<double, 4, 2>& B) {
        reduced_dynamics_jacobian(ReducedState::from_vec(x), u, p, A, B);
    };
    return rk4_step_jac_impl<4>(s.vec(), u, Ts, f, jac, Ad, Bd);
}

Eigen::Matrix<double, 6, 1> full_rk4_step(const FullState& s, const ControlInput& u,
                                          const VehicleParams& p, double Ts) {
    using V6 = Eigen::Matrix<double, 6, 1>;
    const V6 k1 = full_dynamics(s, u, p);
    const V6 k2 = full_dynamics(FullState::from_vec(s.vec() + 0.5 * Ts * k1), u, p);
    const V6 k3 = full_dynamics(FullState::from_vec(s.vec() + 0.5 * Ts * k2), u, p);
    const V6 k4 = full_dynamics(FullState::from_vec(s.vec() + Ts * k3), u, p);
    return s.vec() + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Eigen::Matrix<double, 6, 1> full_rk4_step_jac(const FullState& s, const ControlInput& u,
                                              const VehicleParams& p, double Ts,
                                              Eigen::Matrix<double, 6, 6>& Ad,
                                              Eigen::Matrix<double, 6, 2>& Bd) {
    using V6 = Eigen::Matrix<double, 6, 1>;
    auto f = [&](const V6& x) { return full_dynamics(FullState::from_vec(x), u, p); };
    auto jac = [&](const V6& x, Eigen::Matrix<double, 6, 6>& A, Eigen::Matrix<double, 6, 2>& B) {
        full_dynamics_jacobian(FullState::from_vec(x), u, p, A, B);
    };
    return rk4_step_jac_impl<6>(s.vec(), u, Ts, f, jac, Ad, Bd);
}

}  // namespace lmpc
