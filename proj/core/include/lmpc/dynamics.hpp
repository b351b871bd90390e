// Vehicle models: full dynamic bicycle model with Pacejka tires and DC-motor
// drivetrain, plus the reduced kinematic model used by the controller and
// estimator. All functions are pure; state structs are plain aggregates.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>

namespace lmpc {

// Plant state [X, Y, psi, vx, vy, omega]. psi is stored unwrapped.
struct FullState {
    double X{0.0};      // global position, m
    double Y{0.0};      // global position, m
    double psi{0.0};    // heading, rad (continuous, not clamped to [-pi, pi])
    double vx{0.0};     // body-frame longitudinal speed, m/s
    double vy{0.0};     // body-frame lateral speed, m/s
    double omega{0.0};  // yaw rate, rad/s

    Eigen::Matrix<double, 6, 1> vec() const {
        return (Eigen::Matrix<double, 6, 1>() << X, Y, psi, vx, vy, omega).finished();
    }
    static FullState from_vec(const Eigen::Matrix<double, 6, 1>& v) {
        return {v[0], v[1], v[2], v[3], v[4], v[5]};
    }
};

// Controller/estimator state [X, Y, psi, v].
struct ReducedState {
    double X{0.0};
    double Y{0.0};
    double psi{0.0};
    double v{0.0};  // speed, m/s, >= 0

    Eigen::Vector4d vec() const { return {X, Y, psi, v}; }
    static ReducedState from_vec(const Eigen::Vector4d& v) {
        return {v[0], v[1], v[2], v[3]};
    }
};

// u = [delta, D]: front steering angle (rad) and motor duty cycle.
struct ControlInput {
    double delta{0.0};
    double D{0.0};

    Eigen::Vector2d vec() const { return {delta, D}; }
    static ControlInput from_vec(const Eigen::Vector2d& v) { return {v[0], v[1]}; }
};

struct VehicleParams {
    double m{1.98};     // kg
    double Iz{0.1217};  // kg m^2
    double lf{0.125};   // m, CG to front axle
    double lr{0.125};   // m, CG to rear axle

    // Pacejka lateral-force coefficients, front/rear
    double Bf{29.5};
    double Cf{0.087};
    double Df{42.53};
    double Br{26.97};
    double Cr{0.163};
    double Dr{161.59};

    // drivetrain / resistance (specific-force units, m/s^2 scale)
    double Cm1{12.0};
    double Cm2{2.17};
    double Cr1{0.6};  // rolling resistance constant
    double Cr2{0.1};  // aerodynamic drag coefficient

    double g1() const { return lr / (lr + lf); }
    double g2() const { return 1.0 / (lr + lf); }

    void validate() const;  // throws std::invalid_argument on bad values
};

// Low-speed guard used wherever the tire model divides by vx.
inline constexpr double kSpeedGuard = 0.05;  // m/s

// Actuator box: |delta| <= pi/6 rad, D in [-1, 1].
struct InputBounds {
    double delta_max{0.5235987755982988};  // pi/6
    double D_min{-1.0};
    double D_max{1.0};

    bool contains(const ControlInput& u, double tol = 0.0) const {
        return std::abs(u.delta) <= delta_max + tol && u.D >= D_min - tol &&
               u.D <= D_max + tol;
    }
};

struct SlipAngles {
    double alpha_f{0.0};
    double alpha_r{0.0};
};

struct TireForces {
    double Fyf{0.0};  // N
    double Fyr{0.0};  // N
};

// Front/rear side-slip angles. vx below the guard is replaced by
// sign(vx)*kSpeedGuard; non-finite inputs throw std::domain_error.
SlipAngles slip_angles(const FullState& s, double delta, const VehicleParams& p);

// Pacejka lateral forces Fy = D sin(C atan(B alpha)).
TireForces tire_lateral_forces(double alpha_f, double alpha_r, const VehicleParams& p);

// Rear drivetrain force as a specific force (m/s^2): motor minus rolling
// resistance and drag. Multiply by m where a Newton force is needed.
double longitudinal_force(double vx, double D, const VehicleParams& p);

// Six ODEs of the dynamic bicycle model, returned as d(state)/dt.
Eigen::Matrix<double, 6, 1> full_dynamics(const FullState& s, const ControlInput& u,
                                          const VehicleParams& p);

// Four ODEs of the slip-free kinematic model.
Eigen::Vector4d reduced_dynamics(const ReducedState& s, const ControlInput& u,
                                 const VehicleParams& p);

// Analytic Jacobians d f/d x and d f/d u of the continuous-time models.
void full_dynamics_jacobian(const FullState& s, const ControlInput& u,
                            const VehicleParams& p,
                            Eigen::Matrix<double, 6, 6>& A,
                            Eigen::Matrix<double, 6, 2>& B);
void reduced_dynamics_jacobian(const ReducedState& s, const ControlInput& u,
                               const VehicleParams& p,
                               Eigen::Matrix<double, 4, 4>& A,
                               Eigen::Matrix<double, 4, 2>& B);

// Projection onto the reduced state: v = sqrt(vx^2 + vy^2).
ReducedState reduce_state(const FullState& s);

// One classical RK4 step with zero-order-hold input. f maps (x, u) -> xdot.
// Throws std::runtime_error if the result is non-finite.
using OdeFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&, const ControlInput&)>;
Eigen::VectorXd rk4_step(const OdeFn& f, const Eigen::VectorXd& x, const ControlInput& u,
                         double Ts);

// RK4 step of the reduced model together with its discrete-time Jacobians
// dx+/dx (4x4) and dx+/du (4x2), chained analytically through the stages.
Eigen::Vector4d reduced_rk4_step(const ReducedState& s, const ControlInput& u,
                                 const VehicleParams& p, double Ts);
Eigen::Vector4d reduced_rk4_step_jac(const ReducedState& s, const ControlInput& u,
                                     const VehicleParams& p, double Ts,
                                     Eigen::Matrix4d& Ad, Eigen::Matrix<double, 4, 2>& Bd);

// Same for the full model (used by the planner transcription).
Eigen::Matrix<double, 6, 1> full_rk4_step(const FullState& s, const ControlInput& u,
                                          const VehicleParams& p, double Ts);
Eigen::Matrix<double, 6, 1> full_rk4_step_jac(const FullState& s, const ControlInput& u,
                                              const VehicleParams& p, double Ts,
                                              Eigen::Matrix<double, 6, 6>& Ad,
                                              Eigen::Matrix<double, 6, 2>& Bd);

}  // namespace lmpc
