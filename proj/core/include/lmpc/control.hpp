// Real-time NMPC tracker over the reduced kinematic model: receding-horizon
// least-squares tracking of the race line with input, input-rate, and track
// boundary constraints, plus an optional learned per-stage model correction.

#pragma once

#include <array>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "lmpc/dynamics.hpp"
#include "lmpc/learning.hpp"
#include "lmpc/nlp.hpp"
#include "lmpc/planner.hpp"
#include "lmpc/track.hpp"

namespace lmpc {

struct NmpcConfig {
    int N{16};          // prediction horizon, steps
    double Ts{0.033};   // s
    Eigen::Vector4d Q{0.015, 0.015, 0.0, 0.0};  // state weight diagonal (X, Y, psi, v)
    Eigen::Vector2d R{0.003, 0.0025};           // input-rate weight diagonal
    // terminal weight diagonal; tracking the last reference point
    Eigen::Vector4d P{0.15, 0.15, 0.0, 0.0};
    InputBounds input_bounds{};
    double ddelta_max{0.12};  // rad per step
    double dD_max{0.2};       // duty per step
    double margin{0.0};       // m, extra clearance inside the track boundary
    // reference advance floor: keeps the window moving when the planned speed
    // is tiny or the estimate sits behind the line
    double v_ref_min{0.3};  // m/s
    double kkt_tol{1e-6};
    int max_iter{30};

    void validate() const;  // throws std::invalid_argument
};

// Targets r_1..r_N on the race line and their arc lengths, plus the terminal
// anchor one planned step past r_N (the terminal stage is dynamically one
// step beyond the last weighted stage).
struct ReferenceWindow {
    std::vector<ReducedState> points;  // size N
    std::vector<double> thetas;        // size N, wrapped to [0, L)
    ReducedState terminal{};
    double theta_terminal{0.0};
};

// Mutable per-vehicle controller memory carried between steps.
struct ControllerState {
    ControlInput u_prev{};            // last applied input
    Eigen::VectorXd warm;             // previous solution, shifted (empty = cold start)
    std::optional<double> theta_hint; // projection hint onto the race line
};

struct NmpcDiagnostics {
    double cost{0.0};
    double kkt_residual{0.0};
    int iterations{0};
    double solve_time{0.0};  // s
    SolveStatus status{SolveStatus::MaxIter};
    bool degraded{false};  // solver cap hit; input comes from the best iterate
    double theta{0.0};     // race-line arc length of the projection, wrapped
    ReducedState reference{};  // first reference point of the window
    double ref_theta{0.0};
};

// Samples the reference window: theta_0 is the projection of the estimate onto
// the race line (with the stored hint), and theta advances by the planned
// speed (floored at v_ref_min) times Ts per stage. Updates the hint in cs.
ReferenceWindow build_reference(const RaceLineLookup& lut, const ReducedState& xhat,
                                ControllerState& cs, const NmpcConfig& cfg);

// Learned per-stage dynamics correction, linearized around a frozen
// trajectory point: corr(x, u) = c0 + Jx (x - x_lin) + Ju (u - u_lin).
// Without the Jacobians a constant offset lets the optimizer keep the
// nominal model's input sensitivities and exploit them where the learned
// mismatch says otherwise (e.g. compensating a yaw-rate deficit with more
// speed); the linearization makes the corrected sensitivities visible.
struct StageCorrection {
    Eigen::Vector4d c0{Eigen::Vector4d::Zero()};
    Eigen::Matrix4d Jx{Eigen::Matrix4d::Zero()};
    Eigen::Matrix<double, 4, 2> Ju{Eigen::Matrix<double, 4, 2>::Zero()};
    Eigen::Vector4d x_lin{Eigen::Vector4d::Zero()};
    Eigen::Vector2d u_lin{Eigen::Vector2d::Zero()};
};

// Multiple-shooting transcription of the tracking problem.
// Decision vector z = [x_1..x_{N+1} | du_0..du_{N-1}], with u_k the cumulative
// sum of du over the previous input; the terminal stage holds u_{N-1}.
// Stage costs ||x_k - r_k||_Q^2 + ||du_k||_R^2, terminal ||x_{N+1} - r_N||_P^2;
// RK4 dynamics equalities; input bounds as linear inequalities on the
// cumulative sums; rate bounds as boxes; v >= 0; lateral containment
// |e(x_k)| <= half_width - margin anchored at the reference arc lengths.
// `correction` (optional, size N+1) adds a linearized per-stage offset to the
// discrete dynamics, used for the learned model mismatch.
NlpProblem build_ocp(const ReducedState& xhat, const ReferenceWindow& ref,
                     const ControllerState& cs, const NmpcConfig& cfg,
                     const VehicleParams& params, const TrackGeometry& track,
                     const std::vector<StageCorrection>* correction = nullptr);

// Convenience overload: constant per-stage offsets (zero Jacobians).
NlpProblem build_ocp(const ReducedState& xhat, const ReferenceWindow& ref,
                     const ControllerState& cs, const NmpcConfig& cfg,
                     const VehicleParams& params, const TrackGeometry& track,
                     const std::vector<Eigen::Vector4d>& offsets);

// Cold-start iterate for build_ocp's layout: states pinned at xhat, du = 0.
Eigen::VectorXd cold_start(const ReducedState& xhat, const NmpcConfig& cfg);

// GP posterior means of the four mismatch channels along a frozen trajectory;
// entry k corresponds to the step from stage k. Throws std::invalid_argument
// when any model is untrained.
std::vector<Eigen::Vector4d> evaluate_correction(const std::array<GpModel, 4>& gp,
                                                 const std::vector<ReducedState>& states,
                                                 const std::vector<ControlInput>& inputs);

// Same stages, with the posterior-mean Jacobians for the linearized form.
std::vector<StageCorrection> evaluate_correction_linearized(
    const std::array<GpModel, 4>& gp, const std::vector<ReducedState>& states,
    const std::vector<ControlInput>& inputs);

// Tracker facade owning the race-line lookup, the track geometry, and the
// controller memory. step() applies the first optimal input-rate move.
class NmpcController {
public:
    NmpcController(const RaceLine& rl, const TrackGeometry& track, NmpcConfig cfg,
                   VehicleParams params);

    // Attaches the learned correction (all four channels must be trained).
    void attach_correction(std::array<GpModel, 4> gp);
    void clear_correction();
    bool corrected() const { return gp_.has_value(); }

    // One receding-horizon step from the state estimate.
    ControlInput step(const ReducedState& xhat, NmpcDiagnostics* diag = nullptr);

    void reset();  // drops warm start, hint, and last input

    const ControllerState& state() const { return cs_; }
    const NmpcConfig& config() const { return cfg_; }
    const RaceLineLookup& raceline() const { return lut_; }

private:
    RaceLineLookup lut_;
    TrackGeometry track_;
    NmpcConfig cfg_;
    VehicleParams params_;
    ControllerState cs_;
    std::optional<std::array<GpModel, 4>> gp_;
};

}  // namespace lmpc
