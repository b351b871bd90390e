// Offline race-line generation: windowed contouring optimization over the
// full dynamic model, trading boundary-respecting contour error against
// progress along the track, stitched over a full lap.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmpc/dynamics.hpp"
#include "lmpc/spline.hpp"
#include "lmpc/track.hpp"

namespace lmpc {

struct PlannerConfig {
    int Np{65};         // window horizon
    double Ts{0.033};   // s
    double q{0.025};    // contour-error weight
    double r{1.25};     // terminal-progress weight
    double margin{0.05};  // m, kept clear of the boundary
    InputBounds input_bounds{};
    double vy_max{2.0};      // m/s, sanity box on lateral speed
    double omega_max{8.0};   // rad/s, sanity box on yaw rate
    // max deviation of the body heading from the track direction, rad; rules
    // out locally-optimal "spin in place" solutions
    double psi_dev_max{1.2};
    double lag_weight{0.5};  // keeps theta synchronized with physical progress
    double kkt_tol{1e-5};
    int max_iter{80};

    void validate() const;  // throws std::invalid_argument
};

struct RaceLineSample {
    double theta{0.0};  // m, track arc length
    double X{0.0};
    double Y{0.0};
    double psi{0.0};  // rad, unwrapped along the lap
    double v{0.0};    // m/s
};

struct RaceLine {
    std::vector<RaceLineSample> samples;  // ordered by theta
    double lap_length{0.0};               // m (track centerline length)
    double lap_time{0.0};                 // s, predicted

    bool empty() const { return samples.empty(); }
};

// Periodic spline interpolation of a race line over theta, plus projection of
// a position onto the line. Used by the controller's reference generator.
class RaceLineLookup {
public:
    explicit RaceLineLookup(const RaceLine& rl);

    double lap_length() const { return L_; }
    double wrap(double theta) const;
    Eigen::Vector2d position(double theta) const;
    double heading(double theta) const;  // unwrapped branch consistent with samples
    double speed(double theta) const;

    // theta of the nearest race-line point; local search around the hint when
    // given, coarse global grid otherwise.
    double project(double X, double Y, std::optional<double> hint = std::nullopt) const;

private:
    double L_{0.0};
    CubicSpline1D x_, y_, psi_, v_;
};

// Stitched step-by-step trajectory backing a planned race line: states[k+1] is
// exactly the full-model RK4 step of states[k] under inputs[k].
struct PlannedTrajectory {
    std::vector<Eigen::Matrix<double, 6, 1>> states;  // size n+1
    std::vector<Eigen::Vector2d> inputs;              // size n, (delta, D)
    std::vector<double> thetas;                       // size n+1, unwrapped
    double Ts{0.0};
};

// Windowed planning over the full model. Decision variables per stage:
// full state, input, and progress theta; windows of Np stages are advanced by
// Np/2 and stitched until the lap closes. Each window is realized by rolling
// the model with the optimized inputs, so the returned line is dynamically
// exact. Throws std::runtime_error with the stuck theta when a window cannot
// be solved even after contour-weight escalation.
RaceLine plan_raceline(const TrackGeometry& track, const VehicleParams& params,
                       const PlannerConfig& cfg, PlannedTrajectory* debug = nullptr);

// Cubic re-interpolation of all channels onto a uniform theta grid.
RaceLine resample_raceline(const RaceLine& rl, double d_theta);

// CSV with header "theta,x,y,psi,v"; round trips bitwise.
RaceLine load_raceline_csv(const std::string& path);
void save_raceline_csv(const RaceLine& rl, const std::string& path);

}  // namespace lmpc
