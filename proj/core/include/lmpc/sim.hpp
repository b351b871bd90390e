// Closed-loop experiment harness: full-model plant, measurement noise
// injection, moving-horizon estimation, NMPC tracking, lap accounting,
// between-lap GP training, trace/metrics export.

#pragma once

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmpc/control.hpp"
#include "lmpc/estimation.hpp"
#include "lmpc/learning.hpp"
#include "lmpc/planner.hpp"
#include "lmpc/track.hpp"

namespace lmpc {

struct NoiseSigmas {
    Eigen::Vector4d sigma_y{0.05, 0.05, 0.035, 0.1};  // X, Y, psi, v
    Eigen::Vector2d sigma_u{0.2, 0.035};              // delta, D

    void validate() const;  // throws std::invalid_argument on negative entries
};

// Seeded per-channel Gaussian streams (six independent engines), so each
// channel's sequence is reproducible regardless of the other channels'
// sigmas being zero or not.
class NoiseGenerator {
public:
    NoiseGenerator(unsigned seed, NoiseSigmas sigmas);

    // adds one draw of zero-mean noise per channel
    ReducedState measure_state(const ReducedState& y);
    ControlInput measure_input(const ControlInput& u);

private:
    NoiseSigmas sigmas_;
    std::array<std::mt19937_64, 6> eng_;
    std::normal_distribution<double> unit_{0.0, 1.0};
};

enum class ControllerKind { Mpc, LMpc };

struct SimConfig {
    NmpcConfig nmpc{};
    MheConfig mhe{};
    NoiseSigmas noise{};
    ControllerKind controller{ControllerKind::Mpc};
    int laps{2};
    unsigned seed{1};
    int plant_substeps{4};   // plant integrates at Ts / substeps
    int training_laps{1};    // l-mpc: baseline laps logged before GP training
    GpTrainOptions gp{};
    double max_lap_time{120.0};  // s, watchdog per lap
    // Race-line speed derating for closed-loop runs, in (0, 1]. The planned
    // speeds sit at the grip limit of the full model; the kinematic prediction
    // model has no lateral tire saturation, so tracking them verbatim drives
    // the plant off the track in tight corners. The planner output itself is
    // left at full speed.
    double speed_scale{0.75};

    // test modes
    bool reduced_plant{false};  // plant = reduced kinematic model
    bool use_mhe{true};         // false: estimate = measurement

    void validate() const;  // throws std::invalid_argument
};

struct SimStepRow {
    double t{0.0};
    FullState plant{};
    ReducedState measured{};
    ReducedState estimated{};
    ReducedState reference{};  // first reference point of the NMPC window
    double ref_theta{0.0};     // race-line arc length of that reference
    ControlInput commanded{};
    ControlInput measured_input{};
    double nmpc_time{0.0};  // s, NLP solve only
    double mhe_time{0.0};   // s
    int nmpc_degraded{0};
    int mhe_degraded{0};
    double contour_error{0.0};  // m, vs the track centerline
    double theta{0.0};          // m, unwrapped track progress
    int lap{0};                 // 0-based lap index
};

struct SimTrace {
    std::vector<SimStepRow> rows;
    double Ts{0.0};
    int laps_completed{0};
    bool aborted{false};
    std::string abort_reason;
};

// Runs the loop: plant integrates the full model under the last input, the
// measurements are noised, the MHE estimates, the NMPC commands. Laps are
// counted on centerline arc-length wrap. For ControllerKind::LMpc the first
// `training_laps` laps run the baseline controller while logging mismatch
// data; the GP is trained between laps and attached for the remainder.
// Leaving the track aborts the run with the partial trace flagged.
SimTrace run_closed_loop(const TrackGeometry& track, const RaceLine& raceline,
                         const SimConfig& cfg, const VehicleParams& params);

struct LapMetrics {
    int lap{0};  // -1 in the whole-run aggregate
    double rmse_total{0.0};
    double rmse_lateral{0.0};
    double rmse_longitudinal{0.0};
    double max_speed{0.0};
    double avg_speed{0.0};
    double lap_time{0.0};
    double distance{0.0};
    double nmpc_median{0.0}, nmpc_mean{0.0};
    double mhe_median{0.0}, mhe_mean{0.0};
};

struct Metrics {
    std::vector<LapMetrics> per_lap;
    LapMetrics total;
};

// Position RMSE of the plant against the time-indexed reference point,
// decomposed into lateral/longitudinal components along the race-line tangent
// (so total^2 = lateral^2 + longitudinal^2 row-wise); speed and solve-time
// statistics per lap and for the whole run.
Metrics compute_metrics(const SimTrace& trace, const RaceLine& raceline);

// Fixed-column CSV; numbers round trip bitwise through import.
void export_trace(const SimTrace& trace, const std::string& path);
SimTrace import_trace(const std::string& path);

// Flat key=value text, one metric per line; round trips through import.
void export_metrics(const Metrics& m, const std::string& path);
Metrics import_metrics(const std::string& path);

}  // namespace lmpc
