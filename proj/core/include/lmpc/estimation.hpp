// Moving-horizon estimator: reconstructs the reduced state from a sliding
// window of noisy full-state and input measurements by fitting a
// model-consistent trajectory (least squares in V/W-weighted residuals).

#pragma once

#include <deque>
#include <vector>

#include <Eigen/Dense>

#include "lmpc/dynamics.hpp"
#include "lmpc/nlp.hpp"

namespace lmpc {

struct MheConfig {
    int Ne{6};           // window length (Ne transitions, Ne+1 samples)
    double Ts{0.033};    // s

    // per-channel noise scales; the weights are their elementwise inverses
    Eigen::Vector4d sigma_y{0.05, 0.05, 0.035, 0.1};
    Eigen::Vector2d sigma_u{0.2, 0.035};

    InputBounds input_bounds{};
    int max_iter{15};      // SQP cap; on hit the best iterate is returned degraded
    double kkt_tol{1e-3};  // stationarity tolerance; gradients scale like 1/sigma^2

    Eigen::Vector4d V() const { return sigma_y.cwiseInverse(); }
    Eigen::Vector2d W() const { return sigma_u.cwiseInverse(); }

    void validate() const;  // throws std::invalid_argument
};

struct Measurement {
    ReducedState y;  // measured state
    ControlInput u;  // measured input applied at that step
};

// Chronological ring buffer of at most capacity (= Ne+1) measurement pairs.
class MeasurementBuffer {
public:
    explicit MeasurementBuffer(int capacity);

    void push(const ReducedState& y, const ControlInput& u);
    void clear() { data_.clear(); }

    int size() const { return static_cast<int>(data_.size()); }
    int capacity() const { return capacity_; }
    bool empty() const { return data_.empty(); }
    const Measurement& operator[](int i) const { return data_[static_cast<size_t>(i)]; }

private:
    int capacity_;
    std::deque<Measurement> data_;
};

struct MheResult {
    ReducedState x_hat;                      // terminal window state
    std::vector<ReducedState> window_states;
    std::vector<ControlInput> window_inputs;  // de-noised inputs, size-1 of states
    bool degraded{false};
    double cost{0.0};
    double kkt_residual{0.0};
    int iterations{0};
    double solve_time{0.0};  // seconds
};

class MovingHorizonEstimator {
public:
    MovingHorizonEstimator(MheConfig cfg, VehicleParams params);

    // Appends a measurement pair; evicts the oldest beyond Ne+1.
    void push_measurement(const ReducedState& y, const ControlInput& u);

    // Solves the window NLP (partial window before Ne+1 samples are in),
    // warm-started from the previous solution shifted by one step.
    MheResult estimate();

    const MeasurementBuffer& buffer() const { return buf_; }
    const MheConfig& config() const { return cfg_; }

private:
    MheConfig cfg_;
    VehicleParams params_;
    MeasurementBuffer buf_;
    Eigen::VectorXd warm_;  // previous decision vector (for the previous window size)
    int warm_window_{0};
};

// Stateless single-shot solve over an explicit buffer (the class wraps this
// with warm-start bookkeeping).
MheResult solve_mhe(const MeasurementBuffer& buf, const MheConfig& cfg,
                    const VehicleParams& params, const Eigen::VectorXd* warm = nullptr);

}  // namespace lmpc
