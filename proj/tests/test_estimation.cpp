#include <doctest.h>

#include <cmath>
#include <random>

#include "lmpc/estimation.hpp"

using namespace lmpc;

namespace {

// open-loop reduced-model rollout under a mildly exciting input sequence
struct Rollout {
    std::vector<ReducedState> x;
    std::vector<ControlInput> u;
};

Rollout make_rollout(int steps, double Ts, const VehicleParams& p) {
    Rollout r;
    ReducedState s{0.0, 0.0, 0.1, 1.5};
    r.x.push_back(s);
    for (int k = 0; k < steps; ++k) {
        ControlInput in{0.25 * std::sin(0.13 * k), 0.5 + 0.3 * std::cos(0.07 * k)};
        r.u.push_back(in);
        s = ReducedState::from_vec(reduced_rk4_step(s, in, p, Ts));
        r.x.push_back(s);
    }
    return r;
}

}  // namespace

TEST_CASE("measurement buffer") {
    MeasurementBuffer buf(7);  // Ne = 6

    SUBCASE("push into empty buffer") {
        buf.push({}, {});
        CHECK(buf.size() == 1);
    }
    SUBCASE("overflow drops the oldest") {
        for (int i = 0; i < 9; ++i) buf.push({double(i), 0, 0, 0}, {});
        CHECK(buf.size() == 7);
        CHECK(buf[0].y.X == doctest::Approx(2.0));
        CHECK(buf[6].y.X == doctest::Approx(8.0));
    }
    SUBCASE("ordering preserved") {
        for (int i = 0; i < 5; ++i) buf.push({0, double(i), 0, 0}, {0.01 * i, 0.0});
        for (int i = 1; i < 5; ++i) {
            CHECK(buf[i].y.Y > buf[i - 1].y.Y);
            CHECK(buf[i].u.delta > buf[i - 1].u.delta);
        }
    }
    SUBCASE("degenerate capacity rejected") {
        CHECK_THROWS_AS(MeasurementBuffer(0), std::invalid_argument);
    }
}

TEST_CASE("config validation") {
    MheConfig bad;
    bad.Ne = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = MheConfig{};
    bad.sigma_y[2] = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = MheConfig{};
    bad.Ts = -0.01;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_NOTHROW(MheConfig{}.validate());
}

TEST_CASE("noiseless window is reconstructed exactly") {
    const VehicleParams p;
    MheConfig cfg;
    const auto roll = make_rollout(cfg.Ne, cfg.Ts, p);

    MovingHorizonEstimator est(cfg, p);
    for (int i = 0; i <= cfg.Ne; ++i)
        est.push_measurement(roll.x[size_t(i)],
                             i < cfg.Ne ? roll.u[size_t(i)] : ControlInput{});
    const auto res = est.estimate();
    CHECK(!res.degraded);
    CHECK(res.cost <= 1e-10);
    REQUIRE(res.window_states.size() == size_t(cfg.Ne + 1));
    for (int i = 0; i <= cfg.Ne; ++i) {
        const Eigen::Vector4d err =
            res.window_states[size_t(i)].vec() - roll.x[size_t(i)].vec();
        CHECK(err.cwiseAbs().maxCoeff() <= 1e-6);
    }
    CHECK((res.x_hat.vec() - roll.x.back().vec()).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("stationary measurements with zero input") {
    const VehicleParams p;
    MheConfig cfg;
    MovingHorizonEstimator est(cfg, p);
    const ReducedState rest{2.0, -1.0, 0.7, 0.0};
    for (int i = 0; i <= cfg.Ne; ++i) est.push_measurement(rest, {});
    const auto res = est.estimate();
    CHECK(!res.degraded);
    CHECK((res.x_hat.vec() - rest.vec()).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("partial window at startup") {
    const VehicleParams p;
    MheConfig cfg;
    MovingHorizonEstimator est(cfg, p);
    const auto roll = make_rollout(3, cfg.Ts, p);
    est.push_measurement(roll.x[0], roll.u[0]);
    auto res = est.estimate();  // single sample: weighted fit = the measurement
    CHECK((res.x_hat.vec() - roll.x[0].vec()).cwiseAbs().maxCoeff() <= 1e-8);

    est.push_measurement(roll.x[1], roll.u[1]);
    est.push_measurement(roll.x[2], roll.u[2]);
    res = est.estimate();
    CHECK(res.window_states.size() == 3);
    CHECK((res.x_hat.vec() - roll.x[2].vec()).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("weight scaling equivariance") {
    const VehicleParams p;
    std::mt19937 rng(42);
    std::normal_distribution<double> noise(0.0, 1.0);

    MheConfig a;
    MheConfig b = a;
    b.sigma_y *= 3.0;  // scales V and W by the same 1/3
    b.sigma_u *= 3.0;

    MovingHorizonEstimator ea(a, p), eb(b, p);
    const auto roll = make_rollout(a.Ne, a.Ts, p);
    for (int i = 0; i <= a.Ne; ++i) {
        ReducedState y = roll.x[size_t(i)];
        y.X += 0.03 * noise(rng);
        y.Y += 0.03 * noise(rng);
        y.psi += 0.02 * noise(rng);
        y.v += 0.05 * noise(rng);
        ControlInput u = i < a.Ne ? roll.u[size_t(i)] : ControlInput{};
        u.delta += 0.01 * noise(rng);
        ea.push_measurement(y, u);
        eb.push_measurement(y, u);
    }
    const auto ra = ea.estimate();
    const auto rb = eb.estimate();
    CHECK((ra.x_hat.vec() - rb.x_hat.vec()).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("window trajectory satisfies the dynamics") {
    const VehicleParams p;
    MheConfig cfg;
    std::mt19937 rng(7);
    std::normal_distribution<double> noise(0.0, 1.0);
    MovingHorizonEstimator est(cfg, p);
    const auto roll = make_rollout(cfg.Ne, cfg.Ts, p);
    for (int i = 0; i <= cfg.Ne; ++i) {
        ReducedState y = roll.x[size_t(i)];
        y.X += cfg.sigma_y[0] * noise(rng);
        y.Y += cfg.sigma_y[1] * noise(rng);
        y.psi += cfg.sigma_y[2] * noise(rng);
        y.v += cfg.sigma_y[3] * noise(rng);
        est.push_measurement(y, i < cfg.Ne ? roll.u[size_t(i)] : ControlInput{});
    }
    const auto res = est.estimate();
    REQUIRE(res.window_inputs.size() == size_t(cfg.Ne));
    for (int i = 0; i < cfg.Ne; ++i) {
        const Eigen::Vector4d pred = reduced_rk4_step(res.window_states[size_t(i)],
                                                      res.window_inputs[size_t(i)], p, cfg.Ts);
        CHECK((res.window_states[size_t(i + 1)].vec() - pred).cwiseAbs().maxCoeff() <= 1e-5);
    }
    CHECK(res.x_hat.v >= 0.0);
    for (const auto& u : res.window_inputs) CHECK(cfg.input_bounds.contains(u, 1e-9));
}

TEST_CASE("out-of-range measured inputs are projected into bounds") {
    const VehicleParams p;
    MheConfig cfg;
    MovingHorizonEstimator est(cfg, p);
    ReducedState s{0, 0, 0, 1.0};
    for (int i = 0; i <= cfg.Ne; ++i) {
        est.push_measurement(s, {0.9, 1.4});  // far beyond the actuator box
        s = ReducedState::from_vec(
            reduced_rk4_step(s, {cfg.input_bounds.delta_max, 1.0}, p, cfg.Ts));
    }
    const auto res = est.estimate();
    for (const auto& u : res.window_inputs) CHECK(cfg.input_bounds.contains(u, 1e-9));
}

TEST_CASE("noise rejection over a long run") {
    // estimate RMSE must beat the raw measurement RMSE per state channel
    const VehicleParams p;
    MheConfig cfg;
    const int steps = 240;
    const auto roll = make_rollout(steps, cfg.Ts, p);

    std::mt19937 rng(2024);
    std::normal_distribution<double> noise(0.0, 1.0);

    MovingHorizonEstimator est(cfg, p);
    Eigen::Vector4d se_est = Eigen::Vector4d::Zero();
    Eigen::Vector4d se_meas = Eigen::Vector4d::Zero();
    int counted = 0;
    for (int k = 0; k <= steps; ++k) {
        ReducedState y = roll.x[size_t(k)];
        y.X += cfg.sigma_y[0] * noise(rng);
        y.Y += cfg.sigma_y[1] * noise(rng);
        y.psi += cfg.sigma_y[2] * noise(rng);
        y.v = std::max(0.0, y.v + cfg.sigma_y[3] * noise(rng));
        ControlInput u = k < steps ? roll.u[size_t(k)] : ControlInput{};
        ControlInput un = u;
        un.delta += cfg.sigma_u[0] * noise(rng);
        un.D += cfg.sigma_u[1] * noise(rng);
        est.push_measurement(y, un);
        const auto res = est.estimate();
        CHECK(!res.degraded);
        if (k >= cfg.Ne + 2) {  // past startup transient
            const Eigen::Vector4d te = res.x_hat.vec() - roll.x[size_t(k)].vec();
            const Eigen::Vector4d tm = y.vec() - roll.x[size_t(k)].vec();
            se_est += te.cwiseAbs2();
            se_meas += tm.cwiseAbs2();
            ++counted;
        }
    }
    REQUIRE(counted > 100);
    for (int j = 0; j < 4; ++j) {
        const double rmse_est = std::sqrt(se_est[j] / counted);
        const double rmse_meas = std::sqrt(se_meas[j] / counted);
        CHECK(rmse_est < rmse_meas);
    }
}

TEST_CASE("determinism") {
    const VehicleParams p;
    MheConfig cfg;
    const auto roll = make_rollout(cfg.Ne, cfg.Ts, p);
    auto run = [&]() {
        MovingHorizonEstimator est(cfg, p);
        std::mt19937 rng(5);
        std::normal_distribution<double> noise(0.0, 1.0);
        for (int i = 0; i <= cfg.Ne; ++i) {
            ReducedState y = roll.x[size_t(i)];
            y.X += 0.05 * noise(rng);
            est.push_measurement(y, i < cfg.Ne ? roll.u[size_t(i)] : ControlInput{});
        }
        return est.estimate();
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.x_hat.X == b.x_hat.X);
    CHECK(a.x_hat.Y == b.x_hat.Y);
    CHECK(a.x_hat.psi == b.x_hat.psi);
    CHECK(a.x_hat.v == b.x_hat.v);
}

TEST_CASE("empty buffer rejected") {
    MeasurementBuffer buf(3);
    CHECK_THROWS_AS(solve_mhe(buf, MheConfig{}, VehicleParams{}), std::invalid_argument);
}
