#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lmpc/dynamics.hpp"
#include "lmpc/planner.hpp"
#include "lmpc/track.hpp"

using namespace lmpc;

namespace {

// top speed of the drivetrain at full throttle on a straight: root of
// (Cm1 - Cm2 v) - Cr2 v^2 - Cr1, bracketed and bisected independently of the
// model code
double top_speed_oracle(const VehicleParams& p) {
    auto f = [&](double v) { return (p.Cm1 - p.Cm2 * v) - p.Cr2 * v * v - p.Cr1; };
    double lo = 0.0, hi = 20.0;
    REQUIRE(f(lo) > 0.0);
    REQUIRE(f(hi) < 0.0);
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// analytic circular race line of radius R at constant speed, sampled on a
// uniform grid of n intervals so the closing knot lands exactly on the lap
// length
RaceLine circle_raceline(double R, double v, int n) {
    RaceLine rl;
    rl.lap_length = 2.0 * M_PI * R;
    rl.lap_time = rl.lap_length / v;
    for (int i = 0; i <= n; ++i) {
        const double th = rl.lap_length * i / n;
        const double a = th / R;
        rl.samples.push_back({th, R * std::cos(a), R * std::sin(a), a + M_PI / 2.0, v});
    }
    return rl;
}

const TrackGeometry& oval_track() {
    static const TrackGeometry track =
        TrackGeometry::fit(synthesize_track(TrackKind::Oval, 4.0, 0.8), true);
    return track;
}

struct OvalPlan {
    RaceLine rl;
    PlannedTrajectory traj;
};

const OvalPlan& oval_plan() {
    static const OvalPlan p = [] {
        OvalPlan out;
        out.rl = plan_raceline(oval_track(), VehicleParams{}, PlannerConfig{}, &out.traj);
        return out;
    }();
    return p;
}

// Independent centerline-following baseline: clamped feedback steering toward
// the centerline with a curvature-limited target speed (braking lookahead),
// simulated through the full model. Returns the lap time, or infinity when
// the run leaves the track.
double centerline_following_lap(const TrackGeometry& track, const VehicleParams& params,
                                double corner_speed, double straight_speed) {
    const double Ts = 0.033;
    const double L = track.length();
    const double wb = params.lf + params.lr;
    Eigen::Matrix<double, 6, 1> x;
    const Eigen::Vector2d p0 = track.centerline(0.0);
    x << p0.x(), p0.y(), track.heading(0.0), 1.0, 0.0, 0.0;
    double th = 0.0, th_prev = 0.0;
    const int max_steps = static_cast<int>(60.0 / Ts);
    for (int k = 0; k < max_steps; ++k) {
        const double thw = track.wrap(th);
        double vt = straight_speed;
        for (double d = 0.0; d <= 2.0; d += 0.25) {
            const double kap = std::abs(track.curvature(track.wrap(th + d)));
            if (kap > 1e-6) vt = std::min(vt, corner_speed);
        }
        const double e = track.contour_error(x[0], x[1], thw);
        const double dpsi = std::remainder(x[2] - track.heading(thw), 2.0 * M_PI);
        const double delta = std::clamp(
            std::atan(wb * track.curvature(thw)) + 1.2 * e - 1.8 * dpsi, -M_PI / 6.0,
            M_PI / 6.0);
        const double D = std::clamp(0.8 * (vt - x[3]), -1.0, 1.0);
        x = full_rk4_step(FullState::from_vec(x), ControlInput{delta, D}, params, Ts);
        const double proj = track.project(x[0], x[1], track.wrap(th));
        th_prev = th;
        th += std::max(std::remainder(proj - track.wrap(th), L), 1e-9);
        if (std::abs(track.contour_error(x[0], x[1], track.wrap(th))) >
            track.half_width(track.wrap(th)))
            return std::numeric_limits<double>::infinity();
        if (th >= L)
            return Ts * (k + (L - th_prev) / std::max(th - th_prev, 1e-12));
    }
    return std::numeric_limits<double>::infinity();
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name)
        : path((std::filesystem::temp_directory_path() / name).string()) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("planner config validation") {
    PlannerConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.Np = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.Ts = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.q = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.margin = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("race line lookup on an analytic circle") {
    const double R = 2.0, v = 2.0;
    const RaceLine rl = circle_raceline(R, v, 252);
    const RaceLineLookup lut(rl);
    const double L = rl.lap_length;
    CHECK(lut.lap_length() == doctest::Approx(L));

    SUBCASE("interpolation matches the analytic curve") {
        for (double th = 0.1; th < L; th += 0.7) {
            const Eigen::Vector2d p = lut.position(th);
            CHECK(p.x() == doctest::Approx(R * std::cos(th / R)).epsilon(1e-5));
            CHECK(p.y() == doctest::Approx(R * std::sin(th / R)).epsilon(1e-5));
            CHECK(lut.speed(th) == doctest::Approx(v).epsilon(1e-9));
            CHECK(lut.heading(th) == doctest::Approx(th / R + M_PI / 2.0).epsilon(1e-4));
        }
    }
    SUBCASE("periodic wrap") {
        for (double th : {0.3, 2.0, 5.5}) {
            CHECK((lut.position(th + L) - lut.position(th)).norm() < 1e-9);
            CHECK((lut.position(th - L) - lut.position(th)).norm() < 1e-9);
        }
    }
    SUBCASE("projection recovers arc length") {
        const double th_true = 3.7;
        // point slightly off the line, radially outward
        const double a = th_true / R;
        const double X = (R + 0.1) * std::cos(a), Y = (R + 0.1) * std::sin(a);
        CHECK(lut.project(X, Y) == doctest::Approx(th_true).epsilon(1e-3));
        CHECK(lut.project(X, Y, th_true - 0.4) == doctest::Approx(th_true).epsilon(1e-3));
    }
    SUBCASE("too few samples throws") {
        RaceLine tiny;
        tiny.lap_length = 1.0;
        tiny.samples = {{0.0, 0, 0, 0, 1}, {1.0, 1, 0, 0, 1}};
        CHECK_THROWS_AS(RaceLineLookup{tiny}, std::invalid_argument);
    }
}

TEST_CASE("resample_raceline") {
    const RaceLine rl = circle_raceline(1.5, 2.5, 96);
    const double d = rl.lap_length / 96.0;

    SUBCASE("resampling onto the original grid reproduces the knots") {
        const RaceLine rs = resample_raceline(rl, d);
        REQUIRE(rs.samples.size() == rl.samples.size());
        for (size_t i = 0; i < rl.samples.size(); ++i) {
            CHECK(rs.samples[i].theta == doctest::Approx(rl.samples[i].theta).epsilon(1e-12));
            CHECK(rs.samples[i].X == doctest::Approx(rl.samples[i].X).epsilon(1e-10));
            CHECK(rs.samples[i].Y == doctest::Approx(rl.samples[i].Y).epsilon(1e-10));
            CHECK(rs.samples[i].psi == doctest::Approx(rl.samples[i].psi).epsilon(1e-10));
            CHECK(rs.samples[i].v == doctest::Approx(rl.samples[i].v).epsilon(1e-10));
        }
    }
    SUBCASE("finer grid is uniform and spans the same range") {
        const RaceLine rs = resample_raceline(rl, d / 4.0);
        REQUIRE(rs.samples.size() > rl.samples.size());
        CHECK(rs.samples.front().theta == doctest::Approx(rl.samples.front().theta));
        CHECK(rs.samples.back().theta == doctest::Approx(rl.samples.back().theta));
        for (size_t i = 1; i + 1 < rs.samples.size(); ++i)
            CHECK(rs.samples[i].theta - rs.samples[i - 1].theta ==
                  doctest::Approx(d / 4.0).epsilon(1e-9));
    }
    SUBCASE("halving the grid then downsampling reproduces the coarse values") {
        const RaceLine coarse = resample_raceline(rl, d / 2.0);
        const RaceLine fine = resample_raceline(rl, d / 4.0);
        for (size_t i = 0; i < coarse.samples.size(); ++i) {
            const auto& cs = coarse.samples[i];
            const auto& fs = fine.samples[2 * i];
            CHECK(fs.theta == doctest::Approx(cs.theta).epsilon(1e-12));
            CHECK(std::abs(fs.X - cs.X) <= 1e-9);
            CHECK(std::abs(fs.Y - cs.Y) <= 1e-9);
            CHECK(std::abs(fs.psi - cs.psi) <= 1e-9);
            CHECK(std::abs(fs.v - cs.v) <= 1e-9);
        }
    }
    SUBCASE("bad arguments throw") {
        CHECK_THROWS_AS(resample_raceline(rl, 0.0), std::invalid_argument);
        RaceLine tiny;
        tiny.samples = {{0.0, 0, 0, 0, 1}, {1.0, 1, 0, 0, 1}};
        CHECK_THROWS_AS(resample_raceline(tiny, 0.1), std::invalid_argument);
    }
}

TEST_CASE("race line csv round trip") {
    const RaceLine rl = circle_raceline(1.0, 3.0, 32);
    TempFile tmp("lmpc_test_raceline.csv");
    save_raceline_csv(rl, tmp.path);
    const RaceLine back = load_raceline_csv(tmp.path);
    REQUIRE(back.samples.size() == rl.samples.size());
    for (size_t i = 0; i < rl.samples.size(); ++i) {
        CHECK(back.samples[i].theta == rl.samples[i].theta);  // bitwise
        CHECK(back.samples[i].X == rl.samples[i].X);
        CHECK(back.samples[i].Y == rl.samples[i].Y);
        CHECK(back.samples[i].psi == rl.samples[i].psi);
        CHECK(back.samples[i].v == rl.samples[i].v);
    }

    SUBCASE("missing file throws") {
        CHECK_THROWS_AS(load_raceline_csv("/nonexistent/raceline.csv"), std::runtime_error);
    }
    SUBCASE("bad header throws") {
        TempFile bad("lmpc_test_raceline_bad.csv");
        std::ofstream out(bad.path);
        out << "a,b,c\n0,0,0\n";
        out.close();
        CHECK_THROWS_AS(load_raceline_csv(bad.path), std::runtime_error);
    }
}

TEST_CASE("planned race line on the oval") {
    const TrackGeometry& track = oval_track();
    const RaceLine& rl = oval_plan().rl;
    const double L = track.length();
    const double v_top = top_speed_oracle(VehicleParams{});
    REQUIRE(!rl.empty());

    SUBCASE("uniform monotone theta grid covering the lap") {
        CHECK(rl.lap_length == doctest::Approx(L));
        CHECK(rl.samples.front().theta == doctest::Approx(0.0));
        CHECK(rl.samples.back().theta == doctest::Approx(L).epsilon(1e-6));
        for (size_t i = 1; i < rl.samples.size(); ++i)
            CHECK(rl.samples[i].theta > rl.samples[i - 1].theta);
    }
    SUBCASE("stays inside the track with the configured margin") {
        const double margin = PlannerConfig{}.margin;
        for (const auto& s : rl.samples) {
            const double th = track.project(s.X, s.Y, s.theta);
            const double e = track.contour_error(s.X, s.Y, th);
            CHECK(std::abs(e) <= track.half_width(th) - margin + 1e-3);
        }
    }
    SUBCASE("beats the best centerline-following lap at the same bounds") {
        double best = std::numeric_limits<double>::infinity();
        for (double vc : {1.5, 2.0, 2.5, 3.0})
            for (double vs : {2.5, 3.5, 4.2})
                best = std::min(best,
                                centerline_following_lap(track, VehicleParams{}, vc, vs));
        REQUIRE(std::isfinite(best));
        CHECK(rl.lap_time < best);
    }
    SUBCASE("replaying the planned inputs reproduces the stored trajectory") {
        const PlannedTrajectory& traj = oval_plan().traj;
        REQUIRE(traj.states.size() == traj.inputs.size() + 1);
        REQUIRE(traj.thetas.size() == traj.states.size());
        REQUIRE(traj.Ts > 0.0);
        Eigen::Matrix<double, 6, 1> x = traj.states.front();
        for (size_t k = 0; k < traj.inputs.size(); ++k) {
            x = full_rk4_step(FullState::from_vec(x),
                              ControlInput{traj.inputs[k][0], traj.inputs[k][1]},
                              VehicleParams{}, traj.Ts);
            for (int i = 0; i < 6; ++i)
                CHECK(std::abs(x[i] - traj.states[k + 1][i]) <= 1e-6);
            x = traj.states[k + 1];  // re-anchor so per-step tolerance applies
        }
        for (size_t k = 1; k < traj.thetas.size(); ++k)
            CHECK(traj.thetas[k] > traj.thetas[k - 1]);
    }
    SUBCASE("speed profile approaches the drivetrain top speed") {
        double v_max = 0.0;
        for (const auto& s : rl.samples) {
            CHECK(s.v > 0.0);
            CHECK(s.v <= v_top + 0.05);
            v_max = std::max(v_max, s.v);
        }
        CHECK(v_max >= 0.8 * v_top);
    }
    SUBCASE("lap time is consistent with the speed profile") {
        CHECK(rl.lap_time > L / v_top);      // cannot beat top speed everywhere
        CHECK(rl.lap_time < L / 1.0);        // clearly faster than the rolling start speed
        const double v_avg = L / rl.lap_time;
        CHECK(v_avg > 1.5);
        CHECK(v_avg < v_top);
    }
    SUBCASE("heading is continuous and gains one turn per lap") {
        for (size_t i = 1; i < rl.samples.size(); ++i)
            CHECK(std::abs(rl.samples[i].psi - rl.samples[i - 1].psi) < 0.5);
        const double turn = rl.samples.back().psi - rl.samples.front().psi;
        CHECK(std::abs(std::abs(turn) - 2.0 * M_PI) < 0.3);
    }
    SUBCASE("corner apexes are cut toward the inside") {
        // on the curved sections the optimal line leaves the centerline
        double max_dev = 0.0;
        for (const auto& s : rl.samples) {
            const double th = track.project(s.X, s.Y, s.theta);
            max_dev = std::max(max_dev, std::abs(track.contour_error(s.X, s.Y, th)));
        }
        CHECK(max_dev > 0.05);
    }
}

TEST_CASE("planned line on an open straight reaches the drivetrain top speed") {
    Waypoints w;
    for (double x = 0.0; x <= 30.0 + 1e-9; x += 1.0) w.push_back({x, 0.0, 0.5});
    const TrackGeometry track = TrackGeometry::fit(w, false);
    const RaceLine rl = plan_raceline(track, VehicleParams{}, PlannerConfig{});
    REQUIRE(!rl.empty());

    const double v_root = top_speed_oracle(VehicleParams{});
    double v_max = 0.0, e_max = 0.0;
    for (const auto& s : rl.samples) {
        v_max = std::max(v_max, s.v);
        e_max = std::max(e_max, std::abs(s.Y));  // centerline is the x-axis
    }
    // top speed within 2% of the steady-state root of the drivetrain force
    CHECK(v_max >= 0.98 * v_root);
    CHECK(v_max <= 1.02 * v_root);
    // the race line is the straight centerline
    CHECK(e_max < 0.05);
}

TEST_CASE("planned line negotiates a 90-degree corner between straights") {
    // straight in, radius-1.5 arc, straight out; generous width
    Waypoints w;
    const double R = 1.5, hw = 0.6;
    for (double x = 0.0; x < 6.0; x += 0.5) w.push_back({x, 0.0, hw});
    for (double a = 0.0; a <= M_PI / 2.0 + 1e-9; a += M_PI / 24.0)
        w.push_back({6.0 + R * std::sin(a), R - R * std::cos(a), hw});
    for (double y = R + 0.5; y <= R + 6.0 + 1e-9; y += 0.5) w.push_back({6.0 + R, y, hw});
    const TrackGeometry track = TrackGeometry::fit(w, false);
    const RaceLine rl = plan_raceline(track, VehicleParams{}, PlannerConfig{});
    REQUIRE(!rl.empty());

    // corner sector: where the centerline curvature is a sizable fraction of
    // its peak
    double kap_max = 0.0;
    for (double th = 0.0; th <= track.length(); th += 0.02)
        kap_max = std::max(kap_max, std::abs(track.curvature(th)));
    REQUIRE(kap_max > 0.5);  // the arc is present in the fitted geometry

    // independent oracle on cornering speed: the combined tire force peaks
    // bound the lateral acceleration well below 6 m/s^2, and the widest
    // drivable arc has radius R + hw, so the corner cannot be taken faster
    // than sqrt(6 (R + hw))
    const VehicleParams p;
    const double peak_front = p.Df * std::sin(p.Cf * M_PI / 2.0);
    const double peak_rear = p.Dr * std::sin(p.Cr * M_PI / 2.0);
    const double ay_cap = std::min(6.0, 2.0 * (peak_front + peak_rear) / p.m);
    const double v_corner_cap = std::sqrt(ay_cap * (R + hw));

    double v_corner_min = std::numeric_limits<double>::infinity();
    double v_max = 0.0, dev_max = 0.0;
    for (const auto& s : rl.samples) {
        const double th = track.project(s.X, s.Y, s.theta);
        const double e = track.contour_error(s.X, s.Y, th);
        // stays on the track with the configured margin
        CHECK(std::abs(e) <= track.half_width(th) - PlannerConfig{}.margin + 1e-3);
        CHECK(s.v > 0.0);
        v_max = std::max(v_max, s.v);
        dev_max = std::max(dev_max, std::abs(e));
        if (std::abs(track.curvature(th)) > 0.6 * kap_max)
            v_corner_min = std::min(v_corner_min, s.v);
    }
    REQUIRE(std::isfinite(v_corner_min));
    // brakes for the corner: the slowest point of the corner respects the
    // tire-limited bound, and is well below the straight-line speed
    CHECK(v_corner_min < v_corner_cap);
    CHECK(v_corner_min < 0.8 * v_max);
    // accelerates on the straights toward the drivetrain top speed
    CHECK(v_max > 0.85 * top_speed_oracle(p));
    // uses the track width instead of tracking the centerline
    CHECK(dev_max > 0.08);
}

TEST_CASE("planner determinism") {
    const RaceLine a = plan_raceline(oval_track(), VehicleParams{}, PlannerConfig{});
    const RaceLine& b = oval_plan().rl;
    REQUIRE(a.samples.size() == b.samples.size());
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].theta == b.samples[i].theta);
        CHECK(a.samples[i].X == b.samples[i].X);
        CHECK(a.samples[i].Y == b.samples[i].Y);
        CHECK(a.samples[i].psi == b.samples[i].psi);
        CHECK(a.samples[i].v == b.samples[i].v);
    }
    CHECK(a.lap_time == b.lap_time);
}
