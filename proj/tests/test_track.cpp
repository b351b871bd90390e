#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "lmpc/track.hpp"

using namespace lmpc;

namespace {

Waypoints straight_x(int n, double spacing, double hw = 0.5) {
    Waypoints w;
    for (int i = 0; i < n; ++i) w.push_back({i * spacing, 0.0, hw});
    return w;
}

Waypoints circle(double R, int n, double hw) {
    Waypoints w;
    for (int i = 0; i < n; ++i) {
        const double a = 2.0 * M_PI * i / n;
        w.push_back({R * std::cos(a), R * std::sin(a), hw});
    }
    return w;
}

}  // namespace

TEST_CASE("fit_track on degenerate input") {
    CHECK_THROWS_AS(TrackGeometry::fit(straight_x(3, 1.0), false), std::invalid_argument);
    Waypoints dup = straight_x(5, 1.0);
    dup[2] = dup[1];
    CHECK_THROWS_AS(TrackGeometry::fit(dup, false), std::invalid_argument);
}

TEST_CASE("straight open track") {
    const auto g = TrackGeometry::fit(straight_x(4, 1.0), false);
    CHECK(g.length() == doctest::Approx(3.0).epsilon(1e-6));
    const auto p = g.centerline(1.5);
    CHECK(p.x() == doctest::Approx(1.5).epsilon(1e-6));
    CHECK(p.y() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(g.heading(0.7) == doctest::Approx(0.0).epsilon(1e-9));
    // projection of an off-track point is the perpendicular foot
    CHECK(g.project(1.8, 1.0) == doctest::Approx(1.8).epsilon(1e-5));
    // contour error: phi = 0, point left of travel -> negative
    CHECK(g.contour_error(1.0, 1.0, 1.0) == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("straight track along y-axis has heading pi/2") {
    Waypoints w;
    for (int i = 0; i < 6; ++i) w.push_back({0.0, 0.5 * i, 0.4});
    const auto g = TrackGeometry::fit(w, false);
    CHECK(g.heading(1.0) == doctest::Approx(M_PI / 2).epsilon(1e-9));
}

TEST_CASE("circle track") {
    const double R = 2.0;
    const auto g = TrackGeometry::fit(circle(R, 24, 0.3), true);
    CHECK(g.closed());
    CHECK(g.length() == doctest::Approx(2 * M_PI * R).epsilon(0.01));

    SUBCASE("curvature is 1/R everywhere") {
        for (int i = 0; i < 50; ++i) {
            const double th = g.length() * i / 50.0;
            CHECK(g.curvature(th) == doctest::Approx(1.0 / R).epsilon(0.02));
        }
    }
    SUBCASE("heading advances by theta/R") {
        for (int i = 1; i < 20; ++i) {
            const double th = g.length() * i / 20.0;
            CHECK(g.heading(th) - g.heading(0.0) == doctest::Approx(th / R).epsilon(0.01));
        }
    }
    SUBCASE("periodicity of evaluation") {
        const auto a = g.centerline(0.0);
        const auto b = g.centerline(g.length());
        CHECK((a - b).norm() <= 1e-9);
    }
    SUBCASE("arc-length parameterization") {
        for (int i = 0; i < 100; ++i) {
            const double th = g.length() * i / 100.0;
            CHECK(g.tangent(th).norm() == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
}

TEST_CASE("projection") {
    const auto g = TrackGeometry::fit(circle(2.0, 32, 0.3), true);
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> d(-1.0, 1.0);

    SUBCASE("point on centerline projects to itself") {
        for (int i = 0; i < 20; ++i) {
            const double th = g.length() * (i + 0.37) / 20.0;
            const auto p = g.centerline(th);
            const double got = g.project(p.x(), p.y());
            const double diff = std::abs(g.wrap(got - th + g.length() / 2) - g.length() / 2);
            CHECK(diff <= 1e-6 * g.length());
        }
    }
    SUBCASE("matches dense-sampling oracle") {
        const int M = 100000;
        for (int trial = 0; trial < 25; ++trial) {
            const double X = 2.6 * d(rng);
            const double Y = 2.6 * d(rng);
            if (std::hypot(X, Y) < 0.5) continue;  // center is equidistant, skip
            double best_th = 0, best_d = 1e300;
            for (int i = 0; i < M; ++i) {
                const double th = g.length() * i / M;
                const double dist = (g.centerline(th) - Eigen::Vector2d(X, Y)).squaredNorm();
                if (dist < best_d) {
                    best_d = dist;
                    best_th = th;
                }
            }
            const double got = g.project(X, Y);
            const double diff =
                std::abs(g.wrap(got - best_th + g.length() / 2) - g.length() / 2);
            CHECK(diff <= 2.0 * g.length() / M);
        }
    }
    SUBCASE("hinted projection agrees with global") {
        for (int trial = 0; trial < 25; ++trial) {
            const double th = g.length() * (trial + 0.5) / 25.0;
            const auto c = g.centerline(th);
            const double X = c.x() + 0.2 * d(rng);
            const double Y = c.y() + 0.2 * d(rng);
            const double glob = g.project(X, Y);
            const double hinted = g.project(X, Y, th - 0.3);
            const double diff =
                std::abs(g.wrap(hinted - glob + g.length() / 2) - g.length() / 2);
            CHECK(diff <= 1e-6);
        }
    }
}

TEST_CASE("contour error properties") {
    const auto g = TrackGeometry::fit(circle(2.0, 32, 0.3), true);

    SUBCASE("zero on centerline") {
        for (int i = 0; i < 20; ++i) {
            const double th = g.length() * i / 20.0;
            const auto p = g.centerline(th);
            CHECK(std::abs(g.contour_error(p.x(), p.y(), th)) <= 1e-9);
        }
    }
    SUBCASE("matches point-to-curve distance at the projected theta") {
        std::mt19937 rng(9);
        std::uniform_real_distribution<double> d(-0.25, 0.25);
        for (int trial = 0; trial < 30; ++trial) {
            const double th = g.length() * (trial + 0.3) / 30.0;
            const auto c = g.centerline(th);
            const double X = c.x() + d(rng);
            const double Y = c.y() + d(rng);
            const double ths = g.project(X, Y);
            const double e = g.contour_error(X, Y, ths);
            const double dist = (g.centerline(ths) - Eigen::Vector2d(X, Y)).norm();
            CHECK(std::abs(std::abs(e) - dist) <= 1e-6);
        }
    }
    SUBCASE("sign consistency: left offsets are negative everywhere") {
        for (int i = 0; i < 40; ++i) {
            const double th = g.length() * i / 40.0;
            const auto c = g.centerline(th);
            const double phi = g.heading(th);
            const double off = 0.1;
            const double X = c.x() - off * std::sin(phi);
            const double Y = c.y() + off * std::cos(phi);
            CHECK(g.contour_error(X, Y, th) == doctest::Approx(-off).epsilon(1e-9));
        }
    }
    SUBCASE("boundary containment: |e| = half_width at boundary points") {
        for (int i = 0; i < 40; ++i) {
            const double th = g.length() * i / 40.0;
            const auto lb = g.left_boundary(th);
            const auto rb = g.right_boundary(th);
            const double el = g.contour_error(lb.x(), lb.y(), th);
            const double er = g.contour_error(rb.x(), rb.y(), th);
            CHECK(el == doctest::Approx(-g.half_width(th)).epsilon(1e-3));
            CHECK(er == doctest::Approx(g.half_width(th)).epsilon(1e-3));
        }
    }
}

TEST_CASE("chord length never exceeds arc length") {
    const auto g = TrackGeometry::fit(circle(2.0, 24, 0.3), true);
    std::mt19937 rng(21);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const double t1 = g.length() * d(rng);
        const double t2 = t1 + 0.5 * g.length() * d(rng);
        const double chord = (g.centerline(t2) - g.centerline(t1)).norm();
        CHECK(chord <= (t2 - t1) + 1e-6);
    }
}

TEST_CASE("offset self-intersection is rejected") {
    // width far exceeds the curvature radius
    CHECK_THROWS_AS(TrackGeometry::fit(circle(0.5, 16, 0.6), true), std::runtime_error);
}

TEST_CASE("synthesize_track") {
    SUBCASE("oval length matches geometric oracle") {
        const auto w = synthesize_track(TrackKind::Oval, 6.0, 0.8);
        const auto g = TrackGeometry::fit(w, true);
        const double R = 2.0;  // scale/3
        const double expect = 2 * 6.0 + 2 * M_PI * R;
        CHECK(g.length() == doctest::Approx(expect).epsilon(0.05));
    }
    SUBCASE("square-ish loop length near polygon perimeter") {
        Waypoints w;
        const double pts[8][2] = {{0, 0}, {2, 0}, {4, 0}, {4, 2}, {4, 4}, {2, 4}, {0, 4}, {0, 2}};
        for (auto& p : pts) w.push_back({p[0], p[1], 0.1});
        const auto g = TrackGeometry::fit(w, true);
        CHECK(g.length() == doctest::Approx(16.0).epsilon(0.05));
    }
    SUBCASE("l-shape fits and stays consistent") {
        const auto w = synthesize_track(TrackKind::LShape, 6.0, 0.8);
        const auto g = TrackGeometry::fit(w, true);
        CHECK(g.closed());
        CHECK(g.length() > 10.0);
        for (int i = 0; i < 200; ++i) {
            const double th = g.length() * i / 200.0;
            CHECK(g.tangent(th).norm() == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    SUBCASE("zero fillet is rejected") {
        CHECK_THROWS_AS(synthesize_track(TrackKind::LShape, 6.0, 0.8, 0.0),
                        std::invalid_argument);
    }
    SUBCASE("deterministic") {
        const auto a = synthesize_track(TrackKind::Oval, 6.0, 0.8);
        const auto b = synthesize_track(TrackKind::Oval, 6.0, 0.8);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].x == b[i].x);
            CHECK(a[i].y == b[i].y);
            CHECK(a[i].half_width == b[i].half_width);
        }
    }
}

TEST_CASE("waypoint csv round trip") {
    const auto w = synthesize_track(TrackKind::Oval, 6.0, 0.8);
    const std::string path = "/tmp/lmpc_test_track.csv";
    save_waypoints_csv(w, path);
    const auto r = load_waypoints_csv(path);
    REQUIRE(r.size() == w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        CHECK(r[i].x == w[i].x);
        CHECK(r[i].y == w[i].y);
        CHECK(r[i].half_width == w[i].half_width);
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_waypoints_csv("/nonexistent/track.csv"), std::runtime_error);
}
