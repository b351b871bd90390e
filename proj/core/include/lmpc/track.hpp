// Track geometry: arc-length-parameterized centerline and boundary splines,
// projection operator, heading, and signed contouring error.

#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "lmpc/spline.hpp"

namespace lmpc {

struct Waypoint {
    double x{0.0};
    double y{0.0};
    double half_width{0.0};
};
using Waypoints = std::vector<Waypoint>;

class TrackGeometry {
public:
    // Fits a cubic spline through the waypoints (periodic when closed),
    // re-parameterized to arc length, with offset boundary splines.
    // Throws std::invalid_argument on bad waypoints and std::runtime_error
    // when a boundary offset self-intersects.
    static TrackGeometry fit(const Waypoints& w, bool closed);

    double length() const { return length_; }
    bool closed() const { return closed_; }

    // wraps (closed) or clamps (open) theta into [0, L]
    double wrap(double theta) const;

    Eigen::Vector2d centerline(double theta) const { return center_.eval(wrap(theta)); }
    Eigen::Vector2d tangent(double theta) const { return center_.deriv(wrap(theta)); }

    // Track heading phi = atan2(dY/dtheta, dX/dtheta), unwrapped so that it is
    // continuous in theta (gains 2*pi per lap of a closed loop).
    double heading(double theta) const;
    double heading_rate(double theta) const;  // d phi / d theta
    double curvature(double theta) const;

    double half_width(double theta) const { return half_width_.eval(wrap(theta)); }
    double half_width_deriv(double theta) const { return half_width_.deriv(wrap(theta)); }

    Eigen::Vector2d left_boundary(double theta) const { return left_.eval(wrap(theta)); }
    Eigen::Vector2d right_boundary(double theta) const { return right_.eval(wrap(theta)); }

    // Arc length of the closest centerline point. With a hint, a local search
    // around the hint plus Newton refinement; otherwise a global coarse grid
    // (>= 512 samples) followed by refinement. Never fails: falls back to the
    // best sampled theta if Newton does not converge.
    double project(double X, double Y, std::optional<double> hint = std::nullopt) const;

    // Signed orthogonal deviation from the centerline at arc length theta:
    // e = sin(phi)*(X - Xref) - cos(phi)*(Y - Yref).
    // Negative on the left of the travel direction, positive on the right.
    double contour_error(double X, double Y, double theta) const;

    const Curve2& center_curve() const { return center_; }

private:
    TrackGeometry() = default;

    Curve2 center_, left_, right_;
    CubicSpline1D half_width_;
    CubicSpline1D heading_ref_;  // unwrapped heading lookup used to pick the 2*pi branch
    bool closed_{false};
    double length_{0.0};
};

enum class TrackKind { LShape, Oval };

// Deterministic waypoint sets for the two canonical test circuits. Corners are
// rounded with arc fillets (radius fillet_radius, default scale/8) so the
// cubic fit is well conditioned. Throws std::invalid_argument when the fillet
// or width is degenerate.
Waypoints synthesize_track(TrackKind kind, double scale, double width,
                           double fillet_radius = -1.0);

// Plain CSV with header "x,y,half_width", one waypoint per row, meters.
Waypoints load_waypoints_csv(const std::string& path);
void save_waypoints_csv(const Waypoints& w, const std::string& path);

}  // namespace lmpc
