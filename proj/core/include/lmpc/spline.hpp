// Cubic spline interpolation with natural or periodic end conditions,
// plus a 2-D parametric curve built from two splines sharing knots.

#pragma once

#include <Eigen/Dense>
#include <vector>

namespace lmpc {

class CubicSpline1D {
public:
    enum class Bc { Natural, Periodic };

    CubicSpline1D() = default;

    // Knots must be strictly increasing. For Periodic, y.back() must equal
    // y.front() (the closing knot is included).
    CubicSpline1D(std::vector<double> t, std::vector<double> y, Bc bc);

    double eval(double t) const;
    double deriv(double t) const;
    double deriv2(double t) const;

    double t_min() const { return t_.front(); }
    double t_max() const { return t_.back(); }
    bool periodic() const { return bc_ == Bc::Periodic; }
    const std::vector<double>& knots() const { return t_; }

private:
    // wraps (periodic) or clamps (natural) the parameter, returns segment index
    int locate(double& t) const;

    std::vector<double> t_;
    std::vector<double> y_;
    std::vector<double> m_;  // second derivatives at knots
    Bc bc_{Bc::Natural};
};

// Parametric planar curve (x(t), y(t)) with shared knot vector.
class Curve2 {
public:
    Curve2() = default;
    Curve2(CubicSpline1D x, CubicSpline1D y) : x_(std::move(x)), y_(std::move(y)) {}

    Eigen::Vector2d eval(double t) const { return {x_.eval(t), y_.eval(t)}; }
    Eigen::Vector2d deriv(double t) const { return {x_.deriv(t), y_.deriv(t)}; }
    Eigen::Vector2d deriv2(double t) const { return {x_.deriv2(t), y_.deriv2(t)}; }

    double t_min() const { return x_.t_min(); }
    double t_max() const { return x_.t_max(); }
    bool periodic() const { return x_.periodic(); }

    const CubicSpline1D& x() const { return x_; }
    const CubicSpline1D& y() const { return y_; }

private:
    CubicSpline1D x_, y_;
};

}  // namespace lmpc
