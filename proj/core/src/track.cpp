#include "lmpc/track.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace lmpc {

namespace {

constexpr double kPi = std::numbers::pi;

// 5-point Gauss-Legendre nodes/weights on [-1, 1]
constexpr double kGlNode[5] = {-0.9061798459386640, -0.5384693101056831, 0.0,
                               0.5384693101056831, 0.9061798459386640};
constexpr double kGlWeight[5] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                 0.4786286704993665, 0.2369268850561891};

double segment_length(const Curve2& c, double a, double b) {
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    double s = 0.0;
    for (int i = 0; i < 5; ++i) {
        s += kGlWeight[i] * c.deriv(mid + half * kGlNode[i]).norm();
    }
    return s * half;
}

double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0) a += 2.0 * kPi;
    return a - kPi;
}

}  // namespace

double TrackGeometry::wrap(double theta) const {
    if (closed_) {
        theta = std::fmod(theta, length_);
        if (theta < 0) theta += length_;
        return theta;
    }
    return std::clamp(theta, 0.0, length_);
}

double TrackGeometry::heading(double theta) const {
    theta = wrap(theta);
    const Eigen::Vector2d d = center_.deriv(theta);
    const double raw = std::atan2(d.y(), d.x());
    const double ref = heading_ref_.eval(theta);
    return raw + 2.0 * kPi * std::round((ref - raw) / (2.0 * kPi));
}

double TrackGeometry::heading_rate(double theta) const {
    theta = wrap(theta);
    const Eigen::Vector2d d = center_.deriv(theta);
    const Eigen::Vector2d dd = center_.deriv2(theta);
    return (d.x() * dd.y() - d.y() * dd.x()) / d.squaredNorm();
}

double TrackGeometry::curvature(double theta) const {
    theta = wrap(theta);
    const Eigen::Vector2d d = center_.deriv(theta);
    const Eigen::Vector2d dd = center_.deriv2(theta);
    const double n = d.norm();
    return (d.x() * dd.y() - d.y() * dd.x()) / (n * n * n);
}

double TrackGeometry::contour_error(double X, double Y, double theta) const {
    theta = wrap(theta);
    const Eigen::Vector2d c = center_.eval(theta);
    const double phi = heading(theta);
    return std::sin(phi) * (X - c.x()) - std::cos(phi) * (Y - c.y());
}

double TrackGeometry::project(double X, double Y, std::optional<double> hint) const {
    const Eigen::Vector2d p(X, Y);
    auto dist2 = [&](double th) { return (p - center_.eval(wrap(th))).squaredNorm(); };

    double best = 0.0;
    double best_d = std::numeric_limits<double>::infinity();
    if (hint) {
        // local bracket around the hint; Newton cleans it up below
        const double span = 1.0;
        const int n = 21;
        for (int i = 0; i < n; ++i) {
            const double th = *hint - span + 2.0 * span * i / (n - 1);
            const double d = dist2(th);
            if (d < best_d) {
                best_d = d;
                best = th;
            }
        }
    } else {
        const int n = 1024;
        for (int i = 0; i < n; ++i) {
            const double th = length_ * i / n;
            const double d = dist2(th);
            if (d < best_d) {
                best_d = d;
                best = th;
            }
        }
    }

    // Newton on g(th) = 0.5*|p - c(th)|^2
    double th = best;
    for (int it = 0; it < 30; ++it) {
        const double w = wrap(th);
        const Eigen::Vector2d c = center_.eval(w);
        const Eigen::Vector2d d = center_.deriv(w);
        const Eigen::Vector2d dd = center_.deriv2(w);
        const Eigen::Vector2d r = p - c;
        const double g1 = -r.dot(d);
        const double g2 = d.dot(d) - r.dot(dd);
        if (std::abs(g2) < 1e-12) break;
        double step = -g1 / g2;
        step = std::clamp(step, -0.25 * length_, 0.25 * length_);
        th += step;
        if (!closed_) th = std::clamp(th, 0.0, length_);
        if (std::abs(step) < 1e-12 * std::max(1.0, length_)) break;
    }

    if (std::isfinite(th) && dist2(th) <= best_d + 1e-12) {
        best = th;
    }
    return wrap(best);
}

TrackGeometry TrackGeometry::fit(const Waypoints& w, bool closed) {
    if (w.size() < 4) throw std::invalid_argument("fit_track: need at least 4 waypoints");
    for (size_t i = 0; i + 1 < w.size(); ++i) {
        const double dx = w[i + 1].x - w[i].x;
        const double dy = w[i + 1].y - w[i].y;
        if (std::hypot(dx, dy) < 1e-9)
            throw std::invalid_argument("fit_track: consecutive waypoints coincide at index " +
                                        std::to_string(i));
    }

    // close the loop if the caller did not repeat the first point
    std::vector<Waypoint> pts(w.begin(), w.end());
    if (closed) {
        const double gap = std::hypot(pts.back().x - pts.front().x, pts.back().y - pts.front().y);
        if (gap > 1e-9) {
            Waypoint closing = pts.front();
            pts.push_back(closing);
        } else {
            pts.back() = pts.front();
        }
    }
    const int n = static_cast<int>(pts.size());

    // chord-length parameterization
    std::vector<double> t(n), px(n), py(n), phw(n);
    t[0] = 0.0;
    for (int i = 0; i < n; ++i) {
        px[i] = pts[i].x;
        py[i] = pts[i].y;
        phw[i] = pts[i].half_width;
        if (i > 0) t[i] = t[i - 1] + std::hypot(px[i] - px[i - 1], py[i] - py[i - 1]);
    }

    const auto bc = closed ? CubicSpline1D::Bc::Periodic : CubicSpline1D::Bc::Natural;
    Curve2 raw(CubicSpline1D(t, px, bc), CubicSpline1D(t, py, bc));

    // cumulative arc length on a fine parameter grid
    const int nseg = n - 1;
    const int fine = std::max(4000, 50 * nseg);
    std::vector<double> ts(fine + 1), S(fine + 1);
    const double t0 = t.front();
    const double tn = t.back();
    S[0] = 0.0;
    for (int i = 0; i <= fine; ++i) ts[i] = t0 + (tn - t0) * i / fine;
    for (int i = 1; i <= fine; ++i) S[i] = S[i - 1] + segment_length(raw, ts[i - 1], ts[i]);
    const double L = S[fine];

    auto invert_arclength = [&](double s) {
        s = std::clamp(s, 0.0, L);
        auto it = std::lower_bound(S.begin(), S.end(), s);
        int i = std::clamp(static_cast<int>(it - S.begin()), 1, fine);
        const double f = (s - S[i - 1]) / std::max(S[i] - S[i - 1], 1e-300);
        return ts[i - 1] + f * (ts[i] - ts[i - 1]);
    };

    // resample uniformly in arc length and refit
    const int K = std::max(601, 8 * nseg) | 1;
    std::vector<double> theta(K), cx(K), cy(K);
    for (int j = 0; j < K; ++j) {
        theta[j] = L * j / (K - 1);
        const Eigen::Vector2d pj = raw.eval(invert_arclength(theta[j]));
        cx[j] = pj.x();
        cy[j] = pj.y();
    }
    if (closed) {
        cx[K - 1] = cx[0];
        cy[K - 1] = cy[0];
    }

    TrackGeometry g;
    g.closed_ = closed;
    g.length_ = L;
    g.center_ = Curve2(CubicSpline1D(theta, cx, bc), CubicSpline1D(theta, cy, bc));

    // unwrapped-heading lookup table
    std::vector<double> phi(K);
    double prev = 0.0;
    for (int j = 0; j < K; ++j) {
        const Eigen::Vector2d d = g.center_.deriv(theta[j]);
        double a = std::atan2(d.y(), d.x());
        if (j == 0) {
            phi[j] = a;
        } else {
            phi[j] = prev + wrap_angle(a - prev);
        }
        prev = phi[j];
    }
    g.heading_ref_ = CubicSpline1D(theta, phi, CubicSpline1D::Bc::Natural);

    // half-width spline on the waypoints' arc-length positions
    {
        std::vector<double> wt(n);
        for (int i = 0; i < n; ++i) {
            // arc length at the original chord parameter
            auto it = std::lower_bound(ts.begin(), ts.end(), t[i]);
            int k = std::clamp(static_cast<int>(it - ts.begin()), 1, fine);
            const double f = (t[i] - ts[k - 1]) / std::max(ts[k] - ts[k - 1], 1e-300);
            wt[i] = S[k - 1] + f * (S[k] - S[k - 1]);
        }
        wt[0] = 0.0;
        wt[n - 1] = L;
        if (closed) phw[n - 1] = phw[0];
        g.half_width_ = CubicSpline1D(wt, phw, bc);
    }

    // boundary splines by normal offsetting, with offset-validity check
    std::vector<double> lx(K), ly(K), rx(K), ry(K);
    double bad_from = -1.0, bad_to = -1.0;
    for (int j = 0; j < K; ++j) {
        const double hw = g.half_width_.eval(theta[j]);
        const double kappa = g.curvature(theta[j]);
        if (1.0 - std::abs(kappa) * hw < 0.05) {
            if (bad_from < 0) bad_from = theta[j];
            bad_to = theta[j];
        }
        const double ph = phi[j];
        const Eigen::Vector2d nrm(-std::sin(ph), std::cos(ph));
        lx[j] = cx[j] + hw * nrm.x();
        ly[j] = cy[j] + hw * nrm.y();
        rx[j] = cx[j] - hw * nrm.x();
        ry[j] = cy[j] - hw * nrm.y();
    }
    if (bad_from >= 0) {
        std::ostringstream os;
        os << "fit_track: boundary offset self-intersects (width exceeds curvature radius) "
           << "around theta in [" << bad_from << ", " << bad_to << "]";
        throw std::runtime_error(os.str());
    }
    if (closed) {
        lx[K - 1] = lx[0];
        ly[K - 1] = ly[0];
        rx[K - 1] = rx[0];
        ry[K - 1] = ry[0];
    }
    g.left_ = Curve2(CubicSpline1D(theta, lx, bc), CubicSpline1D(theta, ly, bc));
    g.right_ = Curve2(CubicSpline1D(theta, rx, bc), CubicSpline1D(theta, ry, bc));
    return g;
}

namespace {

// piecewise path builder used by synthesize_track
struct PathSampler {
    std::vector<Eigen::Vector2d> pts;

    void straight(const Eigen::Vector2d& from, const Eigen::Vector2d& to, double ds) {
        const double len = (to - from).norm();
        const int steps = std::max(1, static_cast<int>(std::round(len / ds)));
        for (int i = 0; i < steps; ++i) pts.push_back(from + (to - from) * (double(i) / steps));
    }

    // CCW-positive arc around center from angle a0 through sweep
    void arc(const Eigen::Vector2d& center, double radius, double a0, double sweep, double ds) {
        const double len = std::abs(sweep) * radius;
        const int steps = std::max(2, static_cast<int>(std::round(len / ds)));
        for (int i = 0; i < steps; ++i) {
            const double a = a0 + sweep * i / steps;
            pts.push_back(center + radius * Eigen::Vector2d(std::cos(a), std::sin(a)));
        }
    }
};

}  // namespace

Waypoints synthesize_track(TrackKind kind, double scale, double width, double fillet_radius) {
    if (!(scale > 0.0) || !(width > 0.0))
        throw std::invalid_argument("synthesize_track: scale and width must be positive");
    const double hw = 0.5 * width;
    const double ds = std::max(0.15, scale / 16.0);
    PathSampler path;

    if (kind == TrackKind::Oval) {
        // stadium: two straights of length `scale` joined by semicircles
        const double R = scale / 3.0;
        if (hw >= 0.8 * R)
            throw std::invalid_argument("synthesize_track: width too large for oval radius");
        path.straight({0.0, -R}, {scale, -R}, ds);
        path.arc({scale, 0.0}, R, -kPi / 2.0, kPi, ds);
        path.straight({scale, R}, {0.0, R}, ds);
        path.arc({0.0, 0.0}, R, kPi / 2.0, kPi, ds);
    } else {
        // L-shaped block outline with arc fillets at all six corners
        const double a = scale;
        const double b = scale / 2.0;
        const double rf = (fillet_radius < 0.0) ? scale / 8.0 : fillet_radius;
        if (!(rf > 0.0))
            throw std::invalid_argument("synthesize_track: fillet radius must be positive");
        if (hw >= 0.8 * rf)
            throw std::invalid_argument("synthesize_track: width too large for fillet radius");
        if (rf > 0.45 * b)
            throw std::invalid_argument("synthesize_track: fillet radius too large for L legs");

        // CCW outline: (0,0) (a,0) (a,b) (b,b) (b,a) (0,a); the corner at
        // (b,b) is concave.
        path.straight({rf, 0.0}, {a - rf, 0.0}, ds);
        path.arc({a - rf, rf}, rf, -kPi / 2.0, kPi / 2.0, ds);
        path.straight({a, rf}, {a, b - rf}, ds);
        path.arc({a - rf, b - rf}, rf, 0.0, kPi / 2.0, ds);
        path.straight({a - rf, b}, {b + rf, b}, ds);
        path.arc({b + rf, b + rf}, rf, -kPi / 2.0, -kPi / 2.0, ds);  // concave
        path.straight({b, b + rf}, {b, a - rf}, ds);
        path.arc({b - rf, a - rf}, rf, 0.0, kPi / 2.0, ds);
        path.straight({b - rf, a}, {rf, a}, ds);
        path.arc({rf, a - rf}, rf, kPi / 2.0, kPi / 2.0, ds);
        path.straight({0.0, a - rf}, {0.0, rf}, ds);
        path.arc({rf, rf}, rf, kPi, kPi / 2.0, ds);
    }

    Waypoints w;
    w.reserve(path.pts.size());
    for (const auto& p : path.pts) w.push_back({p.x(), p.y(), hw});
    return w;
}

Waypoints load_waypoints_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open track file: " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("empty track file: " + path);
    Waypoints w;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        Waypoint p;
        char c1, c2;
        if (!(ss >> p.x >> c1 >> p.y >> c2 >> p.half_width) || c1 != ',' || c2 != ',')
            throw std::runtime_error("malformed track row in " + path + ": " + line);
        w.push_back(p);
    }
    return w;
}

void save_waypoints_csv(const Waypoints& w, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write track file: " + path);
    f << "x,y,half_width\n";
    f.precision(17);
    for (const auto& p : w) f << p.x << ',' << p.y << ',' << p.half_width << '\n';
}

}  // namespace lmpc
