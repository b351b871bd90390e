#include "lmpc/spline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lmpc {

namespace {

// Thomas algorithm for a tridiagonal system. a: sub, b: diag, c: super.
std::vector<double> solve_tridiag(std::vector<double> a, std::vector<double> b,
                                  std::vector<double> c, std::vector<double> d) {
    const int n = static_cast<int>(b.size());
    for (int i = 1; i < n; ++i) {
        const double w = a[i] / b[i - 1];
        b[i] -= w * c[i - 1];
        d[i] -= w * d[i - 1];
    }
    std::vector<double> x(n);
    x[n - 1] = d[n - 1] / b[n - 1];
    for (int i = n - 2; i >= 0; --i) x[i] = (d[i] - c[i] * x[i + 1]) / b[i];
    return x;
}

// Cyclic tridiagonal system via Sherman-Morrison. alpha couples row 0 to
// x[n-1], beta couples row n-1 to x[0].
std::vector<double> solve_cyclic_tridiag(const std::vector<double>& a,
                                         std::vector<double> b,
                                         const std::vector<double>& c,
                                         const std::vector<double>& d,
                                         double alpha, double beta) {
    const int n = static_cast<int>(b.size());
    const double gamma = -b[0];
    std::vector<double> bb = b;
    bb[0] -= gamma;
    bb[n - 1] -= alpha * beta / gamma;

    std::vector<double> x = solve_tridiag(a, bb, c, d);

    std::vector<double> u(n, 0.0);
    u[0] = gamma;
    u[n - 1] = alpha;
    std::vector<double> z = solve_tridiag(a, bb, c, u);

    const double vx = x[0] + (beta / gamma) * x[n - 1];
    const double vz = z[0] + (beta / gamma) * z[n - 1];
    const double factor = vx / (1.0 + vz);
    for (int i = 0; i < n; ++i) x[i] -= factor * z[i];
    return x;
}

}  // namespace

CubicSpline1D::CubicSpline1D(std::vector<double> t, std::vector<double> y, Bc bc)
    : t_(std::move(t)), y_(std::move(y)), bc_(bc) {
    const int n = static_cast<int>(t_.size()) - 1;  // number of segments
    if (n < 2) throw std::invalid_argument("CubicSpline1D: need at least 3 knots");
    if (t_.size() != y_.size())
        throw std::invalid_argument("CubicSpline1D: knot/value size mismatch");
    for (int i = 0; i < n; ++i) {
        if (!(t_[i + 1] > t_[i]))
            throw std::invalid_argument("CubicSpline1D: knots must be strictly increasing");
    }
    if (bc_ == Bc::Periodic && std::abs(y_.back() - y_.front()) > 1e-9 * (1.0 + std::abs(y_.front())))
        throw std::invalid_argument("CubicSpline1D: periodic spline requires y.back() == y.front()");

    auto h = [&](int i) { return t_[i + 1] - t_[i]; };
    auto slope = [&](int i) { return (y_[i + 1] - y_[i]) / h(i); };

    m_.assign(n + 1, 0.0);
    if (bc_ == Bc::Natural) {
        if (n >= 2) {
            std::vector<double> a(n - 1), b(n - 1), c(n - 1), d(n - 1);
            for (int i = 1; i < n; ++i) {
                a[i - 1] = h(i - 1) / 6.0;
                b[i - 1] = (h(i - 1) + h(i)) / 3.0;
                c[i - 1] = h(i) / 6.0;
                d[i - 1] = slope(i) - slope(i - 1);
            }
            // natural: M_0 = M_n = 0
            const std::vector<double> m = solve_tridiag(a, b, c, d);
            for (int i = 1; i < n; ++i) m_[i] = m[i - 1];
        }
    } else {
        // unknowns M_0 .. M_{n-1}, with M_n = M_0
        std::vector<double> a(n), b(n), c(n), d(n);
        for (int i = 0; i < n; ++i) {
            const int im = (i == 0) ? n - 1 : i - 1;
            a[i] = h(im) / 6.0;
            b[i] = (h(im) + h(i)) / 3.0;
            c[i] = h(i) / 6.0;
            const double sp = slope(i);
            const double sm = (i == 0) ? slope(n - 1) : slope(i - 1);
            d[i] = sp - sm;
        }
        const std::vector<double> m = solve_cyclic_tridiag(a, b, c, d, a[0], c[n - 1]);
        for (int i = 0; i < n; ++i) m_[i] = m[i];
        m_[n] = m_[0];
    }
}

int CubicSpline1D::locate(double& t) const {
    const double t0 = t_.front();
    const double tn = t_.back();
    if (bc_ == Bc::Periodic) {
        const double period = tn - t0;
        t = t0 + std::fmod(t - t0, period);
        if (t < t0) t += period;
    }
    // natural splines extrapolate with the end segment's cubic
    auto it = std::upper_bound(t_.begin(), t_.end(), t);
    int i = static_cast<int>(it - t_.begin()) - 1;
    i = std::clamp(i, 0, static_cast<int>(t_.size()) - 2);
    return i;
}

double CubicSpline1D::eval(double t) const {
    const int i = locate(t);
    const double h = t_[i + 1] - t_[i];
    const double u = t_[i + 1] - t;
    const double w = t - t_[i];
    return m_[i] * u * u * u / (6.0 * h) + m_[i + 1] * w * w * w / (6.0 * h) +
           (y_[i] / h - m_[i] * h / 6.0) * u + (y_[i + 1] / h - m_[i + 1] * h / 6.0) * w;
}

double CubicSpline1D::deriv(double t) const {
    const int i = locate(t);
    const double h = t_[i + 1] - t_[i];
    const double u = t_[i + 1] - t;
    const double w = t - t_[i];
    return -m_[i] * u * u / (2.0 * h) + m_[i + 1] * w * w / (2.0 * h) +
           (y_[i + 1] - y_[i]) / h - (m_[i + 1] - m_[i]) * h / 6.0;
}

double CubicSpline1D::deriv2(double t) const {
    const int i = locate(t);
    const double h = t_[i + 1] - t_[i];
    const double u = t_[i + 1] - t;
    const double w = t - t_[i];
    return m_[i] * u / h + m_[i + 1] * w / h;
}

}  // namespace lmpc
