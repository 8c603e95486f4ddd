#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "bubbles/errors.hpp"

namespace bubbles {

inline constexpr double kPi = 3.14159265358979323846;

// Surface measure of the unit 3-sphere; the radial measure on R^4 is 2*pi^2 r^3 dr.
inline constexpr double kSurfaceS3 = 2.0 * kPi * kPi;

using Point4 = Eigen::Vector4d;

// One-dimensional quadrature rule (nodes + weights).
struct Rule1D {
    std::vector<double> x;
    std::vector<double> w;

    std::size_t size() const { return x.size(); }
};

// Gauss-Legendre rule on [-1,1], Newton iteration with Chebyshev seeds.
inline Rule1D gauss_legendre(int n) {
    Rule1D rule;
    rule.x.resize(n);
    rule.w.resize(n);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
        double p2 = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = pk;
            }
            p2 = n * (x * p1 - p0) / (x * x - 1.0); // P_n'(x)
            double dx = p1 / p2;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        rule.x[i] = -x;
        rule.x[n - 1 - i] = x;
        double w = 2.0 / ((1.0 - x * x) * p2 * p2);
        rule.w[i] = w;
        rule.w[n - 1 - i] = w;
    }
    return rule;
}

// Gauss-Chebyshev (second kind): integrates f(u)*sqrt(1-u^2) du on [-1,1].
inline Rule1D gauss_chebyshev2(int n) {
    Rule1D rule;
    rule.x.resize(n);
    rule.w.resize(n);
    for (int i = 0; i < n; ++i) {
        double t = kPi * (i + 1.0) / (n + 1.0);
        rule.x[i] = std::cos(t);
        double s = std::sin(t);
        rule.w[i] = kPi / (n + 1.0) * s * s;
    }
    return rule;
}

inline Rule1D mapped(const Rule1D& base, double a, double b) {
    Rule1D rule;
    rule.x.resize(base.size());
    rule.w.resize(base.size());
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    for (std::size_t i = 0; i < base.size(); ++i) {
        rule.x[i] = mid + half * base.x[i];
        rule.w[i] = half * base.w[i];
    }
    return rule;
}

// Quadrature on the unit sphere S^3.  Product rule: Gauss-Chebyshev-2 in
// cos(theta1) (weight sin^2), Gauss-Legendre in cos(theta2), periodic
// midpoints in phi.  Weights are positive and sum to 2*pi^2 exactly; the
// node set is symmetric under all coordinate sign flips when n_phi is even.
struct SphereRule {
    std::vector<Point4> dir;
    std::vector<double> w;

    std::size_t size() const { return dir.size(); }
};

inline SphereRule sphere_rule(int n_theta1, int n_theta2, int n_phi) {
    SphereRule rule;
    Rule1D t1 = gauss_chebyshev2(n_theta1);
    Rule1D t2 = gauss_legendre(n_theta2);
    rule.dir.reserve(static_cast<std::size_t>(n_theta1) * n_theta2 * n_phi);
    rule.w.reserve(rule.dir.capacity());
    for (int i = 0; i < n_theta1; ++i) {
        double c1 = t1.x[i];
        double s1 = std::sqrt(std::max(0.0, 1.0 - c1 * c1));
        for (int j = 0; j < n_theta2; ++j) {
            double c2 = t2.x[j];
            double s2 = std::sqrt(std::max(0.0, 1.0 - c2 * c2));
            for (int k = 0; k < n_phi; ++k) {
                double phi = 2.0 * kPi * (k + 0.5) / n_phi;
                Point4 d;
                d[0] = c1;
                d[1] = s1 * c2;
                d[2] = s1 * s2 * std::cos(phi);
                d[3] = s1 * s2 * std::sin(phi);
                rule.dir.push_back(d);
                rule.w.push_back(t1.w[i] * t2.w[j] * (2.0 * kPi / n_phi));
            }
        }
    }
    return rule;
}

// Integral of g over (r0, infinity) for g decaying like r^{-p}, p > 1.
// Dyadic panels with a power-law tail estimate; throws when the tail bound
// cannot be pushed below the tolerance.
inline double integrate_radial_tail(const std::function<double(double)>& g, double r0,
                                    double decay_p, double abs_tol, int gl_order = 16,
                                    int max_panels = 80) {
    Rule1D base = gauss_legendre(gl_order);
    double total = 0.0;
    double a = r0;
    double width = (r0 > 0.0) ? r0 : 1.0;
    for (int panel = 0; panel < max_panels; ++panel) {
        double b = a + width;
        Rule1D r = mapped(base, a, b);
        double part = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) part += r.w[i] * g(r.x[i]);
        total += part;
        double tail = std::abs(g(b)) * b / (decay_p - 1.0);
        if (tail < abs_tol && std::abs(part) < abs_tol) return total;
        a = b;
        width *= 2.0;
    }
    throw QuadratureNotConverged("radial tail estimate above tolerance after max panels");
}

// Integral of g over (0, R] using geometrically graded panels that cluster
// near an interior scale `delta` (panel breaks at delta/4, delta, 4*delta, ...).
inline double integrate_radial_graded(const std::function<double(double)>& g, double R,
                                      double delta, int gl_order = 16) {
    Rule1D base = gauss_legendre(gl_order);
    std::vector<double> breaks;
    breaks.push_back(0.0);
    double b = 0.25 * delta;
    while (b < R) {
        breaks.push_back(b);
        b *= 4.0;
    }
    breaks.push_back(R);
    double total = 0.0;
    for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
        Rule1D r = mapped(base, breaks[p], breaks[p + 1]);
        for (std::size_t i = 0; i < r.size(); ++i) total += r.w[i] * g(r.x[i]);
    }
    return total;
}

// Node/weight set over a 4-D region; weights are positive and sum to the
// region volume (up to the angular rule's resolution of the boundary map).
struct QuadratureRule {
    std::vector<Point4> nodes;
    std::vector<double> weights;

    std::size_t size() const { return nodes.size(); }

    double integrate(const std::function<double(const Point4&)>& f) const {
        double acc = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * f(nodes[i]);
        return acc;
    }

    double volume() const {
        double acc = 0.0;
        for (double w : weights) acc += w;
        return acc;
    }
};

} // namespace bubbles
