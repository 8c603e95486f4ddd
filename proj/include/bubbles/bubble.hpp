#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>

#include "bubbles/errors.hpp"
#include "bubbles/quadrature.hpp"

namespace bubbles {

// Normalization of the standard bubble in R^4.
inline constexpr double kAlpha = 2.0 * 1.41421356237309504880; // 2*sqrt(2)

// Positive solution of -Delta U = U^3 on R^4, peaked at xi with width delta:
//   U(x) = alpha * delta / (delta^2 + |x - xi|^2).
struct Bubble {
    double delta = 1.0;
    Point4 xi = Point4::Zero();

    Bubble() = default;
    Bubble(double d, const Point4& center) : delta(d), xi(center) {}

    double operator()(const Point4& x) const {
        const double r2 = (x - xi).squaredNorm();
        return kAlpha * delta / (delta * delta + r2);
    }
};

inline double eval_bubble(const Bubble& b, const Point4& x) { return b(x); }

// Elements of the 5-dimensional kernel of the linearization -Delta psi = 3 U^2 psi:
// index 0 is the delta-derivative, indices 1..4 the center derivatives.
struct KernelFunction {
    Bubble bubble;
    int index = 0; // 0..4

    KernelFunction() = default;
    KernelFunction(const Bubble& b, int ell) : bubble(b), index(ell) {
        if (ell < 0 || ell > 4) throw Error("KernelIndex", "kernel index must be in 0..4");
    }

    double operator()(const Point4& x) const {
        const Point4 z = x - bubble.xi;
        const double d = bubble.delta;
        const double den = d * d + z.squaredNorm();
        if (index == 0) return kAlpha * (z.squaredNorm() - d * d) / (den * den);
        return 2.0 * kAlpha * d * z[index - 1] / (den * den);
    }
};

inline double eval_kernel(const KernelFunction& k, const Point4& x) { return k(x); }

// |(-Delta_h U)(x) - U(x)^3| with the 2nd-order central-difference Laplacian
// in all four coordinates; O(h^2) by construction.
inline double bubble_pde_residual(const Bubble& b, const Point4& x, double h) {
    double lap = 0.0;
    const double center = b(x);
    for (int d = 0; d < 4; ++d) {
        Point4 xp = x, xm = x;
        xp[d] += h;
        xm[d] -= h;
        lap += b(xp) + b(xm) - 2.0 * center;
    }
    lap /= h * h;
    return std::abs(-lap - center * center * center);
}

// Whole-space radial integrals of bubble expressions (delta = 1 scale; all of
// them are scale-invariant except U2, which diverges logarithmically and is
// only available truncated at a finite radius).
enum class RadialKind { U4, GradU2, U2Psi0Sq };

inline double radial_integral(RadialKind kind, double abs_tol = 1e-10) {
    auto u = [](double r) { return kAlpha / (1.0 + r * r); };
    std::function<double(double)> g;
    double decay_p = 5.0;
    switch (kind) {
        case RadialKind::U4:
            g = [&u](double r) {
                double v = u(r);
                return kSurfaceS3 * r * r * r * v * v * v * v;
            };
            decay_p = 5.0;
            break;
        case RadialKind::GradU2:
            // |grad U|^2 = 4 alpha^2 r^2 / (1+r^2)^4
            g = [](double r) {
                double den = 1.0 + r * r;
                double gr2 = 4.0 * kAlpha * kAlpha * r * r / (den * den * den * den);
                return kSurfaceS3 * r * r * r * gr2;
            };
            decay_p = 3.0;
            break;
        case RadialKind::U2Psi0Sq: {
            g = [&u](double r) {
                double v = u(r);
                double den = 1.0 + r * r;
                double psi0 = kAlpha * (r * r - 1.0) / (den * den);
                return kSurfaceS3 * r * r * r * v * v * psi0 * psi0;
            };
            decay_p = 5.0;
            break;
        }
    }
    return integrate_radial_tail(g, 0.0, decay_p, abs_tol);
}

// Truncated \int_{B_R} U^2 (delta = 1); grows like log R.
inline double radial_integral_u2(double R) {
    auto g = [](double r) {
        double v = kAlpha / (1.0 + r * r);
        return kSurfaceS3 * r * r * r * v * v;
    };
    return integrate_radial_graded(g, R, 1.0, 16);
}

// \int_{B_R} U^2 w(r) for a user weight.
inline double radial_integral_u2_weighted(const std::function<double(double)>& w, double R) {
    auto g = [&w](double r) {
        double v = kAlpha / (1.0 + r * r);
        return kSurfaceS3 * r * r * r * v * v * w(r);
    };
    return integrate_radial_graded(g, R, 1.0, 16);
}

} // namespace bubbles
