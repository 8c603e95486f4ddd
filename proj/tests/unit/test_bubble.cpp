#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bubbles/bubble.hpp"
#include "bubbles/domain.hpp"
#include "bubbles/projection.hpp"
#include "bubbles/quadrature.hpp"

using namespace bubbles;

namespace {

Point4 pt(double a, double b = 0, double c = 0, double d = 0) {
    Point4 p;
    p << a, b, c, d;
    return p;
}

// Analytic 4th derivative of 1/(A + t^2) in t, used as the oracle for the
// central-difference Laplacian error.
double quartic_derivative(double A, double t) {
    double den = A + t * t;
    return (24.0 * A * A - 240.0 * t * t * A + 120.0 * t * t * t * t) / std::pow(den, 5);
}

} // namespace

TEST_CASE("bubble values") {
    Bubble b(1.0, Point4::Zero());
    REQUIRE(b(Point4::Zero()) == Catch::Approx(2.0 * std::sqrt(2.0)).margin(1e-12));
    REQUIRE(b(pt(1.0)) == Catch::Approx(std::sqrt(2.0)).margin(1e-12));

    Bubble b2(0.37, pt(0.2, -0.1, 0.0, 0.4));
    REQUIRE(b2(b2.xi) == Catch::Approx(2.0 * std::sqrt(2.0) / 0.37).margin(1e-12));
}

TEST_CASE("scale covariance") {
    Bubble unit(1.0, Point4::Zero());
    Bubble b(0.02, pt(0.3, 0.1, -0.2, 0.0));
    Point4 y = pt(0.7, -0.4, 0.12, 0.9);
    REQUIRE(b(b.xi + b.delta * y) == Catch::Approx(unit(y) / b.delta).epsilon(1e-14));
}

TEST_CASE("discrete PDE residual is O(h^2) with the analytic error constant") {
    Bubble b(1.0, Point4::Zero());
    Point4 x = pt(0.5);
    const double h = 1e-3;
    double res = bubble_pde_residual(b, x, h);
    // predicted truncation: (h^2/12) * alpha * delta * sum_d g''''_d
    double A1 = 1.0 + x.squaredNorm() - 0.25;
    double sum4 = quartic_derivative(A1, 0.5) + 3.0 * quartic_derivative(1.25, 0.0);
    double predicted = (h * h / 12.0) * kAlpha * std::abs(sum4);
    REQUIRE(res <= 1e-4);
    REQUIRE(res == Catch::Approx(predicted).epsilon(5e-3));
}

TEST_CASE("residual halving slope is 2") {
    Bubble b(1.0, Point4::Zero());
    Point4 x = pt(0.5);
    double r1 = bubble_pde_residual(b, x, 1e-2);
    double r2 = bubble_pde_residual(b, x, 5e-3);
    double r3 = bubble_pde_residual(b, x, 2.5e-3);
    REQUIRE(r1 / r2 == Catch::Approx(4.0).epsilon(0.02));
    REQUIRE(r2 / r3 == Catch::Approx(4.0).epsilon(0.02));
}

TEST_CASE("residual decays away from the peak") {
    Bubble b(1.0, Point4::Zero());
    REQUIRE(bubble_pde_residual(b, pt(10.0), 1e-3) <= 1e-6);
}

TEST_CASE("kernel function values") {
    Bubble b(1.0, Point4::Zero());
    KernelFunction psi0(b, 0);
    REQUIRE(psi0(Point4::Zero()) == Catch::Approx(-2.0 * std::sqrt(2.0)).margin(1e-12));
    REQUIRE(psi0(pt(1.0)) == Catch::Approx(0.0).margin(1e-14)); // sign change at |y| = delta

    // psi^1 equals the centered difference of U in xi_1
    KernelFunction psi1(b, 1);
    Point4 x = pt(1.0, 0.3, -0.2, 0.1);
    const double h = 1e-5;
    Bubble bp(1.0, pt(h)), bm(1.0, pt(-h));
    double fd = (bp(x) - bm(x)) / (2.0 * h);
    REQUIRE(psi1(x) == Catch::Approx(fd).margin(1e-6));
}

TEST_CASE("whole-space integrals") {
    const double expect = 32.0 * kPi * kPi / 3.0;
    double u4 = radial_integral(RadialKind::U4);
    double g2 = radial_integral(RadialKind::GradU2);
    REQUIRE(u4 == Catch::Approx(expect).epsilon(1e-10));
    // equipartition: multiply the critical equation by U and integrate by parts
    REQUIRE(std::abs(u4 - g2) / expect <= 1e-8);

    // Beta-function value: int U^2 psi0^2 = 32 pi^2 / 15
    REQUIRE(radial_integral(RadialKind::U2Psi0Sq) ==
            Catch::Approx(32.0 * kPi * kPi / 15.0).epsilon(1e-9));
}

TEST_CASE("truncated U^2 grows like log R") {
    double v10 = radial_integral_u2(10.0);
    double v100 = radial_integral_u2(100.0);
    double v1000 = radial_integral_u2(1000.0);
    // slope 1 in log R: equal increments per decade
    double inc1 = v100 - v10;
    double inc2 = v1000 - v100;
    REQUIRE(inc1 == Catch::Approx(inc2).epsilon(0.02));
    // the per-decade increment is 16 pi^2 ln 10
    REQUIRE(inc2 == Catch::Approx(16.0 * kPi * kPi * std::log(10.0)).epsilon(0.01));
}

TEST_CASE("kernel orthogonality on the whole space by parity") {
    // int U^2 psi^0 psi^l over R^4 vanishes for l >= 1.  The angular rule is
    // sign-symmetric, so the quadrature cancels to roundoff.
    Bubble b(1.0, Point4::Zero());
    KernelFunction psi0(b, 0), psi1(b, 1);
    SphereRule sph = sphere_rule(8, 8, 8);
    Rule1D gl = gauss_legendre(12);
    double acc = 0.0;
    double prev = 0.0;
    for (double a = 0.0, w = 1.0; a < 60.0; a += w, w *= 2.0) {
        Rule1D seg = mapped(gl, a, a + w);
        for (std::size_t i = 0; i < seg.size(); ++i) {
            double r = seg.x[i];
            for (std::size_t s = 0; s < sph.size(); ++s) {
                Point4 x = r * sph.dir[s];
                double u = b(x);
                acc += seg.w[i] * r * r * r * sph.w[s] * u * u * psi0(x) * psi1(x);
            }
        }
        prev = acc;
    }
    REQUIRE(std::abs(prev) <= 1e-10);
}

TEST_CASE("projected bubble on the unit ball") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    const double delta = 1e-3;
    Bubble b(delta, Point4::Zero());

    // at the center the first-order value is dominated by U(0) = alpha/delta
    double v = projected_bubble(b, dom, Point4::Zero());
    double u0 = b(Point4::Zero());
    REQUIRE(v == Catch::Approx(u0).epsilon(1e-5));
    REQUIRE(v < u0);

    // maximum principle clamp
    for (double r : {0.0, 0.3, 0.6, 0.9, 0.99}) {
        double pu = projected_bubble(b, dom, pt(r));
        REQUIRE(pu >= 0.0);
        REQUIRE(pu <= b(pt(r)));
    }

    REQUIRE_THROWS_AS(projected_bubble(b, dom, pt(1.5)), PointOutsideDomain);
}

TEST_CASE("projected bubble nearly vanishes on the boundary") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    const double delta = 1e-2;
    Bubble b(delta, Point4::Zero());
    // U itself is ~ alpha*delta near the boundary; the projection removes the
    // leading tail, leaving O(delta^3)-size values.
    double at_boundary = projected_bubble(b, dom, pt(0.999));
    REQUIRE(std::abs(at_boundary) <= 10.0 * delta * delta * delta + 0.01 * kAlpha * delta);
    REQUIRE(std::abs(at_boundary) < 0.05 * b(pt(0.999)));
}

TEST_CASE("projected kernel expansions") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    const double delta = 1e-4;
    Bubble b(delta, Point4::Zero());

    // l = 0: boundary vanishing trend
    KernelFunction psi0(b, 0);
    double near_b = projected_kernel(psi0, dom, pt(0.99));
    double interior_scale = std::abs(projected_kernel(psi0, dom, pt(0.3)));
    REQUIRE(std::abs(near_b) < 0.05 * interior_scale);

    // l = 0 limit: P psi0 -> alpha * 4pi^2 * G(x, xi) as delta -> 0
    Point4 x = pt(0.4, 0.1, 0.0, 0.0);
    double finite = projected_kernel(psi0, dom, x);
    double limit = kAlpha * kGamma4 *
                   (gamma_fundamental(x) - dom.regular_part(x, Point4::Zero()));
    REQUIRE(finite == Catch::Approx(limit).epsilon(0.05));

    // l = 1 parity: odd under mirroring across the xi_1-plane
    KernelFunction psi1(b, 1);
    double vp = projected_kernel(psi1, dom, pt(0.25, 0.1, 0.0, 0.0));
    double vm = projected_kernel(psi1, dom, pt(-0.25, 0.1, 0.0, 0.0));
    REQUIRE(vp == Catch::Approx(-vm).epsilon(1e-6));
}

TEST_CASE("projected bubble: expansion vs grid solve") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    const double delta = 0.05;
    Bubble b(delta, Point4::Zero());
    // order-3 path solves the harmonic defect on a 16^4 grid; the two answers
    // agree up to O(delta^3) + grid error
    for (double r : {0.0, 0.35, 0.6}) {
        double o1 = projected_bubble(b, dom, pt(r), 1);
        double o3 = projected_bubble(b, dom, pt(r), 3);
        REQUIRE(o1 == Catch::Approx(o3).margin(0.05 * kAlpha * delta));
    }
}
