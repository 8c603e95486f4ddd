#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <vector>

#include "bubbles/errors.hpp"
#include "bubbles/quadrature.hpp"

namespace bubbles {

// Fundamental solution of -Delta in R^4.
inline double gamma_fundamental(const Point4& z) {
    return 1.0 / (4.0 * kPi * kPi * z.squaredNorm());
}

inline constexpr double kGamma4 = 4.0 * kPi * kPi; // -Delta G = kGamma4^{-1}-normalized

enum class Shape { Ball, Box, Grid };

struct RobinCriticalPoint {
    Point4 point;
    Eigen::Vector4d hessian_eigenvalues;
    bool degenerate = false;
    double robin_value = 0.0;
    double gradient_norm = 0.0;
};

// Angular x radial resolution of the centered charts used for quadrature.
struct ChartSpec {
    int n_theta1 = 8;
    int n_theta2 = 8;
    int n_phi = 8;
    int gl_order = 10;
    double grade_start = 0.25; // first break at grade_start * delta

    static ChartSpec fine() { return ChartSpec{12, 12, 12, 12, 0.25}; }
};

namespace detail {

// -------------------------------------------------------------------------
// 4-D grid Laplace solver with Shortley-Weller boundary arms.
//
// Solves  Delta u = 0 in Omega, u = g on the boundary, on a uniform node
// grid over the bounding box.  Arms that cross the boundary are shortened
// to the true crossing (bisection on the inside predicate); the resulting
// nonsymmetric system is solved with Jacobi-preconditioned BiCGStab.
// -------------------------------------------------------------------------
class GridLaplace {
public:
    GridLaplace(std::function<bool(const Point4&)> inside, Point4 corner, Point4 extent,
                int ncells, double solver_tol = 1e-10)
        : inside_(std::move(inside)), corner_(corner), extent_(extent), n_(ncells),
          tol_(solver_tol) {
        for (int d = 0; d < 4; ++d) h_[d] = extent_[d] / n_;
        build();
    }

    int nodes_per_dim() const { return n_ + 1; }

    Point4 node(int i, int j, int k, int l) const {
        Point4 x = corner_;
        x[0] += i * h_[0];
        x[1] += j * h_[1];
        x[2] += k * h_[2];
        x[3] += l * h_[3];
        return x;
    }

    bool node_inside(std::size_t flat) const { return unknown_[flat] >= 0; }

    // Solve with Dirichlet data g; returns the field on all inside nodes.
    std::vector<double> solve(const std::function<double(const Point4&)>& g) const {
        const std::size_t nu = arms_.size();
        Eigen::VectorXd b = Eigen::VectorXd::Zero(nu);
        for (std::size_t r = 0; r < nu; ++r)
            for (const auto& bc : arms_[r].boundary)
                b(r) += bc.coeff * g(bc.point);

        Eigen::VectorXd x = bicgstab(b);

        std::vector<double> field(unknown_.size(), 0.0);
        for (std::size_t flat = 0; flat < unknown_.size(); ++flat)
            if (unknown_[flat] >= 0) field[flat] = x(unknown_[flat]);
        return field;
    }

    // Multilinear interpolation; every corner of the containing cell must be
    // an inside node (callers stay >= one cell away from the boundary).
    double interpolate(const std::vector<double>& field, const Point4& x) const {
        double t[4];
        int i0[4];
        for (int d = 0; d < 4; ++d) {
            double s = (x[d] - corner_[d]) / h_[d];
            i0[d] = std::clamp(static_cast<int>(std::floor(s)), 0, n_ - 1);
            t[d] = s - i0[d];
        }
        double acc = 0.0;
        for (int c = 0; c < 16; ++c) {
            double wgt = 1.0;
            int idx[4];
            for (int d = 0; d < 4; ++d) {
                int bit = (c >> d) & 1;
                idx[d] = i0[d] + bit;
                wgt *= bit ? t[d] : (1.0 - t[d]);
            }
            std::size_t flat = this->flat(idx[0], idx[1], idx[2], idx[3]);
            if (unknown_[flat] < 0)
                throw SolverNotConverged("grid interpolation touches a non-interior node");
            acc += wgt * field[flat];
        }
        return acc;
    }

    std::size_t flat(int i, int j, int k, int l) const {
        const std::size_t np = nodes_per_dim();
        return ((static_cast<std::size_t>(i) * np + j) * np + k) * np + l;
    }

private:
    struct BoundaryTerm {
        double coeff;
        Point4 point;
    };
    struct Row {
        double diag = 0.0;
        int neighbor[8];      // unknown index or -1
        double coeff[8];      // off-diagonal coefficients (negative)
        std::vector<BoundaryTerm> boundary;
    };

    void build() {
        const int np = nodes_per_dim();
        unknown_.assign(static_cast<std::size_t>(np) * np * np * np, -1);
        std::vector<std::array<int, 4>> coords;
        for (int i = 0; i < np; ++i)
            for (int j = 0; j < np; ++j)
                for (int k = 0; k < np; ++k)
                    for (int l = 0; l < np; ++l) {
                        Point4 x = node(i, j, k, l);
                        if (inside_(x)) {
                            unknown_[flat(i, j, k, l)] = static_cast<int>(coords.size());
                            coords.push_back({i, j, k, l});
                        }
                    }

        arms_.resize(coords.size());
        for (std::size_t r = 0; r < coords.size(); ++r) {
            auto [i, j, k, l] = coords[r];
            Point4 x = node(i, j, k, l);
            Row row;
            double arm_theta[8];
            bool arm_cut[8];
            Point4 arm_bpoint[8];
            int arm = 0;
            for (int d = 0; d < 4; ++d) {
                for (int sgn : {+1, -1}) {
                    int c[4] = {i, j, k, l};
                    c[d] += sgn;
                    double theta = 1.0;
                    int nb = -1;
                    Point4 bpoint = Point4::Zero();
                    bool cut = false;
                    if (c[d] < 0 || c[d] >= np) {
                        cut = true;
                        bpoint = x;
                        bpoint[d] += sgn * h_[d];
                    } else {
                        std::size_t f = flat(c[0], c[1], c[2], c[3]);
                        if (unknown_[f] >= 0) {
                            nb = unknown_[f];
                        } else {
                            cut = true;
                            Point4 xn = x;
                            xn[d] += sgn * h_[d];
                            theta = crossing_fraction(x, xn);
                            bpoint = x;
                            bpoint[d] += sgn * theta * h_[d];
                        }
                    }
                    row.neighbor[arm] = nb;
                    arm_theta[arm] = theta;
                    arm_cut[arm] = cut;
                    arm_bpoint[arm] = bpoint;
                    ++arm;
                }
                // combine the +/- arms of axis d (Shortley-Weller pair)
                int ap = arm - 2, am = arm - 1;
                double tp = arm_theta[ap], tm = arm_theta[am];
                double h2 = h_[d] * h_[d];
                row.diag += 2.0 / (tp * tm * h2);
                double cp = -2.0 / (tp * (tp + tm) * h2);
                double cm = -2.0 / (tm * (tp + tm) * h2);
                row.coeff[ap] = cp;
                row.coeff[am] = cm;
                if (arm_cut[ap]) row.boundary.push_back({-cp, arm_bpoint[ap]});
                if (arm_cut[am]) row.boundary.push_back({-cm, arm_bpoint[am]});
            }
            // Jacobi row scaling: short boundary arms otherwise leave the
            // system too ill-conditioned for a residual-based stop
            for (int a = 0; a < 8; ++a) row.coeff[a] /= row.diag;
            for (auto& bc : row.boundary) bc.coeff /= row.diag;
            row.diag = 1.0;
            arms_[r] = std::move(row);
        }
    }

    double crossing_fraction(const Point4& in, const Point4& out) const {
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 50; ++it) {
            double mid = 0.5 * (lo + hi);
            Point4 p = in + mid * (out - in);
            (inside_(p) ? lo : hi) = mid;
        }
        return std::max(0.5 * (lo + hi), 0.02); // keep the arm length bounded away from 0
    }

    Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
        Eigen::VectorXd y(x.size());
        for (std::size_t r = 0; r < arms_.size(); ++r) {
            const Row& row = arms_[r];
            double acc = row.diag * x(r);
            for (int a = 0; a < 8; ++a)
                if (row.neighbor[a] >= 0) acc += row.coeff[a] * x(row.neighbor[a]);
            y(r) = acc;
        }
        return y;
    }

    Eigen::VectorXd bicgstab(const Eigen::VectorXd& b) const {
        const auto n = b.size();
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd r = b - apply(x);
        Eigen::VectorXd r0 = r;
        double rho = 1.0, alpha = 1.0, omega = 1.0;
        Eigen::VectorXd v = Eigen::VectorXd::Zero(n), p = Eigen::VectorXd::Zero(n);
        const double bnorm = std::max(b.norm(), 1e-300);
        for (int it = 0; it < 4000; ++it) {
            double rho1 = r0.dot(r);
            if (std::abs(rho1) < 1e-300) break;
            double beta = (rho1 / rho) * (alpha / omega);
            rho = rho1;
            p = r + beta * (p - omega * v);
            v = apply(p);
            alpha = rho / r0.dot(v);
            Eigen::VectorXd s = r - alpha * v;
            if (s.norm() / bnorm < tol_) {
                x += alpha * p;
                return x;
            }
            Eigen::VectorXd t = apply(s);
            omega = t.dot(s) / t.dot(t);
            x += alpha * p + omega * s;
            r = s - omega * t;
            if (r.norm() / bnorm < tol_) return x;
        }
        throw SolverNotConverged("grid BiCGStab did not reach the residual tolerance");
    }

    std::function<bool(const Point4&)> inside_;
    Point4 corner_, extent_;
    int n_;
    double h_[4];
    double tol_;
    std::vector<int> unknown_;
    std::vector<Row> arms_;
};

} // namespace detail

// ---------------------------------------------------------------------------
// DomainModel: bounded domain with Green regular part H, Robin function and
// quadrature.  H is normalized against the PDE fundamental solution
// Gamma(z) = 1/(4 pi^2 |z|^2):  G = Gamma - H,  H harmonic with H = Gamma on
// the boundary.  (The projection expansions in projection.hpp carry the
// 4 pi^2 conversion to the |z|^{-2}-normalized regular part.)
// ---------------------------------------------------------------------------
class DomainModel {
public:
    Shape shape = Shape::Ball;
    double eta = 0.0; // interior margin

    static DomainModel ball(const Point4& center, double radius, double eta = -1.0) {
        DomainModel dom;
        dom.shape = Shape::Ball;
        dom.center_ = center;
        dom.radius_ = radius;
        dom.eta = (eta > 0.0) ? eta : 0.1 * dom.diameter();
        dom.default_rule_ = dom.chart({dom.centroid()}, {dom.diameter() / 16.0}, ChartSpec{});
        return dom;
    }

    static DomainModel box(const Point4& corner, const Point4& widths, double eta = -1.0) {
        DomainModel dom;
        dom.shape = Shape::Box;
        dom.corner_ = corner;
        dom.widths_ = widths;
        for (int d = 0; d < 4; ++d)
            if (!(widths[d] > 0.0)) throw Error("DomainShape", "box widths must be positive");
        dom.eta = (eta > 0.0) ? eta : 0.1 * dom.diameter();
        dom.ewald_ = std::make_shared<EwaldTable>(corner, widths);
        dom.default_rule_ = dom.chart({dom.centroid()}, {dom.diameter() / 16.0}, ChartSpec{});
        return dom;
    }

    // Grid domain from an inside predicate sampled on an ncells^4 lattice over
    // the bounding box.  The predicate also powers sub-cell boundary arms.
    static DomainModel grid(std::function<bool(const Point4&)> inside, const Point4& corner,
                            const Point4& extent, int ncells, double eta = -1.0,
                            double solver_tol = 1e-10) {
        if (ncells < 4 || ncells > 32)
            throw Error("DomainShape", "grid resolution must be between 4 and 32 cells");
        DomainModel dom;
        dom.shape = Shape::Grid;
        dom.corner_ = corner;
        dom.widths_ = extent;
        dom.inside_ = std::move(inside);
        dom.solver_ = std::make_shared<detail::GridLaplace>(dom.inside_, corner, extent,
                                                            ncells, solver_tol);
        dom.ncells_ = ncells;
        dom.eta = (eta > 0.0) ? eta : 0.1 * dom.diameter();
        dom.default_rule_ = dom.grid_rule();
        return dom;
    }

    // --- geometry -----------------------------------------------------------

    bool contains(const Point4& x) const {
        switch (shape) {
            case Shape::Ball: return (x - center_).norm() < radius_;
            case Shape::Box:
                for (int d = 0; d < 4; ++d)
                    if (x[d] <= corner_[d] || x[d] >= corner_[d] + widths_[d]) return false;
                return true;
            case Shape::Grid: return inside_(x);
        }
        return false;
    }

    Point4 centroid() const {
        switch (shape) {
            case Shape::Ball: return center_;
            default: return corner_ + 0.5 * widths_;
        }
    }

    Point4 bounding_corner() const {
        if (shape == Shape::Ball) return center_ - radius_ * Point4::Ones();
        return corner_;
    }

    Point4 bounding_extent() const {
        if (shape == Shape::Ball) return 2.0 * radius_ * Point4::Ones();
        return widths_;
    }

    double diameter() const {
        switch (shape) {
            case Shape::Ball: return 2.0 * radius_;
            default: return widths_.norm();
        }
    }

    double boundary_distance(const Point4& x) const {
        switch (shape) {
            case Shape::Ball: return radius_ - (x - center_).norm();
            case Shape::Box: {
                double d = std::numeric_limits<double>::infinity();
                for (int k = 0; k < 4; ++k) {
                    d = std::min(d, x[k] - corner_[k]);
                    d = std::min(d, corner_[k] + widths_[k] - x[k]);
                }
                return d;
            }
            case Shape::Grid: {
                // axis-direction probe; adequate for interior-margin checks
                double d = std::numeric_limits<double>::infinity();
                for (int k = 0; k < 4; ++k)
                    for (int sgn : {+1, -1}) {
                        Point4 dir = Point4::Zero();
                        dir[k] = sgn;
                        d = std::min(d, ray_exit(x, dir));
                    }
                return d;
            }
        }
        return 0.0;
    }

    double volume_exact() const {
        switch (shape) {
            case Shape::Ball: return 0.5 * kPi * kPi * std::pow(radius_, 4);
            case Shape::Box: return widths_.prod();
            case Shape::Grid: return default_rule_.volume();
        }
        return 0.0;
    }

    // Distance from x to the boundary along unit direction dir.
    double ray_exit(const Point4& x, const Point4& dir) const {
        switch (shape) {
            case Shape::Ball: {
                Point4 p = x - center_;
                double b = p.dot(dir);
                double disc = b * b - (p.squaredNorm() - radius_ * radius_);
                return -b + std::sqrt(std::max(disc, 0.0));
            }
            case Shape::Box: {
                double t = std::numeric_limits<double>::infinity();
                for (int d = 0; d < 4; ++d) {
                    if (dir[d] > 1e-15) t = std::min(t, (corner_[d] + widths_[d] - x[d]) / dir[d]);
                    else if (dir[d] < -1e-15) t = std::min(t, (corner_[d] - x[d]) / dir[d]);
                }
                return t;
            }
            case Shape::Grid: {
                double lo = 0.0, hi = widths_.norm();
                if (!inside_(x)) return 0.0;
                while (inside_(x + hi * dir) && hi < 4.0 * widths_.norm()) hi *= 2.0;
                for (int it = 0; it < 60; ++it) {
                    double mid = 0.5 * (lo + hi);
                    (inside_(x + mid * dir) ? lo : hi) = mid;
                }
                return 0.5 * (lo + hi);
            }
        }
        return 0.0;
    }

    // --- Green regular part ---------------------------------------------------

    double regular_part(const Point4& x, const Point4& y) const {
        require_inside(x, "regular_part x");
        require_inside(y, "regular_part y");
        switch (shape) {
            case Shape::Ball: return ball_H(x, y);
            case Shape::Box: return ewald_->evaluate(x, y);
            case Shape::Grid: return grid_H(x, y);
        }
        return 0.0;
    }

    // Regular part against Dirichlet data for many x at one fixed y; a single
    // grid solve serves all evaluation points.
    std::vector<double> regular_part_many(const std::vector<Point4>& xs, const Point4& y) const {
        std::vector<double> out(xs.size());
        if (shape == Shape::Grid) {
            auto field = solver_->solve([&](const Point4& b) { return gamma_fundamental(b - y); });
            for (std::size_t i = 0; i < xs.size(); ++i)
                out[i] = solver_->interpolate(field, xs[i]);
            return out;
        }
        for (std::size_t i = 0; i < xs.size(); ++i) out[i] = regular_part(xs[i], y);
        return out;
    }

    // H(x, y) together with its gradient in the source point y, vectorized
    // over x.  Ball and box use analytic derivatives; grid falls back to
    // central differences of whole-field solves.
    void regular_part_and_grad_many(const std::vector<Point4>& xs, const Point4& y,
                                    std::vector<double>& H,
                                    std::vector<Eigen::Vector4d>& dHdy) const {
        H.resize(xs.size());
        dHdy.resize(xs.size());
        switch (shape) {
            case Shape::Ball: {
                const double C = 1.0 / (4.0 * kPi * kPi * radius_ * radius_);
                Point4 yp = (y - center_) / radius_;
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    Point4 xp = (xs[i] - center_) / radius_;
                    double den = xp.squaredNorm() * yp.squaredNorm() - 2.0 * xp.dot(yp) + 1.0;
                    H[i] = C / den;
                    Eigen::Vector4d dden = (2.0 * xp.squaredNorm() * yp - 2.0 * xp) / radius_;
                    dHdy[i] = -(C / (den * den)) * dden;
                }
                return;
            }
            case Shape::Box: {
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    Eigen::Vector4d g;
                    H[i] = ewald_->evaluate_with_grad(xs[i], y, g);
                    dHdy[i] = g;
                }
                return;
            }
            case Shape::Grid: {
                H = regular_part_many(xs, y);
                const double h = 0.75 * widths_.minCoeff() / ncells_;
                std::vector<std::vector<double>> shifted(8);
                for (int d = 0; d < 4; ++d) {
                    Point4 yp = y, ym = y;
                    yp[d] += h;
                    ym[d] -= h;
                    shifted[2 * d] = regular_part_many(xs, yp);
                    shifted[2 * d + 1] = regular_part_many(xs, ym);
                }
                for (std::size_t i = 0; i < xs.size(); ++i)
                    for (int d = 0; d < 4; ++d)
                        dHdy[i][d] = (shifted[2 * d][i] - shifted[2 * d + 1][i]) / (2.0 * h);
                return;
            }
        }
    }

    double robin(const Point4& x) const {
        require_inside(x, "robin");
        if (boundary_distance(x) < eta)
            throw TooCloseToBoundary("robin evaluation requires dist(x, boundary) >= eta");
        return regular_part(x, x);
    }

    // FD steps: analytic shapes use tiny stencils; grid fields are multilinear
    // interpolants, so stencils must span at least a cell.
    double fd_gradient_step() const {
        if (shape == Shape::Grid) return 1.5 * widths_.minCoeff() / ncells_;
        return 1e-5 * diameter();
    }
    double fd_hessian_step() const {
        if (shape == Shape::Grid) return 2.0 * widths_.minCoeff() / ncells_;
        return 1e-4 * diameter();
    }

    Eigen::Vector4d robin_gradient(const Point4& x, double step = -1.0) const {
        double h = (step > 0.0) ? step : fd_gradient_step();
        Eigen::Vector4d g;
        for (int d = 0; d < 4; ++d) {
            Point4 xp = x, xm = x;
            xp[d] += h;
            xm[d] -= h;
            g[d] = (robin_unchecked(xp) - robin_unchecked(xm)) / (2.0 * h);
        }
        return g;
    }

    Eigen::Matrix4d robin_hessian(const Point4& x, double step = -1.0) const {
        double h = (step > 0.0) ? step : fd_hessian_step();
        Eigen::Matrix4d H;
        double f0 = robin_unchecked(x);
        for (int a = 0; a < 4; ++a) {
            Point4 xp = x, xm = x;
            xp[a] += h;
            xm[a] -= h;
            H(a, a) = (robin_unchecked(xp) - 2.0 * f0 + robin_unchecked(xm)) / (h * h);
            for (int b = a + 1; b < 4; ++b) {
                Point4 xpp = x, xpm = x, xmp = x, xmm = x;
                xpp[a] += h; xpp[b] += h;
                xpm[a] += h; xpm[b] -= h;
                xmp[a] -= h; xmp[b] += h;
                xmm[a] -= h; xmm[b] -= h;
                double v = (robin_unchecked(xpp) - robin_unchecked(xpm) - robin_unchecked(xmp) +
                            robin_unchecked(xmm)) / (4.0 * h * h);
                H(a, b) = H(b, a) = v;
            }
        }
        return H;
    }

    std::vector<RobinCriticalPoint> robin_critical_points(int starts, std::uint64_t seed = 2024) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double diam = diameter();
        const double margin = std::max(eta, 0.05 * diam);
        std::vector<RobinCriticalPoint> found;

        auto record = [&](const Point4& p) {
            for (const auto& cp : found)
                if ((cp.point - p).norm() < 1e-3 * diam) return;
            RobinCriticalPoint cp;
            cp.point = p;
            Eigen::Matrix4d H = robin_hessian(p);
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(H);
            cp.hessian_eigenvalues = es.eigenvalues();
            double scale = es.eigenvalues().cwiseAbs().maxCoeff();
            cp.degenerate = es.eigenvalues().cwiseAbs().minCoeff() < 1e-6 * std::max(scale, 1e-30);
            cp.robin_value = robin_unchecked(p);
            cp.gradient_norm = robin_gradient(p).norm();
            found.push_back(cp);
        };

        int survivors = 0;
        for (int s = 0; s < starts; ++s) {
            Point4 p = seed_point(rng, unif, margin);
            bool alive = (shape == Shape::Grid) ? compass_descent(p, margin)
                                                : newton_descent(p, margin, diam);
            if (alive) {
                ++survivors;
                record(p);
            }
        }
        if (survivors == 0 || found.empty())
            throw NoCriticalPointFound("no interior critical point of the Robin function located");
        std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
            return a.robin_value < b.robin_value;
        });
        return found;
    }

    // --- quadrature -----------------------------------------------------------

    // Quadrature over Omega graded at the concentration points.
    //
    // Ball: spherical charts centered at each point, radial Gauss panels
    // graded at the local scale, boundary handled exactly through the smooth
    // exit map.  Several centers are blended with a smooth partition of unity
    // (hard Voronoi caps would put kinks into the angular integrand).
    //
    // Box: dyadically refined cell rule (the box exit map has corner kinks, so
    // spherical charts lose accuracy there); cells tile the box exactly and
    // shrink geometrically toward each center.
    QuadratureRule chart(const std::vector<Point4>& centers, const std::vector<double>& deltas,
                         const ChartSpec& spec) const {
        if (shape == Shape::Grid) return grid_rule();
        if (centers.size() != deltas.size() || centers.empty())
            throw Error("ChartSpec", "centers and deltas must pair up");
        if (shape == Shape::Box) return box_cell_rule(centers, deltas, spec);
        return ball_chart_rule(centers, deltas, spec);
    }

    const QuadratureRule& default_rule() const { return default_rule_; }

    // Returns a copy whose stored rule clusters at the given centers/scales.
    DomainModel with_clusters(const std::vector<Point4>& centers,
                              const std::vector<double>& deltas,
                              const ChartSpec& spec = ChartSpec{}) const {
        DomainModel copy = *this;
        copy.default_rule_ = chart(centers, deltas, spec);
        return copy;
    }

    // --- verification oracles ---------------------------------------------------

    // Direct signed-image shell sum for the box regular part: shells of the
    // reflection lattice are added until the next shell contributes less than
    // shell_tol.  Slowly convergent; retained as an oracle for the spectral
    // evaluation path.
    double box_regular_part_direct(const Point4& x, const Point4& y, double shell_tol = 1e-10,
                                   int max_shell = 24) const {
        if (shape != Shape::Box) throw Error("DomainShape", "direct image sum is box-only");
        Point4 xl = x - corner_, yl = y - corner_;
        double acc = 0.0;
        double prev_shell = std::numeric_limits<double>::infinity();
        for (int P = 0; P <= max_shell; ++P) {
            double shell = 0.0;
            for (int n0 = -P; n0 <= P; ++n0)
                for (int n1 = -P; n1 <= P; ++n1)
                    for (int n2 = -P; n2 <= P; ++n2)
                        for (int n3 = -P; n3 <= P; ++n3) {
                            int linf = std::max({std::abs(n0), std::abs(n1), std::abs(n2),
                                                 std::abs(n3)});
                            if (linf != P) continue;
                            int n[4] = {n0, n1, n2, n3};
                            for (int sbits = 0; sbits < 16; ++sbits) {
                                if (P == 0 && sbits == 0) continue; // identity term
                                double sign = 1.0;
                                Point4 z;
                                for (int d = 0; d < 4; ++d) {
                                    double s = (sbits >> d) & 1 ? -1.0 : 1.0;
                                    if (s < 0) sign = -sign;
                                    z[d] = xl[d] - (s * yl[d] + 2.0 * n[d] * widths_[d]);
                                }
                                shell += -sign * gamma_fundamental(z);
                            }
                        }
            acc += shell;
            if (P >= 2 && std::abs(shell) < shell_tol && std::abs(prev_shell) < shell_tol)
                return acc; // H = -sum of signed images; signs folded in above
            prev_shell = shell;
        }
        std::ostringstream os;
        os << "image shells truncated at " << max_shell << " with last shell contribution "
           << prev_shell << " above tolerance " << shell_tol
           << " (tail bound ~ " << std::abs(prev_shell) * max_shell / 2.0 << ")";
        throw SeriesNotConverged(os.str());
    }

private:
    // Ewald-split evaluation of the box regular part: Gaussian-screened image
    // sum in real space plus a sine-spectral sum for the smooth remainder.
    struct EwaldTable {
        Point4 corner, L;
        double sigma;
        int kmax[4];
        double kcut2;

        EwaldTable(const Point4& c, const Point4& widths) : corner(c), L(widths) {
            sigma = widths.minCoeff() / 4.0;
            kcut2 = 34.0; // e^{-34} ~ 2e-15 spectral damping
            for (int d = 0; d < 4; ++d) {
                kmax[d] = static_cast<int>(std::ceil(std::sqrt(kcut2) * L[d] / (kPi * sigma)));
                if (kmax[d] > 64)
                    throw SeriesNotConverged("box spectral sum needs more than 64 modes per axis");
            }
        }

        double evaluate(const Point4& x, const Point4& y) const {
            return eval_impl(x, y, nullptr);
        }

        double evaluate_with_grad(const Point4& x, const Point4& y, Eigen::Vector4d& grad) const {
            return eval_impl(x, y, &grad);
        }

    private:
        // H and optionally dH/dy in one pass over images and modes.
        double eval_impl(const Point4& x, const Point4& y, Eigen::Vector4d* grad) const {
            Point4 xl = x - corner, yl = y - corner;
            const double s4 = 4.0 * sigma * sigma;
            const double rcut = 10.0 * sigma;
            const double c4 = 4.0 * kPi * kPi;
            Eigen::Vector4d g = Eigen::Vector4d::Zero();

            // smooth long-range part of Gamma at the source itself
            Point4 zself = xl - yl;
            double r2 = zself.squaredNorm();
            double acc;
            if (r2 < 1e-24) {
                acc = 1.0 / (4.0 * c4 * sigma * sigma);
                // gradient of Gamma_long vanishes at z = 0
            } else {
                double ex = std::exp(-r2 / s4);
                acc = (1.0 - ex) / (c4 * r2);
                if (grad) {
                    double fp = (ex * r2 / s4 - (1.0 - ex)) / (c4 * r2 * r2);
                    g += fp * (-2.0) * zself; // d|z|^2/dy = -2z
                }
            }

            // screened images (identity excluded)
            int nlo[4], nhi[4];
            for (int sbits = 0; sbits < 16; ++sbits) {
                double sgn[4];
                for (int d = 0; d < 4; ++d) sgn[d] = (sbits >> d) & 1 ? -1.0 : 1.0;
                double sign = sgn[0] * sgn[1] * sgn[2] * sgn[3];
                for (int d = 0; d < 4; ++d) {
                    double a = xl[d] - sgn[d] * yl[d];
                    nlo[d] = static_cast<int>(std::ceil((a - rcut) / (2.0 * L[d])));
                    nhi[d] = static_cast<int>(std::floor((a + rcut) / (2.0 * L[d])));
                }
                for (int n0 = nlo[0]; n0 <= nhi[0]; ++n0)
                    for (int n1 = nlo[1]; n1 <= nhi[1]; ++n1)
                        for (int n2 = nlo[2]; n2 <= nhi[2]; ++n2)
                            for (int n3 = nlo[3]; n3 <= nhi[3]; ++n3) {
                                if (sbits == 0 && n0 == 0 && n1 == 0 && n2 == 0 && n3 == 0)
                                    continue;
                                Point4 z;
                                z[0] = xl[0] - (sgn[0] * yl[0] + 2.0 * n0 * L[0]);
                                z[1] = xl[1] - (sgn[1] * yl[1] + 2.0 * n1 * L[1]);
                                z[2] = xl[2] - (sgn[2] * yl[2] + 2.0 * n2 * L[2]);
                                z[3] = xl[3] - (sgn[3] * yl[3] + 2.0 * n3 * L[3]);
                                double zz = z.squaredNorm();
                                if (zz > rcut * rcut) continue;
                                double ex = std::exp(-zz / s4);
                                acc -= sign * ex / (c4 * zz);
                                if (grad) {
                                    double gp = -ex * (zz / s4 + 1.0) / (c4 * zz * zz);
                                    // d z_d / dy_d = -sgn_d
                                    for (int d = 0; d < 4; ++d)
                                        g[d] -= sign * gp * 2.0 * z[d] * (-sgn[d]);
                                }
                            }
            }

            // spectral sum of the long-range periodization
            const double pref = 16.0 / (L[0] * L[1] * L[2] * L[3]);
            double four = 0.0;
            Eigen::Vector4d gfour = Eigen::Vector4d::Zero();
            for (int k0 = 1; k0 <= kmax[0]; ++k0) {
                double q0 = kPi * k0 / L[0];
                double e0 = sigma * sigma * q0 * q0;
                if (e0 > kcut2) break;
                double sx0 = std::sin(q0 * xl[0]), sy0 = std::sin(q0 * yl[0]);
                double cy0 = grad ? std::cos(q0 * yl[0]) : 0.0;
                for (int k1 = 1; k1 <= kmax[1]; ++k1) {
                    double q1 = kPi * k1 / L[1];
                    double e1 = e0 + sigma * sigma * q1 * q1;
                    if (e1 > kcut2) break;
                    double sx1 = std::sin(q1 * xl[1]), sy1 = std::sin(q1 * yl[1]);
                    double cy1 = grad ? std::cos(q1 * yl[1]) : 0.0;
                    for (int k2 = 1; k2 <= kmax[2]; ++k2) {
                        double q2 = kPi * k2 / L[2];
                        double e2 = e1 + sigma * sigma * q2 * q2;
                        if (e2 > kcut2) break;
                        double sx2 = std::sin(q2 * xl[2]), sy2 = std::sin(q2 * yl[2]);
                        double cy2 = grad ? std::cos(q2 * yl[2]) : 0.0;
                        for (int k3 = 1; k3 <= kmax[3]; ++k3) {
                            double q3 = kPi * k3 / L[3];
                            double e3 = e2 + sigma * sigma * q3 * q3;
                            if (e3 > kcut2) break;
                            double sx3 = std::sin(q3 * xl[3]), sy3 = std::sin(q3 * yl[3]);
                            double kk = q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3;
                            double damp = std::exp(-e3) / kk;
                            double xs = sx0 * sx1 * sx2 * sx3;
                            four += xs * sy0 * sy1 * sy2 * sy3 * damp;
                            if (grad) {
                                double cy3 = std::cos(q3 * yl[3]);
                                gfour[0] += xs * q0 * cy0 * sy1 * sy2 * sy3 * damp;
                                gfour[1] += xs * sy0 * q1 * cy1 * sy2 * sy3 * damp;
                                gfour[2] += xs * sy0 * sy1 * q2 * cy2 * sy3 * damp;
                                gfour[3] += xs * sy0 * sy1 * sy2 * q3 * cy3 * damp;
                            }
                        }
                    }
                }
            }
            acc -= pref * four;
            if (grad) *grad = g - pref * gfour;
            return acc;
        }
    };

    double ball_H(const Point4& x, const Point4& y) const {
        Point4 xp = (x - center_) / radius_;
        Point4 yp = (y - center_) / radius_;
        double den = xp.squaredNorm() * yp.squaredNorm() - 2.0 * xp.dot(yp) + 1.0;
        return 1.0 / (4.0 * kPi * kPi * radius_ * radius_ * den);
    }

    double grid_H(const Point4& x, const Point4& y) const {
        auto field = solver_->solve([&](const Point4& b) { return gamma_fundamental(b - y); });
        return solver_->interpolate(field, x);
    }

    double robin_unchecked(const Point4& x) const {
        switch (shape) {
            case Shape::Ball: return ball_H(x, x);
            case Shape::Box: return ewald_->evaluate(x, x);
            case Shape::Grid: return grid_H(x, x);
        }
        return 0.0;
    }

    // Damped Newton on grad r; returns false when the iterate leaves the
    // interior margin for good.
    bool newton_descent(Point4& p, double margin, double diam) const {
        for (int it = 0; it < 60; ++it) {
            Eigen::Vector4d g = robin_gradient(p);
            Eigen::Matrix4d H = robin_hessian(p);
            Eigen::Vector4d step = H.fullPivLu().solve(-g);
            if (!step.allFinite() || step.norm() > 0.25 * diam)
                step = -g * (0.05 * diam / std::max(g.norm(), 1e-30));
            double damp = 1.0;
            Point4 cand = p + damp * step;
            while ((!contains(cand) || boundary_distance(cand) < margin) && damp > 1e-4) {
                damp *= 0.5;
                cand = p + damp * step;
            }
            if (!contains(cand) || boundary_distance(cand) < margin) return false;
            double moved = (cand - p).norm();
            p = cand;
            if (moved < 1e-10 * diam) break;
        }
        return true;
    }

    // Derivative-free coordinate descent; grid Robin values come from
    // interpolated solves, so each probe is expensive and FD Newton is noisy.
    bool compass_descent(Point4& p, double margin) const {
        double step = 0.1 * diameter();
        double fbest = robin_unchecked(p);
        const double hmin = widths_.minCoeff() / std::max(ncells_, 1);
        while (step > 0.6 * hmin) {
            bool improved = false;
            for (int d = 0; d < 4; ++d)
                for (int sgn : {+1, -1}) {
                    Point4 cand = p;
                    cand[d] += sgn * step;
                    if (!contains(cand) || boundary_distance(cand) < margin) continue;
                    double f = robin_unchecked(cand);
                    if (f < fbest) {
                        fbest = f;
                        p = cand;
                        improved = true;
                    }
                }
            if (!improved) step *= 0.5;
        }
        return true;
    }

    QuadratureRule ball_chart_rule(const std::vector<Point4>& centers,
                                   const std::vector<double>& deltas,
                                   const ChartSpec& spec) const {
        QuadratureRule rule;
        SphereRule far = sphere_rule(spec.n_theta1, spec.n_theta2, spec.n_phi);
        // the concentration core is nearly radial; a low-order angular rule
        // (exact through degree-7 harmonics) suffices there
        SphereRule core = sphere_rule(4, 4, 6);
        Rule1D gl = gauss_legendre(spec.gl_order);
        const bool multi = centers.size() > 1;

        // smooth partition weights chi_h; scale tied to the center separation
        double sep = diameter();
        for (std::size_t a = 0; a < centers.size(); ++a)
            for (std::size_t b = a + 1; b < centers.size(); ++b)
                sep = std::min(sep, (centers[a] - centers[b]).norm());
        const double s2 = std::pow(0.15 * sep, 2);
        auto chi = [&](std::size_t h, const Point4& x) {
            if (!multi) return 1.0;
            double num = 0.0, den = 0.0;
            for (std::size_t k = 0; k < centers.size(); ++k) {
                double rho = std::pow(s2 + (x - centers[k]).squaredNorm(), -4.0);
                den += rho;
                if (k == h) num = rho;
            }
            return num / den;
        };

        for (std::size_t h = 0; h < centers.size(); ++h) {
            const Point4& c = centers[h];
            const double delta = deltas[h];
            double core_r = std::min({256.0 * delta, 0.05 * diameter(),
                                      0.5 * boundary_distance(c)});
            if (multi) core_r = std::min(core_r, 0.25 * sep);

            auto emit = [&](const SphereRule& sph, double r_lo, double r_hi, bool cap_by_exit) {
                for (std::size_t a = 0; a < sph.size(); ++a) {
                    const Point4& w = sph.dir[a];
                    double rout = cap_by_exit ? std::min(r_hi, ray_exit(c, w)) : r_hi;
                    double b = spec.grade_start * delta;
                    while (b <= r_lo) b *= 4.0;
                    double prev = r_lo;
                    while (prev < rout) {
                        double next = std::min(b, rout);
                        if (next > prev) {
                            Rule1D seg = mapped(gl, prev, next);
                            for (std::size_t i = 0; i < seg.size(); ++i) {
                                double r = seg.x[i];
                                Point4 x = c + r * w;
                                double wgt = seg.w[i] * r * r * r * sph.w[a] * chi(h, x);
                                if (wgt > 0.0) {
                                    rule.nodes.push_back(x);
                                    rule.weights.push_back(wgt);
                                }
                            }
                        }
                        prev = next;
                        b *= 4.0;
                    }
                }
            };

            if (core_r > 8.0 * delta * spec.grade_start) {
                emit(core, 0.0, core_r, false);
                emit(far, core_r, diameter(), true);
            } else {
                emit(far, 0.0, diameter(), true);
            }
        }
        return rule;
    }

    QuadratureRule box_cell_rule(const std::vector<Point4>& centers,
                                 const std::vector<double>& deltas,
                                 const ChartSpec& spec) const {
        QuadratureRule rule;
        Rule1D gl2 = gauss_legendre(2);
        Rule1D gl3 = gauss_legendre(3);

        // recursive dyadic refinement toward the centers
        struct Cell {
            Point4 lo, hi;
        };
        std::vector<Cell> stack{{corner_, corner_ + widths_}};
        while (!stack.empty()) {
            Cell cell = stack.back();
            stack.pop_back();
            Point4 size = cell.hi - cell.lo;
            double diag = size.norm();
            Point4 mid = 0.5 * (cell.lo + cell.hi);

            bool split = false;
            double local_scale = diameter();
            for (std::size_t h = 0; h < centers.size(); ++h) {
                // distance from the cell to the center
                double dist2 = 0.0;
                for (int d = 0; d < 4; ++d) {
                    double t = std::max({cell.lo[d] - centers[h][d], centers[h][d] - cell.hi[d], 0.0});
                    dist2 += t * t;
                }
                double dist = std::sqrt(dist2);
                double target = std::max(spec.grade_start * deltas[h], 0.5 * dist);
                local_scale = std::min(local_scale, std::max(dist, deltas[h]));
                if (diag > 4.0 * target) split = true;
            }
            if (split) {
                for (int corner = 0; corner < 16; ++corner) {
                    Cell sub;
                    for (int d = 0; d < 4; ++d) {
                        if ((corner >> d) & 1) {
                            sub.lo[d] = mid[d];
                            sub.hi[d] = cell.hi[d];
                        } else {
                            sub.lo[d] = cell.lo[d];
                            sub.hi[d] = mid[d];
                        }
                    }
                    stack.push_back(sub);
                }
                continue;
            }

            // sharper rule on the cells that resolve a peak
            const Rule1D& g = (diag < 16.0 * local_scale) ? gl3 : gl2;
            std::vector<Rule1D> per_dim(4);
            for (int d = 0; d < 4; ++d) per_dim[d] = mapped(g, cell.lo[d], cell.hi[d]);
            const std::size_t gn = g.size();
            for (std::size_t i0 = 0; i0 < gn; ++i0)
                for (std::size_t i1 = 0; i1 < gn; ++i1)
                    for (std::size_t i2 = 0; i2 < gn; ++i2)
                        for (std::size_t i3 = 0; i3 < gn; ++i3) {
                            Point4 x;
                            x << per_dim[0].x[i0], per_dim[1].x[i1], per_dim[2].x[i2],
                                per_dim[3].x[i3];
                            rule.nodes.push_back(x);
                            rule.weights.push_back(per_dim[0].w[i0] * per_dim[1].w[i1] *
                                                   per_dim[2].w[i2] * per_dim[3].w[i3]);
                        }
        }
        return rule;
    }

    QuadratureRule grid_rule() const {
        QuadratureRule rule;
        const int n = ncells_;
        Point4 h;
        for (int d = 0; d < 4; ++d) h[d] = widths_[d] / n;
        double w = h.prod();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k)
                    for (int l = 0; l < n; ++l) {
                        Point4 c = corner_;
                        c[0] += (i + 0.5) * h[0];
                        c[1] += (j + 0.5) * h[1];
                        c[2] += (k + 0.5) * h[2];
                        c[3] += (l + 0.5) * h[3];
                        if (inside_(c)) {
                            rule.nodes.push_back(c);
                            rule.weights.push_back(w);
                        }
                    }
        return rule;
    }

    void require_inside(const Point4& x, const char* who) const {
        if (!contains(x)) {
            std::ostringstream os;
            os << who << ": point (" << x.transpose() << ") is outside the domain";
            throw PointOutsideDomain(os.str());
        }
    }

    Point4 seed_point(std::mt19937_64& rng, std::uniform_real_distribution<double>& unif,
                      double margin) const {
        for (int tries = 0; tries < 4096; ++tries) {
            Point4 p;
            if (shape == Shape::Ball) {
                for (int d = 0; d < 4; ++d) p[d] = center_[d] + radius_ * (2.0 * unif(rng) - 1.0);
            } else {
                for (int d = 0; d < 4; ++d) p[d] = corner_[d] + widths_[d] * unif(rng);
            }
            if (contains(p) && boundary_distance(p) >= margin) return p;
        }
        throw NoCriticalPointFound("could not seed the interior region");
    }

    // ball
    Point4 center_ = Point4::Zero();
    double radius_ = 1.0;
    // box / grid bounding box
    Point4 corner_ = Point4::Zero();
    Point4 widths_ = Point4::Ones();
    // grid
    std::function<bool(const Point4&)> inside_;
    std::shared_ptr<detail::GridLaplace> solver_;
    int ncells_ = 0;
    // box spectral table
    std::shared_ptr<EwaldTable> ewald_;

    QuadratureRule default_rule_;
};

inline double omega_quadrature(const DomainModel& dom,
                               const std::function<double(const Point4&)>& f) {
    return dom.default_rule().integrate(f);
}

} // namespace bubbles
