#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "bubbles/assembly.hpp"
#include "bubbles/coupling.hpp"

namespace bubbles {

// ---------------------------------------------------------------------------
// Log-log slope regression with standard error.
// ---------------------------------------------------------------------------
struct SlopeFit {
    double slope = 0.0;
    double stderr_slope = 0.0;
    double intercept = 0.0;
};

inline SlopeFit slope_regression(const std::vector<std::pair<double, double>>& points) {
    const int n = static_cast<int>(points.size());
    if (n < 3) throw DegenerateRegression("need at least 3 points");
    std::vector<double> lx(n), ly(n);
    for (int i = 0; i < n; ++i) {
        if (!(points[i].first > 0.0) || !(points[i].second > 0.0))
            throw DegenerateRegression("log-log regression needs positive data");
        lx[i] = std::log(points[i].first);
        ly[i] = std::log(points[i].second);
    }
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (int i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (sxx < 1e-14) throw DegenerateRegression("zero variance in the abscissa");
    SlopeFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss_res = 0.0;
    for (int i = 0; i < n; ++i) {
        double pred = fit.intercept + fit.slope * lx[i];
        ss_res += (ly[i] - pred) * (ly[i] - pred);
    }
    fit.stderr_slope = (n > 2) ? std::sqrt(ss_res / (n - 2) / sxx) : 0.0;
    return fit;
}

// Two-predictor log-log fit: y ~ C x1^{p1} x2^{p2}.
struct JointSlopeFit {
    double p1 = 0.0, p2 = 0.0;
    double se1 = 0.0, se2 = 0.0;
};

inline JointSlopeFit joint_slope_regression(
    const std::vector<std::tuple<double, double, double>>& points) {
    const int n = static_cast<int>(points.size());
    if (n < 4) throw DegenerateRegression("need at least 4 points for a joint fit");
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        auto [x1, x2, yy] = points[i];
        if (!(x1 > 0.0) || !(x2 > 0.0) || !(yy > 0.0))
            throw DegenerateRegression("log-log regression needs positive data");
        X(i, 0) = 1.0;
        X(i, 1) = std::log(x1);
        X(i, 2) = std::log(x2);
        y(i) = std::log(yy);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.singularValues()(2) < 1e-12 * svd.singularValues()(0))
        throw DegenerateRegression("collinear predictors in the joint fit");
    Eigen::VectorXd beta = svd.solve(y);
    Eigen::VectorXd resid = y - X * beta;
    double sigma2 = resid.squaredNorm() / std::max(n - 3, 1);
    Eigen::MatrixXd XtX_inv = (X.transpose() * X).inverse();
    JointSlopeFit fit;
    fit.p1 = beta(1);
    fit.p2 = beta(2);
    fit.se1 = std::sqrt(sigma2 * XtX_inv(1, 1));
    fit.se2 = std::sqrt(sigma2 * XtX_inv(2, 2));
    return fit;
}

// ---------------------------------------------------------------------------
// Kernel dimension of the linearized synchronized system.
//
// Diagonalizing the group linearization matrix turns the vector problem into
// scalar weighted eigenproblems  -Delta f = mu U^2 f  per spherical-harmonic
// sector; kernel elements are eigenvalues mu matching an alpha-eigenvalue.
// Sector s = 0 (radial) and s = 1 (first harmonics, shared radial operator,
// multiplicity 4) are discretized on [0, R] in conservative form with a
// decay-matched Robin condition at R; matches are counted with a Richardson
// threshold between two resolutions.
// ---------------------------------------------------------------------------
struct KernelDimensionReport {
    int radial_dim = 0;
    int angular_sector_dim = 0;
    int total = 0;
    std::vector<double> alpha_eigenvalues;
    std::vector<double> mu_radial;  // low end of the sector spectra (finer grid)
    std::vector<double> mu_angular;
};

namespace detail {

// low generalized eigenvalues of  -f'' - (3/r) f' + s(s+2)/r^2 f = mu U^2 f
inline std::vector<double> sector_spectrum(int sector, int n, double R, int count) {
    const double h = R / n;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, n);
    auto rnode = [&](int j) { return (j + 0.5) * h; };
    auto rface = [&](int j) { return (j + 1.0) * h; }; // face between j and j+1
    for (int j = 0; j < n; ++j) {
        double r = rnode(j);
        double u = kAlpha / (1.0 + r * r);
        double vol = r * r * r * h;
        if (j + 1 < n) {
            double f = std::pow(rface(j), 3) / h;
            A(j, j) += f;
            A(j + 1, j + 1) += f;
            A(j, j + 1) -= f;
            A(j + 1, j) -= f;
        } else {
            // decay-matched outflow f'(R)/f(R) = -(s+2)/R
            double rf = rface(j);
            double robin = std::pow(rf, 3) * (sector + 2.0) / R /
                           (1.0 + 0.5 * h * (sector + 2.0) / R);
            A(j, j) += robin;
        }
        A(j, j) += sector * (sector + 2.0) * r * h; // s(s+2)/r^2 * r^3 h
        W(j, j) = u * u * vol;
    }
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(A, W);
    std::vector<double> mu;
    for (int i = 0; i < std::min(count, n); ++i) mu.push_back(ges.eigenvalues()(i));
    return mu;
}

inline int count_matches(const std::vector<double>& mu_coarse,
                         const std::vector<double>& mu_fine, double target,
                         bool* ambiguous) {
    int matches = 0;
    for (double m : mu_fine) {
        // Richardson error estimate from the nearest coarse eigenvalue
        double nearest = mu_coarse.empty() ? m : mu_coarse[0];
        for (double c : mu_coarse)
            if (std::abs(c - m) < std::abs(nearest - m)) nearest = c;
        double err = std::abs(nearest - m);
        double tol = std::max(10.0 * err, 1e-6 * std::max(1.0, std::abs(target)));
        double gap = std::abs(m - target);
        if (gap <= tol) ++matches;
        else if (gap <= 3.0 * tol) *ambiguous = true;
    }
    return matches;
}

} // namespace detail

inline KernelDimensionReport kernel_dimension(const SyncProfile& profile,
                                              const CouplingModel& coupling, int resolution = 400,
                                              double R = 50.0) {
    KernelDimensionReport rep;
    Eigen::MatrixXd A = alpha_matrix(profile, coupling);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    for (int i = 0; i < A.rows(); ++i) rep.alpha_eigenvalues.push_back(es.eigenvalues()(i));

    const int keep = 8;
    auto rad_c = detail::sector_spectrum(0, resolution, R, keep);
    auto rad_f = detail::sector_spectrum(0, 2 * resolution, R, keep);
    auto ang_c = detail::sector_spectrum(1, resolution, R, keep);
    auto ang_f = detail::sector_spectrum(1, 2 * resolution, R, keep);
    rep.mu_radial = rad_f;
    rep.mu_angular = ang_f;

    bool ambiguous = false;
    for (double lam : rep.alpha_eigenvalues) {
        rep.radial_dim += detail::count_matches(rad_c, rad_f, lam, &ambiguous);
        rep.angular_sector_dim += detail::count_matches(ang_c, ang_f, lam, &ambiguous);
    }
    if (ambiguous)
        throw ResolutionTooCoarse(
            "spectral gap around an alpha-eigenvalue is below the discretization error");
    rep.total = rep.radial_dim + 4 * rep.angular_sector_dim;
    return rep;
}

// ---------------------------------------------------------------------------
// Coercivity measurement: smallest singular value of L on the bulk block.
// ---------------------------------------------------------------------------
struct CoercivityResult {
    double sigma_min_bulk = 0.0;
    double sigma_min_full = 0.0; // kernel block included
};

inline CoercivityResult coercivity_constant(const AnsatzState& state,
                                            const CouplingModel& coupling,
                                            const std::vector<SyncProfile>& profiles,
                                            const DomainModel& dom, const GalerkinBasis& basis,
                                            const Eigen::MatrixXd* L_precomputed = nullptr) {
    Eigen::MatrixXd L = L_precomputed ? *L_precomputed
                                      : assemble_L(state, coupling, profiles, dom, basis);
    const int nk = basis.n_kernel;
    const int nb = basis.n_bulk();
    CoercivityResult out;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_b(L.block(nk, nk, nb, nb));
    out.sigma_min_bulk = svd_b.singularValues()(nb - 1);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_f(L);
    out.sigma_min_full = svd_f.singularValues()(L.cols() - 1);
    return out;
}

// ---------------------------------------------------------------------------
// Claim bookkeeping: one row per verified claim with predicted value,
// measured value, tolerance and verdict.
// ---------------------------------------------------------------------------
struct ClaimRow {
    std::string name;
    std::string predicted;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string note;
};

struct VerificationReport {
    std::string title;
    std::vector<ClaimRow> rows;
    double tolerance_scale = 1.0;

    void check_abs(const std::string& name, double predicted, double measured, double tol,
                   const std::string& note = "") {
        ClaimRow row;
        row.name = name;
        std::ostringstream os;
        os << predicted;
        row.predicted = os.str();
        row.measured = measured;
        row.tolerance = tol * tolerance_scale;
        row.pass = std::abs(measured - predicted) <= row.tolerance;
        row.note = note;
        rows.push_back(std::move(row));
    }

    void check_rel(const std::string& name, double predicted, double measured, double rel_tol,
                   const std::string& note = "") {
        check_abs(name, predicted, measured, rel_tol * std::abs(predicted), note);
    }

    void check_range(const std::string& name, double measured, double lo, double hi,
                     const std::string& note = "") {
        ClaimRow row;
        row.name = name;
        std::ostringstream os;
        os << "[" << lo << ", " << hi << "]";
        row.predicted = os.str();
        row.measured = measured;
        row.tolerance = 0.0;
        row.pass = measured >= lo && measured <= hi;
        row.note = note;
        rows.push_back(std::move(row));
    }

    void check_flag(const std::string& name, bool ok, const std::string& note = "") {
        ClaimRow row;
        row.name = name;
        row.predicted = "true";
        row.measured = ok ? 1.0 : 0.0;
        row.tolerance = 0.0;
        row.pass = ok;
        row.note = note;
        rows.push_back(std::move(row));
    }

    bool all_pass() const {
        for (const auto& r : rows)
            if (!r.pass) return false;
        return true;
    }

    int failures() const {
        int n = 0;
        for (const auto& r : rows)
            if (!r.pass) ++n;
        return n;
    }
};

} // namespace bubbles
