#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "bubbles/bubble.hpp"
#include "bubbles/errors.hpp"

namespace bubbles {

// Symmetric coupling matrix beta plus the group decomposition
// 0 = l_0 < l_1 < ... < l_q = m.  Group h (0-based) owns the component
// indices {l_h, ..., l_{h+1}-1} (0-based).
struct CouplingModel {
    int m = 0;
    Eigen::MatrixXd beta;
    std::vector<int> decomposition;

    int group_count() const { return static_cast<int>(decomposition.size()) - 1; }

    std::vector<int> group(int h) const {
        std::vector<int> idx;
        for (int i = decomposition[h]; i < decomposition[h + 1]; ++i) idx.push_back(i);
        return idx;
    }

    int group_of(int component) const {
        for (int h = 0; h < group_count(); ++h)
            if (component >= decomposition[h] && component < decomposition[h + 1]) return h;
        return -1;
    }

    Eigen::MatrixXd group_matrix(int h) const {
        const int lo = decomposition[h];
        const int n = decomposition[h + 1] - lo;
        return beta.block(lo, lo, n, n);
    }

    // Largest cross-group coupling entry, -inf when q == 1.
    double beta_star() const {
        double bs = -std::numeric_limits<double>::infinity();
        for (int h = 0; h < group_count(); ++h)
            for (int k = 0; k < group_count(); ++k) {
                if (h == k) continue;
                for (int i : group(h))
                    for (int j : group(k)) bs = std::max(bs, beta(i, j));
            }
        return bs;
    }

    void validate() const {
        if (m <= 0) throw MalformedDecomposition("component count must be positive");
        if (beta.rows() != m || beta.cols() != m)
            throw MalformedDecomposition("beta must be m x m");
        for (int i = 0; i < m; ++i) {
            if (!(beta(i, i) > 0.0))
                throw MalformedDecomposition("diagonal entries beta_ii must be positive");
            for (int j = 0; j < m; ++j)
                if (beta(i, j) != beta(j, i))
                    throw MalformedDecomposition("beta must be symmetric as stored");
        }
        if (decomposition.size() < 2 || decomposition.front() != 0 ||
            decomposition.back() != m)
            throw MalformedDecomposition("decomposition must run from 0 to m");
        for (std::size_t i = 0; i + 1 < decomposition.size(); ++i)
            if (decomposition[i] >= decomposition[i + 1])
                throw MalformedDecomposition("decomposition must be strictly increasing");
    }
};

// Per-group synchronized-solution data: positive coefficients c solving
// sum_j beta_ij c_j^2 = 1 over the group, and the unit eigenvector of the
// linearization matrix for the eigenvalue 3.
struct SyncProfile {
    int group = 0;
    Eigen::VectorXd c;
    Eigen::VectorXd e;
    double eigenvalue_residual = 0.0;
};

// Condition-number threshold below which a group matrix counts as invertible.
inline constexpr double kInvertibleCondThreshold = 1e12;

// Absolute matching tolerance for "an eigenvalue equal to 3".
inline constexpr double kEigenvalueThreeTol = 1e-8;

inline std::vector<std::vector<int>> validate_decomposition(const CouplingModel& model) {
    model.validate();
    std::vector<std::vector<int>> groups;
    for (int h = 0; h < model.group_count(); ++h) groups.push_back(model.group(h));
    return groups;
}

// Solves the group system sum_j beta_ij s_j = 1 in s_j = c_j^2.  The system
// is linear in the squares, so no iteration is needed; positivity of every
// s_j is exactly the solvability assumption on this group.
inline SyncProfile solve_sync_coefficients(const CouplingModel& model, int h) {
    model.validate();
    Eigen::MatrixXd B = model.group_matrix(h);
    const int n = static_cast<int>(B.rows());

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(n - 1);
    Eigen::VectorXd rhs = Eigen::VectorXd::Ones(n);
    if (!(smin > 0.0) || smax / smin > kInvertibleCondThreshold) {
        // rank-deficient: distinguish an inconsistent system (no solution at
        // all, so the solvability assumption fails) from an underdetermined one
        Eigen::VectorXd ls = svd.solve(rhs);
        if ((B * ls - rhs).norm() > 1e-10 * rhs.norm()) {
            std::ostringstream os;
            os << "group " << h << ": linear system in the squared coefficients is inconsistent";
            throw NoPositiveSolution(os.str());
        }
        std::ostringstream os;
        os << "group " << h << " coupling matrix is numerically singular (cond ";
        os << (smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity()) << ")";
        throw SingularGroupMatrix(os.str());
    }

    Eigen::VectorXd s = svd.solve(rhs);
    for (int i = 0; i < n; ++i) {
        if (!(s(i) > 0.0)) {
            std::ostringstream os;
            os << "group " << h << ": c_" << i << "^2 = " << s(i) << " is not positive";
            throw NoPositiveSolution(os.str());
        }
    }

    SyncProfile profile;
    profile.group = h;
    profile.c = s.array().sqrt();
    return profile;
}

// (A2) gate: group matrix invertible with all entries positive.
inline std::pair<bool, std::string> check_A2(const CouplingModel& model, int h) {
    model.validate();
    Eigen::MatrixXd B = model.group_matrix(h);
    const int n = static_cast<int>(B.rows());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (!(B(i, j) > 0.0)) {
                std::ostringstream os;
                os << "entry (" << i << "," << j << ") = " << B(i, j) << " not positive";
                return {false, os.str()};
            }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(B);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(n - 1);
    if (!(smin > 0.0) || smax / smin > kInvertibleCondThreshold) {
        std::ostringstream os;
        os << "condition number " << (smin > 0.0 ? smax / smin : 0.0) << " beyond threshold";
        return {false, os.str()};
    }
    return {true, "invertible, entries positive"};
}

// Matrix of the group linearization around the synchronized solution:
//   a_ii = 3 beta_ii c_i^2 + sum_{j != i} beta_ij c_j^2,   a_ij = 2 beta_ij c_i c_j.
inline Eigen::MatrixXd alpha_matrix(const SyncProfile& profile, const CouplingModel& model) {
    Eigen::MatrixXd B = model.group_matrix(profile.group);
    const int n = static_cast<int>(B.rows());
    Eigen::MatrixXd A(n, n);
    for (int i = 0; i < n; ++i) {
        double diag = 3.0 * B(i, i) * profile.c(i) * profile.c(i);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            diag += B(i, j) * profile.c(j) * profile.c(j);
            A(i, j) = 2.0 * B(i, j) * profile.c(i) * profile.c(j);
        }
        A(i, i) = diag;
    }
    return A;
}

// Unit eigenvector for the eigenvalue closest to 3, with sign fixed so the
// first nonzero entry is positive.  Residual is ||A e - 3 e||_2.
inline std::pair<Eigen::VectorXd, double> group_eigenvector(const Eigen::MatrixXd& A) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    int best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (int i = 0; i < A.rows(); ++i) {
        double gap = std::abs(es.eigenvalues()(i) - 3.0);
        if (gap < best_gap) {
            best_gap = gap;
            best = i;
        }
    }
    if (best_gap > kEigenvalueThreeTol) {
        std::ostringstream os;
        os << "closest eigenvalue to 3 is " << es.eigenvalues()(best)
           << "; coupling data inconsistent with the synchronized linearization";
        throw EigenvalueThreeMissing(os.str());
    }
    Eigen::VectorXd e = es.eigenvectors().col(best);
    for (int i = 0; i < e.size(); ++i) {
        if (std::abs(e(i)) > 1e-14) {
            if (e(i) < 0.0) e = -e;
            break;
        }
    }
    double residual = (A * e - 3.0 * e).norm();
    return {e, residual};
}

// Full profile for one group: coefficients, eigenvector, residual.
inline SyncProfile make_sync_profile(const CouplingModel& model, int h) {
    SyncProfile profile = solve_sync_coefficients(model, h);
    auto [e, residual] = group_eigenvector(alpha_matrix(profile, model));
    profile.e = e;
    profile.eigenvalue_residual = residual;
    return profile;
}

inline std::vector<SyncProfile> make_all_profiles(const CouplingModel& model) {
    std::vector<SyncProfile> out;
    for (int h = 0; h < model.group_count(); ++h) out.push_back(make_sync_profile(model, h));
    return out;
}

// Pointwise defect of the synchronized solution W_i = c_i U against its PDE,
// evaluated with the analytic Laplacian (-Delta U = U^3):
//   max_i | c_i U^3 - c_i U^3 sum_j beta_ij c_j^2 | = |U^3| max_i |c_i| |1 - row_i|.
inline double synchronized_residual(const SyncProfile& profile, const CouplingModel& model,
                                    const Point4& x) {
    Bubble u(1.0, Point4::Zero());
    const double u3 = std::pow(u(x), 3);
    Eigen::MatrixXd B = model.group_matrix(profile.group);
    double worst = 0.0;
    for (int i = 0; i < B.rows(); ++i) {
        double row = 0.0;
        for (int j = 0; j < B.cols(); ++j) row += B(i, j) * profile.c(j) * profile.c(j);
        worst = std::max(worst, std::abs(profile.c(i) * u3 * (1.0 - row)));
    }
    return worst;
}

} // namespace bubbles
