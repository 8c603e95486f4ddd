#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <vector>

#include "bubbles/coupling.hpp"
#include "bubbles/domain.hpp"
#include "bubbles/projection.hpp"

namespace bubbles {

// ---------------------------------------------------------------------------
// AnsatzState: per-group rates d_h, centers xi_h and per-component lambda_i,
// with the concentration scales delta_h = exp(-d_h / lambda*_h).
// Scaling studies construct states from explicit delta grids instead; the
// geometric constraints of X_eta (interior margin, pairwise separation) are
// enforced either way, the d-range only on the rate-driven path.
// ---------------------------------------------------------------------------
struct AnsatzState {
    std::vector<double> lambda;      // per component
    std::vector<double> d;           // per group (empty for explicit-delta states)
    std::vector<Point4> xi;          // per group
    std::vector<double> delta;       // per group
    std::vector<double> lambda_star; // per group
    double eta = 0.1;

    int groups() const { return static_cast<int>(xi.size()); }
};

inline constexpr double kDeltaFloor = 1e-6;

namespace detail {

inline void check_geometry(const DomainModel& dom, const std::vector<Point4>& xi,
                           double eta) {
    for (std::size_t h = 0; h < xi.size(); ++h) {
        if (!dom.contains(xi[h]) || dom.boundary_distance(xi[h]) < eta) {
            std::ostringstream os;
            os << "center " << h << " violates dist(xi, boundary) >= eta";
            throw ExitedXeta(os.str());
        }
        for (std::size_t k = h + 1; k < xi.size(); ++k)
            if ((xi[h] - xi[k]).norm() < eta) {
                std::ostringstream os;
                os << "centers " << h << " and " << k << " closer than eta";
                throw ExitedXeta(os.str());
            }
    }
}

inline std::vector<double> group_lambda_star(const CouplingModel& coupling,
                                             const std::vector<double>& lambda) {
    std::vector<double> ls(coupling.group_count(), 0.0);
    for (int h = 0; h < coupling.group_count(); ++h)
        for (int i : coupling.group(h)) ls[h] = std::max(ls[h], lambda[i]);
    return ls;
}

} // namespace detail

inline AnsatzState make_state_from_rates(const DomainModel& dom, const CouplingModel& coupling,
                                         const std::vector<double>& d,
                                         const std::vector<Point4>& xi,
                                         const std::vector<double>& lambda,
                                         double delta_floor = kDeltaFloor) {
    const int q = coupling.group_count();
    if (static_cast<int>(d.size()) != q || static_cast<int>(xi.size()) != q ||
        static_cast<int>(lambda.size()) != coupling.m)
        throw Error("AnsatzState", "rate/center/lambda sizes must match the decomposition");
    AnsatzState st;
    st.eta = dom.eta;
    st.lambda = lambda;
    st.d = d;
    st.xi = xi;
    st.lambda_star = detail::group_lambda_star(coupling, lambda);
    detail::check_geometry(dom, xi, st.eta);
    st.delta.resize(q);
    for (int h = 0; h < q; ++h) {
        if (!(d[h] > st.eta) || !(d[h] < 1.0 / st.eta))
            throw ExitedXeta("rate d_h outside (eta, 1/eta)");
        if (!(st.lambda_star[h] > 0.0))
            throw Error("AnsatzState", "rate-driven states need a positive lambda in each group");
        st.delta[h] = std::max(std::exp(-d[h] / st.lambda_star[h]), delta_floor);
    }
    return st;
}

inline AnsatzState make_state_from_scales(const DomainModel& dom, const CouplingModel& coupling,
                                          const std::vector<double>& delta,
                                          const std::vector<Point4>& xi,
                                          const std::vector<double>& lambda) {
    const int q = coupling.group_count();
    if (static_cast<int>(delta.size()) != q || static_cast<int>(xi.size()) != q ||
        static_cast<int>(lambda.size()) != coupling.m)
        throw Error("AnsatzState", "scale/center/lambda sizes must match the decomposition");
    AnsatzState st;
    st.eta = dom.eta;
    st.lambda = lambda;
    st.xi = xi;
    st.delta = delta;
    st.lambda_star = detail::group_lambda_star(coupling, lambda);
    detail::check_geometry(dom, xi, st.eta);
    for (int h = 0; h < q; ++h)
        if (!(delta[h] > 0.0) || !(delta[h] < 1.0))
            throw Error("AnsatzState", "explicit scales must lie in (0, 1)");
    return st;
}

// ---------------------------------------------------------------------------
// GalerkinBasis: per group, the 5 kernel vector-functions e_h * P psi^l at
// scale delta_h, plus a bulk block of projected bubble profiles at dyadic
// auxiliary scales and first-harmonic profiles, in the group eigendirection
// and its orthogonal complement.  Orthonormalized in the H^1_0 gram with the
// kernel block leading.
// ---------------------------------------------------------------------------
struct BasisOptions {
    int j_scales = 4;   // PU at delta * 2^{+-j}, j = 1..j_scales
    ChartSpec chart;
    double drop_tol = 1e-12; // relative gram eigenvalue below which a bulk direction is dropped
};

struct RawBasisFunction {
    int group = 0;        // component group the function lives in
    int center_group = 0; // group whose center/scale carries the profile
    Eigen::VectorXd dir;  // weights over the components of the group
    bool is_pu = true;
    int ell = 0;
    double scale = 1.0;
    bool in_kernel = false;
};

class GalerkinBasis {
public:
    std::vector<RawBasisFunction> funcs;
    QuadratureRule rule;
    Eigen::MatrixXd prof;     // nodes x nf raw scalar profiles
    Eigen::MatrixXd pu;       // nodes x q projected bubbles at the state scales
    Eigen::MatrixXd ub;       // nodes x q unprojected bubbles
    Eigen::MatrixXd gram;     // raw H^1 gram (symmetrized)
    Eigen::MatrixXd T;        // raw -> orthonormal transform, kernel columns first
    int n_kernel = 0;
    double gram_asymmetry = 0.0;
    int dropped_directions = 0;

    // state snapshot
    std::vector<double> delta_snap;
    std::vector<Point4> xi_snap;
    std::vector<double> lambda_snap;

    int n_raw() const { return static_cast<int>(funcs.size()); }
    int n_ortho() const { return static_cast<int>(T.cols()); }
    int n_bulk() const { return n_ortho() - n_kernel; }

    void check_state(const AnsatzState& state) const {
        bool ok = state.delta == delta_snap && state.lambda == lambda_snap &&
                  state.xi.size() == xi_snap.size();
        if (ok)
            for (std::size_t h = 0; h < xi_snap.size(); ++h)
                if ((state.xi[h] - xi_snap[h]).norm() > 0.0) ok = false;
        if (!ok) throw BasisStateMismatch("basis was built for a different ansatz state");
    }

    // component-i field of the orthonormal function p at all nodes
    Eigen::VectorXd ortho_component_field(int p, int i, const CouplingModel& coupling) const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(prof.rows());
        for (int f = 0; f < n_raw(); ++f) {
            if (T(f, p) == 0.0) continue;
            const auto& bf = funcs[f];
            auto idx = coupling.group(bf.group);
            for (std::size_t a = 0; a < idx.size(); ++a)
                if (idx[a] == i) out += T(f, p) * bf.dir(a) * prof.col(f);
        }
        return out;
    }

    // pointwise fields phi_i(nodes) of a coefficient vector in ortho coords
    Eigen::MatrixXd coefficient_fields(const Eigen::VectorXd& coeff,
                                       const CouplingModel& coupling) const {
        Eigen::VectorXd raw = T * coeff;
        Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(prof.rows(), coupling.m);
        for (int f = 0; f < n_raw(); ++f) {
            if (raw(f) == 0.0) continue;
            const auto& bf = funcs[f];
            auto idx = coupling.group(bf.group);
            for (std::size_t a = 0; a < idx.size(); ++a)
                if (bf.dir(a) != 0.0) phi.col(idx[a]) += raw(f) * bf.dir(a) * prof.col(f);
        }
        return phi;
    }
};

inline GalerkinBasis build_basis(const AnsatzState& state, const CouplingModel& coupling,
                                 const std::vector<SyncProfile>& profiles, const DomainModel& dom,
                                 const BasisOptions& opts = BasisOptions{}) {
    const int q = coupling.group_count();
    GalerkinBasis basis;
    basis.rule = dom.chart(state.xi, state.delta, opts.chart);
    const std::size_t nn = basis.rule.size();

    // enumerate raw functions
    for (int h = 0; h < q; ++h) {
        const int nh = static_cast<int>(coupling.group(h).size());
        Eigen::VectorXd e = profiles[h].e;

        // orthonormal complement of e within the group
        Eigen::MatrixXd comp(nh, std::max(nh - 1, 0));
        {
            Eigen::MatrixXd M = Eigen::MatrixXd::Identity(nh, nh) - e * e.transpose();
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU);
            comp = svd.matrixU().leftCols(nh - 1);
        }

        auto add = [&](const Eigen::VectorXd& dir, bool is_pu, int ell, double scale,
                       bool kernel, int center_group) {
            RawBasisFunction f;
            f.group = h;
            f.center_group = center_group;
            f.dir = dir;
            f.is_pu = is_pu;
            f.ell = ell;
            f.scale = scale;
            f.in_kernel = kernel;
            basis.funcs.push_back(std::move(f));
        };

        const double dh = state.delta[h];
        for (int ell = 0; ell <= 4; ++ell) add(e, false, ell, dh, true, h);
        for (int j = -opts.j_scales; j <= opts.j_scales; ++j)
            add(e, true, 0, dh * std::pow(2.0, j), false, h);
        for (double s : {0.5 * dh, 2.0 * dh})
            for (int ell = 0; ell <= 4; ++ell) add(e, false, ell, s, false, h);
        for (int p = 0; p + 1 < nh; ++p) {
            Eigen::VectorXd v = comp.col(p);
            for (int j = -1; j <= 1; ++j) add(v, true, 0, dh * std::pow(2.0, j), false, h);
            for (int ell = 0; ell <= 4; ++ell) add(v, false, ell, dh, false, h);
        }
        // visitor profiles at the other groups' centers: these span the
        // directions where cooperative cross-couplings destroy coercivity
        for (int k = 0; k < q; ++k) {
            if (k == h) continue;
            const double dk = state.delta[k];
            for (int j = -1; j <= 1; ++j) add(e, true, 0, dk * std::pow(2.0, j), false, k);
            add(e, false, 0, dk, false, k);
        }
    }
    const int nf = basis.n_raw();

    // profile values and -Delta densities; H and dH/dy fields per group serve
    // every scale at that center
    basis.prof.resize(nn, nf);
    Eigen::MatrixXd dens(nn, nf);
    basis.pu.resize(nn, q);
    basis.ub.resize(nn, q);

    std::vector<std::vector<double>> Hf(q);
    std::vector<std::vector<Eigen::Vector4d>> dHf(q);
    for (int h = 0; h < q; ++h)
        dom.regular_part_and_grad_many(basis.rule.nodes, state.xi[h], Hf[h], dHf[h]);

    for (int h = 0; h < q; ++h) {
        Bubble bh(state.delta[h], state.xi[h]);
        for (std::size_t n = 0; n < nn; ++n) {
            double u = bh(basis.rule.nodes[n]);
            basis.ub(n, h) = u;
            basis.pu(n, h) =
                std::clamp(u - kAlpha * kGamma4 * state.delta[h] * Hf[h][n], 0.0, u);
        }
    }

    for (int f = 0; f < nf; ++f) {
        const auto& bf = basis.funcs[f];
        Bubble bb(bf.scale, state.xi[bf.center_group]);
        const auto& H = Hf[bf.center_group];
        const auto& dH = dHf[bf.center_group];
        if (bf.is_pu) {
            for (std::size_t n = 0; n < nn; ++n) {
                double u = bb(basis.rule.nodes[n]);
                basis.prof(n, f) = std::clamp(u - kAlpha * kGamma4 * bf.scale * H[n], 0.0, u);
                dens(n, f) = u * u * u;
            }
        } else {
            KernelFunction k(bb, bf.ell);
            for (std::size_t n = 0; n < nn; ++n) {
                double psi = k(basis.rule.nodes[n]);
                double corr = (bf.ell == 0)
                                  ? kAlpha * kGamma4 * H[n]
                                  : kAlpha * kGamma4 * bf.scale * dH[n][bf.ell - 1];
                basis.prof(n, f) = psi - corr;
                double u = bb(basis.rule.nodes[n]);
                dens(n, f) = 3.0 * u * u * psi;
            }
        }
    }

    // H^1 gram: <phi_a, phi_b> = (dir_a . dir_b) * int dens_a prof_b
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(basis.rule.weights.data(), nn);
    Eigen::MatrixXd scalar_gram = dens.transpose() * w.asDiagonal() * basis.prof;
    Eigen::MatrixXd G(nf, nf);
    for (int a = 0; a < nf; ++a)
        for (int b = 0; b < nf; ++b) {
            if (basis.funcs[a].group != basis.funcs[b].group) {
                G(a, b) = 0.0;
                continue;
            }
            G(a, b) = basis.funcs[a].dir.dot(basis.funcs[b].dir) * scalar_gram(a, b);
        }
    basis.gram_asymmetry = (G - G.transpose()).norm() / std::max(G.norm(), 1e-300);
    basis.gram = 0.5 * (G + G.transpose());

    // orthonormalize per group, kernel block first
    std::vector<Eigen::VectorXd> kernel_cols, bulk_cols;
    for (int h = 0; h < q; ++h) {
        std::vector<int> kidx, bidx;
        for (int f = 0; f < nf; ++f) {
            if (basis.funcs[f].group != h) continue;
            (basis.funcs[f].in_kernel ? kidx : bidx).push_back(f);
        }
        const int nk = static_cast<int>(kidx.size());
        const int nb = static_cast<int>(bidx.size());

        Eigen::MatrixXd Gkk(nk, nk);
        for (int a = 0; a < nk; ++a)
            for (int b = 0; b < nk; ++b) Gkk(a, b) = basis.gram(kidx[a], kidx[b]);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esk(Gkk);
        if (esk.eigenvalues().minCoeff() < 1e-10 * esk.eigenvalues().maxCoeff())
            throw Error("KernelBlock", "kernel block of the basis is numerically dependent");
        Eigen::MatrixXd Tk =
            esk.eigenvectors() * esk.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();

        std::vector<Eigen::VectorXd> group_kernel;
        for (int c = 0; c < nk; ++c) {
            Eigen::VectorXd col = Eigen::VectorXd::Zero(nf);
            for (int a = 0; a < nk; ++a) col(kidx[a]) = Tk(a, c);
            group_kernel.push_back(col);
        }

        // project bulk off the kernel block, then orthonormalize the rest
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(nf, nb);
        for (int c = 0; c < nb; ++c) {
            Eigen::VectorXd col = Eigen::VectorXd::Zero(nf);
            col(bidx[c]) = 1.0;
            for (const auto& kcol : group_kernel)
                col -= kcol * (kcol.dot(basis.gram * col));
            B.col(c) = col;
        }
        Eigen::MatrixXd Gbb = B.transpose() * basis.gram * B;
        Gbb = 0.5 * (Gbb + Gbb.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esb(Gbb);
        double gmax = esb.eigenvalues().maxCoeff();
        for (int c = nb - 1; c >= 0; --c) {
            double lam = esb.eigenvalues()(c);
            if (lam < opts.drop_tol * gmax || lam <= 0.0) {
                ++basis.dropped_directions;
                continue;
            }
            bulk_cols.push_back(B * esb.eigenvectors().col(c) / std::sqrt(lam));
        }
        for (auto& col : group_kernel) kernel_cols.push_back(std::move(col));
    }

    basis.n_kernel = static_cast<int>(kernel_cols.size());
    basis.T.resize(nf, basis.n_kernel + static_cast<int>(bulk_cols.size()));
    for (std::size_t c = 0; c < kernel_cols.size(); ++c) basis.T.col(c) = kernel_cols[c];
    for (std::size_t c = 0; c < bulk_cols.size(); ++c)
        basis.T.col(basis.n_kernel + c) = bulk_cols[c];

    basis.delta_snap = state.delta;
    basis.xi_snap = state.xi;
    basis.lambda_snap = state.lambda;
    return basis;
}

// ---------------------------------------------------------------------------
// Operator assembly.  All pairings reduce to weighted node sums of closed
// forms: <L phi_a, phi_b> = <phi_a, phi_b> - int (potential terms) phi_a phi_b.
// ---------------------------------------------------------------------------

// <L ., .> on the orthonormal basis.
inline Eigen::MatrixXd assemble_L(const AnsatzState& state, const CouplingModel& coupling,
                                  const std::vector<SyncProfile>& profiles, const DomainModel& dom,
                                  const GalerkinBasis& basis) {
    (void)dom;
    basis.check_state(state);
    const int q = coupling.group_count();
    const int nf = basis.n_raw();
    const std::size_t nn = basis.rule.size();
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(basis.rule.weights.data(), nn);

    std::vector<Eigen::MatrixXd> alpha(q);
    for (int h = 0; h < q; ++h) alpha[h] = alpha_matrix(profiles[h], coupling);

    // cross-potential field per component: V_i(n) = sum_{k != h(i)} sum_{j in I_k}
    // beta_ij c_j^2 PU_k(n)^2
    Eigen::MatrixXd vcross = Eigen::MatrixXd::Zero(nn, coupling.m);
    for (int h = 0; h < q; ++h) {
        auto idx = coupling.group(h);
        for (std::size_t a = 0; a < idx.size(); ++a) {
            int i = idx[a];
            for (int k = 0; k < q; ++k) {
                if (k == h) continue;
                auto jdx = coupling.group(k);
                double coeff = 0.0;
                for (std::size_t bj = 0; bj < jdx.size(); ++bj)
                    coeff += coupling.beta(i, jdx[bj]) * profiles[k].c(bj) * profiles[k].c(bj);
                vcross.col(i) += coeff * basis.pu.col(k).cwiseProduct(basis.pu.col(k));
            }
        }
    }

    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(nf, nf);

    // same-group pairs
    for (int h = 0; h < q; ++h) {
        std::vector<int> fidx;
        for (int f = 0; f < nf; ++f)
            if (basis.funcs[f].group == h) fidx.push_back(f);
        const int ng = static_cast<int>(fidx.size());
        auto idx = coupling.group(h);
        const int nh = static_cast<int>(idx.size());

        // alpha part: (alpha dir_a . dir_b) * int PU_h^2 prof_a prof_b
        Eigen::VectorXd wpu2 = w.cwiseProduct(basis.pu.col(h).cwiseProduct(basis.pu.col(h)));
        Eigen::MatrixXd profs(nn, ng);
        for (int c = 0; c < ng; ++c) profs.col(c) = basis.prof.col(fidx[c]);
        Eigen::MatrixXd Kpu2 = profs.transpose() * wpu2.asDiagonal() * profs;

        // component-weighted part: sum_i dir_a_i dir_b_i * int (V_i + lambda_i) prof_a prof_b
        std::vector<Eigen::MatrixXd> Kcomp(nh);
        for (int a = 0; a < nh; ++a) {
            Eigen::VectorXd field =
                (vcross.col(idx[a]).array() + state.lambda[idx[a]]).matrix();
            Eigen::VectorXd wv = w.cwiseProduct(field);
            Kcomp[a] = profs.transpose() * wv.asDiagonal() * profs;
        }

        for (int a = 0; a < ng; ++a) {
            const auto& fa = basis.funcs[fidx[a]];
            Eigen::VectorXd avec = alpha[h] * fa.dir;
            for (int b = 0; b < ng; ++b) {
                const auto& fb = basis.funcs[fidx[b]];
                double val = avec.dot(fb.dir) * Kpu2(a, b);
                for (int i = 0; i < nh; ++i)
                    val += fa.dir(i) * fb.dir(i) * Kcomp[i](a, b);
                P(fidx[a], fidx[b]) += val;
            }
        }
    }

    // cross-group pairs: 2 c_i c_j beta_ij PU_h PU_k phi_{a,j} phi_{b,i}
    for (int hk = 0; hk < q; ++hk)
        for (int hh = 0; hh < q; ++hh) {
            if (hk == hh) continue;
            std::vector<int> fa_idx, fb_idx;
            for (int f = 0; f < nf; ++f) {
                if (basis.funcs[f].group == hk) fa_idx.push_back(f);
                if (basis.funcs[f].group == hh) fb_idx.push_back(f);
            }
            Eigen::VectorXd wpp = w.cwiseProduct(basis.pu.col(hk).cwiseProduct(basis.pu.col(hh)));
            Eigen::MatrixXd prof_a(nn, fa_idx.size()), prof_b(nn, fb_idx.size());
            for (std::size_t c = 0; c < fa_idx.size(); ++c) prof_a.col(c) = basis.prof.col(fa_idx[c]);
            for (std::size_t c = 0; c < fb_idx.size(); ++c) prof_b.col(c) = basis.prof.col(fb_idx[c]);
            Eigen::MatrixXd Kpp = prof_a.transpose() * wpp.asDiagonal() * prof_b;

            auto idx_k = coupling.group(hk);
            auto idx_h = coupling.group(hh);
            for (std::size_t a = 0; a < fa_idx.size(); ++a) {
                const auto& fa = basis.funcs[fa_idx[a]];
                for (std::size_t b = 0; b < fb_idx.size(); ++b) {
                    const auto& fb = basis.funcs[fb_idx[b]];
                    double coeff = 0.0;
                    for (std::size_t ii = 0; ii < idx_h.size(); ++ii)
                        for (std::size_t jj = 0; jj < idx_k.size(); ++jj)
                            coeff += 2.0 * coupling.beta(idx_h[ii], idx_k[jj]) *
                                     profiles[hh].c(ii) * profiles[hk].c(jj) * fa.dir(jj) *
                                     fb.dir(ii);
                    // action of phi_a (group hk) tested against phi_b (group hh)
                    P(fa_idx[a], fb_idx[b]) += coeff * Kpp(a, b);
                }
            }
        }

    const int no = basis.n_ortho();
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(no, no) - basis.T.transpose() * P * basis.T;
    return M;
}

// Pointwise density of the quadratic/cubic terms, tested against the basis.
inline Eigen::VectorXd assemble_N(const AnsatzState& state, const CouplingModel& coupling,
                                  const std::vector<SyncProfile>& profiles, const DomainModel& dom,
                                  const GalerkinBasis& basis, const Eigen::VectorXd& coeff) {
    (void)dom;
    basis.check_state(state);
    const std::size_t nn = basis.rule.size();
    Eigen::MatrixXd phi = basis.coefficient_fields(coeff, coupling);

    Eigen::MatrixXd dens = Eigen::MatrixXd::Zero(nn, coupling.m);
    for (int h = 0; h < coupling.group_count(); ++h) {
        auto idx = coupling.group(h);
        for (std::size_t a = 0; a < idx.size(); ++a) {
            int i = idx[a];
            double ci = profiles[h].c(a);
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(nn);
            // within-group quadratic and cubic terms (j != i)
            for (std::size_t b = 0; b < idx.size(); ++b) {
                if (b == a) continue;
                int j = idx[b];
                double bij = coupling.beta(i, j);
                double cj = profiles[h].c(b);
                acc += bij * (ci * basis.pu.col(h).cwiseProduct(phi.col(j).cwiseAbs2()) +
                              2.0 * cj * basis.pu.col(h).cwiseProduct(
                                             phi.col(j).cwiseProduct(phi.col(i))) +
                              phi.col(j).cwiseAbs2().cwiseProduct(phi.col(i)));
            }
            // cross-group terms
            for (int k = 0; k < coupling.group_count(); ++k) {
                if (k == h) continue;
                auto jdx = coupling.group(k);
                for (std::size_t b = 0; b < jdx.size(); ++b) {
                    int j = jdx[b];
                    double bij = coupling.beta(i, j);
                    double cj = profiles[k].c(b);
                    acc += bij * (ci * basis.pu.col(h).cwiseProduct(phi.col(j).cwiseAbs2()) +
                                  2.0 * cj * basis.pu.col(k).cwiseProduct(
                                                 phi.col(j).cwiseProduct(phi.col(i))) +
                                  phi.col(j).cwiseAbs2().cwiseProduct(phi.col(i)));
                }
            }
            // self terms
            acc += coupling.beta(i, i) *
                   (3.0 * ci * basis.pu.col(h).cwiseProduct(phi.col(i).cwiseAbs2()) +
                    phi.col(i).array().pow(3).matrix());
            dens.col(i) = acc;
        }
    }

    // N_q = -int sum_i dens_i phi_{q,i}
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(basis.rule.weights.data(), nn);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(basis.n_raw());
    for (int f = 0; f < basis.n_raw(); ++f) {
        const auto& bf = basis.funcs[f];
        auto idx = coupling.group(bf.group);
        double acc = 0.0;
        for (std::size_t a = 0; a < idx.size(); ++a)
            if (bf.dir(a) != 0.0)
                acc += bf.dir(a) *
                       basis.prof.col(f).dot(w.cwiseProduct(dens.col(idx[a])));
        z(f) = acc;
    }
    return -basis.T.transpose() * z;
}

// The error-term coefficients <E, phi_q> on the orthonormal basis.
inline Eigen::VectorXd assemble_E(const AnsatzState& state, const CouplingModel& coupling,
                                  const std::vector<SyncProfile>& profiles, const DomainModel& dom,
                                  const GalerkinBasis& basis) {
    (void)dom;
    basis.check_state(state);
    const std::size_t nn = basis.rule.size();
    Eigen::MatrixXd dens = Eigen::MatrixXd::Zero(nn, coupling.m);
    for (int h = 0; h < coupling.group_count(); ++h) {
        auto idx = coupling.group(h);
        Eigen::VectorXd proj_defect =
            basis.pu.col(h).array().pow(3).matrix() - basis.ub.col(h).array().pow(3).matrix();
        for (std::size_t a = 0; a < idx.size(); ++a) {
            int i = idx[a];
            double ci = profiles[h].c(a);
            double row = 0.0; // sum_j beta_ij c_j^2 (= 1 under the group identity)
            for (std::size_t b = 0; b < idx.size(); ++b)
                row += coupling.beta(i, idx[b]) * profiles[h].c(b) * profiles[h].c(b);
            Eigen::VectorXd acc = (row * ci) * proj_defect;
            for (int k = 0; k < coupling.group_count(); ++k) {
                if (k == h) continue;
                auto jdx = coupling.group(k);
                double coeff = 0.0;
                for (std::size_t b = 0; b < jdx.size(); ++b)
                    coeff += coupling.beta(i, jdx[b]) * profiles[k].c(b) * profiles[k].c(b);
                acc += coeff * ci *
                       basis.pu.col(k).cwiseAbs2().cwiseProduct(basis.pu.col(h));
            }
            acc += state.lambda[i] * ci * basis.pu.col(h);
            dens.col(i) = acc;
        }
    }

    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(basis.rule.weights.data(), nn);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(basis.n_raw());
    for (int f = 0; f < basis.n_raw(); ++f) {
        const auto& bf = basis.funcs[f];
        auto idx = coupling.group(bf.group);
        double acc = 0.0;
        for (std::size_t a = 0; a < idx.size(); ++a)
            if (bf.dir(a) != 0.0)
                acc += bf.dir(a) * basis.prof.col(f).dot(w.cwiseProduct(dens.col(idx[a])));
        z(f) = acc;
    }
    return -basis.T.transpose() * z;
}

// Gram-orthogonal projections onto the kernel block and its complement,
// acting on orthonormal coefficient vectors.
inline Eigen::VectorXd project_K(const GalerkinBasis& basis, const Eigen::VectorXd& v) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
    out.head(basis.n_kernel) = v.head(basis.n_kernel);
    return out;
}

inline Eigen::VectorXd project_K_perp(const GalerkinBasis& basis, const Eigen::VectorXd& v) {
    Eigen::VectorXd out = v;
    out.head(basis.n_kernel).setZero();
    return out;
}

// Raw-coefficient variant: v represents sum_f v_f phi_f^{raw}.
inline Eigen::VectorXd to_ortho(const GalerkinBasis& basis, const Eigen::VectorXd& v_raw) {
    return basis.T.transpose() * basis.gram * v_raw;
}

inline Eigen::VectorXd project_K_perp_raw(const GalerkinBasis& basis,
                                          const Eigen::VectorXd& v_raw) {
    Eigen::VectorXd o = to_ortho(basis, v_raw);
    o.head(basis.n_kernel).setZero();
    return basis.T * o;
}

// ---------------------------------------------------------------------------
// Error-term norms per component: the L^{4/3} sizes of the projection defect,
// the cross-group interaction and the lambda term.
// ---------------------------------------------------------------------------
struct ErrorNorms {
    std::vector<double> proj_defect; // per component
    std::vector<double> cross;
    std::vector<double> lambda_term;

    double total() const {
        double t = 0.0;
        for (std::size_t i = 0; i < proj_defect.size(); ++i)
            t += proj_defect[i] + cross[i] + lambda_term[i];
        return t;
    }
};

inline ErrorNorms error_term_norms(const AnsatzState& state, const CouplingModel& coupling,
                                   const std::vector<SyncProfile>& profiles,
                                   const DomainModel& dom,
                                   const ChartSpec& spec = ChartSpec{}) {
    const int q = coupling.group_count();
    QuadratureRule rule = dom.chart(state.xi, state.delta, spec);
    const std::size_t nn = rule.size();

    Eigen::MatrixXd pu(nn, q), ub(nn, q);
    std::vector<std::vector<double>> Hf(q);
    for (int h = 0; h < q; ++h) {
        Hf[h] = dom.regular_part_many(rule.nodes, state.xi[h]);
        Bubble bh(state.delta[h], state.xi[h]);
        for (std::size_t n = 0; n < nn; ++n) {
            double u = bh(rule.nodes[n]);
            ub(n, h) = u;
            pu(n, h) = std::clamp(u - kAlpha * kGamma4 * state.delta[h] * Hf[h][n], 0.0, u);
        }
    }

    auto norm43 = [&](const Eigen::VectorXd& f) {
        double acc = 0.0;
        for (std::size_t n = 0; n < nn; ++n)
            acc += rule.weights[n] * std::pow(std::abs(f(n)), 4.0 / 3.0);
        return std::pow(acc, 0.75);
    };

    ErrorNorms out;
    out.proj_defect.resize(coupling.m);
    out.cross.resize(coupling.m);
    out.lambda_term.resize(coupling.m);

    for (int h = 0; h < q; ++h) {
        auto idx = coupling.group(h);
        Eigen::VectorXd defect =
            pu.col(h).array().pow(3).matrix() - ub.col(h).array().pow(3).matrix();
        double defect_norm = norm43(defect);
        double pu_norm = norm43(pu.col(h));
        for (std::size_t a = 0; a < idx.size(); ++a) {
            int i = idx[a];
            double ci = profiles[h].c(a);
            double wsum = 0.0;
            for (std::size_t b = 0; b < idx.size(); ++b)
                wsum += std::abs(coupling.beta(i, idx[b])) * profiles[h].c(b) * profiles[h].c(b);
            out.proj_defect[i] = wsum * ci * defect_norm;

            double cross = 0.0;
            for (int k = 0; k < q; ++k) {
                if (k == h) continue;
                auto jdx = coupling.group(k);
                Eigen::VectorXd mixed = pu.col(h).cwiseProduct(pu.col(k).cwiseAbs2());
                double mixed_norm = norm43(mixed);
                for (std::size_t b = 0; b < jdx.size(); ++b)
                    cross += std::abs(coupling.beta(i, jdx[b])) * ci * profiles[k].c(b) *
                             profiles[k].c(b) * mixed_norm;
            }
            out.cross[i] = cross;
            out.lambda_term[i] = state.lambda[i] * ci * pu_norm;
        }
    }
    return out;
}

} // namespace bubbles
