#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

#include "bubbles/assembly.hpp"

namespace bubbles {

// ---------------------------------------------------------------------------
// Remainder solve: fixed point  phi <- L^{-1} Pi_perp [ -N(phi) - E ]
// restricted to the bulk (kernel-orthogonal) block of the basis.
// ---------------------------------------------------------------------------
struct RemainderOptions {
    int max_iter = 100;
    double step_tol = 1e-10;
    double sigma_rel_tol = 1e-10; // bulk block counts as singular below this
    std::optional<Eigen::VectorXd> start;      // bulk coordinates
    std::optional<Eigen::VectorXd> E_override; // bulk coordinates of E
};

struct RemainderSolution {
    Eigen::VectorXd coeff; // orthonormal coordinates, kernel block zero
    double norm = 0.0;
    std::vector<double> step_norms;
    double contraction = 0.0;
    double sigma_min_bulk = 0.0;
    int iterations = 0;
};

inline RemainderSolution solve_remainder(const AnsatzState& state, const CouplingModel& coupling,
                                         const std::vector<SyncProfile>& profiles,
                                         const DomainModel& dom, const GalerkinBasis& basis,
                                         const Eigen::MatrixXd* L_precomputed = nullptr,
                                         const RemainderOptions& opts = RemainderOptions{}) {
    Eigen::MatrixXd L = L_precomputed ? *L_precomputed
                                      : assemble_L(state, coupling, profiles, dom, basis);
    const int nk = basis.n_kernel;
    const int nb = basis.n_bulk();
    Eigen::MatrixXd Lbb = L.block(nk, nk, nb, nb);

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Lbb);
    const double smin = svd.singularValues()(nb - 1);
    const double smax = svd.singularValues()(0);
    if (!(smin > opts.sigma_rel_tol * smax))
        throw LinearSolveFailed("bulk block of L is numerically singular");

    Eigen::PartialPivLU<Eigen::MatrixXd> lu(Lbb);
    Eigen::VectorXd Eb = opts.E_override.value_or(
        Eigen::VectorXd(assemble_E(state, coupling, profiles, dom, basis).tail(nb)));

    Eigen::VectorXd x = opts.start.value_or(Eigen::VectorXd::Zero(nb));
    RemainderSolution sol;
    sol.sigma_min_bulk = smin;

    auto full = [&](const Eigen::VectorXd& bulk) {
        Eigen::VectorXd c = Eigen::VectorXd::Zero(nk + nb);
        c.tail(nb) = bulk;
        return c;
    };

    double prev_step = std::numeric_limits<double>::infinity();
    int rising = 0;
    for (int it = 0; it < opts.max_iter; ++it) {
        Eigen::VectorXd Nb =
            assemble_N(state, coupling, profiles, dom, basis, full(x)).tail(nb);
        Eigen::VectorXd xn = lu.solve(-Nb - Eb);
        double step = (xn - x).norm();
        sol.step_norms.push_back(step);
        sol.iterations = it + 1;
        if (it > 0 && prev_step > 0.0) {
            double ratio = step / prev_step;
            sol.contraction = std::max(sol.contraction, (it >= 2) ? ratio : 0.0);
            rising = (ratio >= 1.0) ? rising + 1 : 0;
            if (rising >= 2 || step > 1e6 * sol.step_norms.front() + 1.0) {
                std::ostringstream os;
                os << "fixed-point step ratio " << ratio << " at iteration " << it
                   << "; outside the coercive regime or delta too large";
                throw NoContraction(os.str());
            }
        }
        x = xn;
        prev_step = step;
        if (step < opts.step_tol) break;
    }
    if (prev_step >= opts.step_tol && sol.contraction >= 1.0)
        throw NoContraction("fixed-point iteration did not contract within the budget");

    sol.coeff = full(x);
    sol.norm = x.norm();
    return sol;
}

// ---------------------------------------------------------------------------
// Energy of u = W + phi.  Gradient terms of W use the duality identity
// <P U, v> = int U^3 v; the remainder contributes its coefficient norm.
// ---------------------------------------------------------------------------
inline double energy(const AnsatzState& state, const CouplingModel& coupling,
                     const std::vector<SyncProfile>& profiles, const DomainModel& dom,
                     const GalerkinBasis& basis,
                     const Eigen::VectorXd* phi_coeff = nullptr) {
    (void)dom;
    const std::size_t nn = basis.rule.size();
    const int q = coupling.group_count();
    Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(basis.rule.weights.data(), nn);

    Eigen::MatrixXd phi;
    bool with_phi = phi_coeff != nullptr && phi_coeff->size() > 0;
    if (with_phi) phi = basis.coefficient_fields(*phi_coeff, coupling);

    double J = 0.0;
    for (int h = 0; h < q; ++h) {
        auto idx = coupling.group(h);
        Eigen::VectorXd u3 = basis.ub.col(h).array().pow(3).matrix();
        double ipu = u3.dot(w.cwiseProduct(basis.pu.col(h)));
        for (std::size_t a = 0; a < idx.size(); ++a) {
            double ci = profiles[h].c(a);
            J += 0.5 * ci * ci * ipu;
            if (with_phi) J += ci * u3.dot(w.cwiseProduct(phi.col(idx[a])));
        }
    }
    if (with_phi) J += 0.5 * phi_coeff->squaredNorm();

    // quartic and mass terms on the chart
    Eigen::MatrixXd u(nn, coupling.m);
    for (int h = 0; h < q; ++h) {
        auto idx = coupling.group(h);
        for (std::size_t a = 0; a < idx.size(); ++a) {
            u.col(idx[a]) = profiles[h].c(a) * basis.pu.col(h);
            if (with_phi) u.col(idx[a]) += phi.col(idx[a]);
        }
    }
    for (int i = 0; i < coupling.m; ++i) {
        Eigen::VectorXd ui2 = u.col(i).cwiseAbs2();
        J -= 0.5 * state.lambda[i] * ui2.dot(w);
        for (int j = 0; j < coupling.m; ++j) {
            Eigen::VectorXd uj2 = u.col(j).cwiseAbs2();
            J -= 0.25 * coupling.beta(i, j) * ui2.dot(w.cwiseProduct(uj2));
        }
    }
    return J;
}

// J-tilde at a state: solve the remainder, then evaluate the energy on W + phi.
struct ReducedEnergyResult {
    double jtilde = 0.0;
    double j_of_w = 0.0;
    RemainderSolution remainder;
};

inline ReducedEnergyResult reduced_energy(const AnsatzState& state, const CouplingModel& coupling,
                                          const std::vector<SyncProfile>& profiles,
                                          const DomainModel& dom,
                                          const BasisOptions& bopts = BasisOptions{},
                                          const RemainderOptions& ropts = RemainderOptions{}) {
    GalerkinBasis basis = build_basis(state, coupling, profiles, dom, bopts);
    ReducedEnergyResult out;
    out.remainder = solve_remainder(state, coupling, profiles, dom, basis, nullptr, ropts);
    out.j_of_w = energy(state, coupling, profiles, dom, basis);
    out.jtilde = energy(state, coupling, profiles, dom, basis, &out.remainder.coeff);
    return out;
}

// ---------------------------------------------------------------------------
// Reduced-energy expansion fit:
//   Jtilde = sum_h S_h ( A0 + A1 delta_h^2 r(xi_h) - A2 lambda*_h delta_h^2 |ln delta_h| ) + o(delta^2)
// with S_h the group mass sum_i c_i^2.  A1 and A2 are positive; the lambda
// term lowers the energy (that competition places the concentration rate).
// ---------------------------------------------------------------------------
struct EnergySample {
    std::vector<double> delta;       // per group
    std::vector<double> lambda_star; // per group
    std::vector<double> robin;       // r(xi_h)
    std::vector<double> group_mass;  // S_h
    double jtilde = 0.0;
};

struct ReducedEnergyModel {
    double A0 = 0.0, A1 = 0.0, A2 = 0.0;
    double se0 = 0.0, se1 = 0.0, se2 = 0.0;
    std::vector<double> residuals;
    std::vector<double> max_delta; // per sample, for residual-decay reporting
    double cond = 0.0;

    double predict(double delta, double lambda_star, double robin, double mass) const {
        return mass * (A0 + A1 * delta * delta * robin -
                       A2 * lambda_star * delta * delta * std::abs(std::log(delta)));
    }
};

inline ReducedEnergyModel fit_expansion(const std::vector<EnergySample>& samples) {
    const int n = static_cast<int>(samples.size());
    if (n < 8) throw IllConditionedFit("expansion fit needs at least 8 samples");
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXd y(n);
    for (int s = 0; s < n; ++s) {
        const auto& smp = samples[s];
        double x0 = 0.0, x1 = 0.0, x2 = 0.0;
        for (std::size_t h = 0; h < smp.delta.size(); ++h) {
            double d2 = smp.delta[h] * smp.delta[h];
            x0 += smp.group_mass[h];
            x1 += smp.group_mass[h] * d2 * smp.robin[h];
            x2 += smp.group_mass[h] * smp.lambda_star[h] * d2 *
                  std::abs(std::log(smp.delta[h]));
        }
        X(s, 0) = x0;
        X(s, 1) = x1;
        X(s, 2) = -x2; // fitted coefficient of the lambda term is -A2
        y(s) = smp.jtilde;
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double cond = svd.singularValues()(0) / svd.singularValues()(2);
    if (!(svd.singularValues()(2) > 0.0) || cond > 1e12)
        throw IllConditionedFit("regressors are collinear; widen the delta or lambda grid");
    Eigen::VectorXd beta = svd.solve(y);

    ReducedEnergyModel model;
    model.A0 = beta(0);
    model.A1 = beta(1);
    model.A2 = beta(2);
    model.cond = cond;

    Eigen::VectorXd resid = y - X * beta;
    model.residuals.assign(resid.data(), resid.data() + n);
    for (const auto& smp : samples) {
        double dmax = 0.0;
        for (double d : smp.delta) dmax = std::max(dmax, d);
        model.max_delta.push_back(dmax);
    }
    double sigma2 = resid.squaredNorm() / std::max(n - 3, 1);
    Eigen::MatrixXd XtX_inv = (X.transpose() * X).inverse();
    model.se0 = std::sqrt(sigma2 * XtX_inv(0, 0));
    model.se1 = std::sqrt(sigma2 * XtX_inv(1, 1));
    model.se2 = std::sqrt(sigma2 * XtX_inv(2, 2));
    return model;
}

// ---------------------------------------------------------------------------
// Critical-point search for the reduced energy along a decreasing lambda
// schedule.  The fitted model is separable: the rate equation gives
// d_h = (A1/A2) r(xi_h) + lambda*/2, and the center equation is grad r = 0,
// solved by damped Newton per group with projection back into X_eta.
// ---------------------------------------------------------------------------
struct SchedulePoint {
    double lambda_star = 0.0;
    std::vector<double> d;
    std::vector<double> delta;
    std::vector<Point4> xi;
    double jtilde = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> seg_log10; // log10(|beta*| delta_h) in the segregation regime
};

struct CriticalTrajectory {
    std::vector<SchedulePoint> points;
    std::vector<Point4> xi_limit;
    std::vector<RobinCriticalPoint> robin_points;
    std::vector<int> matching; // group -> index into robin_points
};

struct CriticalSearchOptions {
    std::vector<double> lambda_schedule{1e-1, 5e-2, 2.5e-2, 1e-2};
    std::vector<Point4> xi_init;
    double dstar = -1.0;        // segregation diagnostic: |beta*| = exp(dstar / lambda*)
    bool record_energy = false; // evaluate J-tilde at each schedule point
    int robin_starts = 8;
    std::uint64_t seed = 2024;
    double delta_floor = kDeltaFloor;
};

namespace detail {

// push centers apart / away from the boundary until X_eta holds
inline void project_into_xeta(const DomainModel& dom, std::vector<Point4>& xi, double eta) {
    for (int round = 0; round < 64; ++round) {
        bool ok = true;
        for (auto& x : xi) {
            if (!dom.contains(x) || dom.boundary_distance(x) < eta) {
                Point4 inward = dom.centroid() - x;
                double len = inward.norm();
                if (len < 1e-14) throw ExitedXeta("center collapsed onto the centroid");
                double need = eta - dom.boundary_distance(x);
                x += inward / len * (need + 0.05 * eta);
                ok = false;
            }
        }
        for (std::size_t a = 0; a < xi.size(); ++a)
            for (std::size_t b = a + 1; b < xi.size(); ++b) {
                Point4 dvec = xi[b] - xi[a];
                double dist = dvec.norm();
                if (dist < eta) {
                    Point4 dir = (dist > 1e-14) ? Point4(dvec / dist) : Point4(Point4::Unit(0));
                    double need = 0.5 * (eta - dist) + 0.05 * eta;
                    xi[a] -= need * dir;
                    xi[b] += need * dir;
                    ok = false;
                }
            }
        if (ok) return;
    }
    throw ExitedXeta("could not satisfy the interior margin and separation constraints");
}

} // namespace detail

inline CriticalTrajectory find_critical_point(const ReducedEnergyModel& model,
                                              const DomainModel& dom,
                                              const CouplingModel& coupling,
                                              const std::vector<SyncProfile>& profiles,
                                              const CriticalSearchOptions& opts) {
    const int q = coupling.group_count();
    if (static_cast<int>(opts.xi_init.size()) != q)
        throw Error("CriticalSearch", "xi_init must provide one center per group");
    if (!(model.A1 > 0.0) || !(model.A2 > 0.0))
        throw NoCriticalPointFound("fitted model lacks the A1/A2 competition");

    CriticalTrajectory traj;
    traj.robin_points = dom.robin_critical_points(opts.robin_starts, opts.seed);

    std::vector<Point4> xi = opts.xi_init;
    const double eta = dom.eta;
    detail::project_into_xeta(dom, xi, eta);

    for (double lam : opts.lambda_schedule) {
        // center update: damped Newton on r per group, then X_eta projection
        for (int it = 0; it < 40; ++it) {
            double moved = 0.0;
            for (int h = 0; h < q; ++h) {
                Eigen::Vector4d g = dom.robin_gradient(xi[h]);
                Eigen::Matrix4d H = dom.robin_hessian(xi[h]);
                Eigen::Vector4d step = H.fullPivLu().solve(-g);
                if (!step.allFinite() || step.norm() > 0.2 * dom.diameter())
                    step = -g * (0.05 * dom.diameter() / std::max(g.norm(), 1e-30));
                Point4 cand = xi[h] + step;
                if (!dom.contains(cand) || dom.boundary_distance(cand) < eta) {
                    double damp = 0.5;
                    while (damp > 1e-3 &&
                           (!dom.contains(xi[h] + damp * step) ||
                            dom.boundary_distance(xi[h] + damp * step) < eta))
                        damp *= 0.5;
                    cand = xi[h] + damp * step;
                    if (!dom.contains(cand) || dom.boundary_distance(cand) < eta) cand = xi[h];
                }
                moved += (cand - xi[h]).norm();
                xi[h] = cand;
            }
            detail::project_into_xeta(dom, xi, eta);
            if (moved < 1e-12 * dom.diameter()) break;
        }

        SchedulePoint pt;
        pt.lambda_star = lam;
        pt.xi = xi;
        pt.d.resize(q);
        pt.delta.resize(q);
        for (int h = 0; h < q; ++h) {
            double r = dom.regular_part(xi[h], xi[h]);
            double d = (model.A1 / model.A2) * r + 0.5 * lam;
            pt.d[h] = std::clamp(d, eta * (1.0 + 1e-9), (1.0 / eta) * (1.0 - 1e-9));
            pt.delta[h] = std::max(std::exp(-pt.d[h] / lam), opts.delta_floor);
        }
        if (opts.dstar > 0.0) {
            pt.seg_log10.resize(q);
            for (int h = 0; h < q; ++h)
                pt.seg_log10[h] = (opts.dstar - pt.d[h]) / (lam * std::log(10.0));
        }
        if (opts.record_energy) {
            std::vector<double> lambda(coupling.m, lam);
            AnsatzState st = make_state_from_rates(dom, coupling, pt.d, xi, lambda,
                                                   opts.delta_floor);
            pt.jtilde = reduced_energy(st, coupling, profiles, dom).jtilde;
        }
        traj.points.push_back(std::move(pt));
    }

    traj.xi_limit = xi;

    // assign groups to Robin critical points by minimal total displacement
    const int ncp = static_cast<int>(traj.robin_points.size());
    traj.matching.assign(q, 0);
    if (ncp > 0) {
        std::vector<int> perm(q);
        for (int h = 0; h < q; ++h) {
            double best = std::numeric_limits<double>::infinity();
            for (int c = 0; c < ncp; ++c) {
                double cost = (xi[h] - traj.robin_points[c].point).norm();
                if (cost < best) {
                    best = cost;
                    perm[h] = c;
                }
            }
        }
        // resolve collisions greedily by total displacement when enough targets exist
        if (ncp >= q) {
            for (int a = 0; a < q; ++a)
                for (int b = a + 1; b < q; ++b)
                    if (perm[a] == perm[b]) {
                        double keep_a = (xi[a] - traj.robin_points[perm[a]].point).norm();
                        double keep_b = (xi[b] - traj.robin_points[perm[b]].point).norm();
                        int loser = (keep_a <= keep_b) ? b : a;
                        double best = std::numeric_limits<double>::infinity();
                        for (int c = 0; c < ncp; ++c) {
                            bool taken = false;
                            for (int o = 0; o < q; ++o)
                                if (o != loser && perm[o] == c) taken = true;
                            if (taken) continue;
                            double cost = (xi[loser] - traj.robin_points[c].point).norm();
                            if (cost < best) {
                                best = cost;
                                perm[loser] = c;
                            }
                        }
                    }
        }
        traj.matching = perm;
    }
    return traj;
}

} // namespace bubbles
