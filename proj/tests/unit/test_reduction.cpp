#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "bubbles/reduction.hpp"
#include "bubbles/verification.hpp"

using namespace bubbles;

namespace {

Point4 pt(double a, double b = 0, double c = 0, double d = 0) {
    Point4 p;
    p << a, b, c, d;
    return p;
}

CouplingModel single_component() {
    CouplingModel m;
    m.m = 1;
    m.beta.resize(1, 1);
    m.beta << 1.0;
    m.decomposition = {0, 1};
    return m;
}

CouplingModel symmetric_pair() {
    CouplingModel m;
    m.m = 2;
    m.beta.resize(2, 2);
    m.beta << 1.0, 2.0, 2.0, 1.0;
    m.decomposition = {0, 2};
    return m;
}

CouplingModel two_singletons(double beta_cross) {
    CouplingModel m;
    m.m = 2;
    m.beta.resize(2, 2);
    m.beta << 1.0, beta_cross, beta_cross, 1.0;
    m.decomposition = {0, 1, 2};
    return m;
}

} // namespace

TEST_CASE("zero error term fixes phi = 0") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);
    auto st = make_state_from_scales(dom, coupling, {1e-2}, {Point4::Zero()}, {1e-4});
    auto basis = build_basis(st, coupling, profiles, dom);

    RemainderOptions opts;
    opts.E_override = Eigen::VectorXd::Zero(basis.n_bulk());
    auto sol = solve_remainder(st, coupling, profiles, dom, basis, nullptr, opts);
    REQUIRE(sol.norm == 0.0);
    REQUIRE(sol.iterations <= 2);
}

TEST_CASE("remainder norm scales like delta^2 on the small-lambda grid") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);

    std::vector<std::pair<double, double>> pts;
    for (double d : {1e-2, 5e-3, 2.5e-3, 1.25e-3}) {
        auto st = make_state_from_scales(dom, coupling, {d}, {Point4::Zero()}, {1e-5});
        auto basis = build_basis(st, coupling, profiles, dom);
        auto sol = solve_remainder(st, coupling, profiles, dom, basis);
        pts.push_back({d, sol.norm});
    }
    auto fit = slope_regression(pts);
    REQUIRE(fit.slope >= 1.85);
}

TEST_CASE("fixed point is unique: two starts agree") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = symmetric_pair();
    auto profiles = make_all_profiles(coupling);
    auto st = make_state_from_scales(dom, coupling, {5e-3}, {Point4::Zero()}, {1e-4, 1e-4});
    auto basis = build_basis(st, coupling, profiles, dom);
    Eigen::MatrixXd L = assemble_L(st, coupling, profiles, dom, basis);

    auto sol0 = solve_remainder(st, coupling, profiles, dom, basis, &L);

    RemainderOptions opts;
    std::mt19937_64 rng(42);
    std::normal_distribution<double> gauss(0.0, 1e-3);
    Eigen::VectorXd start(basis.n_bulk());
    for (int i = 0; i < start.size(); ++i) start(i) = gauss(rng);
    opts.start = start;
    auto sol1 = solve_remainder(st, coupling, profiles, dom, basis, &L, opts);

    REQUIRE((sol0.coeff - sol1.coeff).norm() <= 1e-8);
}

TEST_CASE("strong cooperative cross-coupling breaks the contraction") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0, 0.1);
    auto coupling = two_singletons(100.0);
    auto profiles = make_all_profiles(coupling);
    auto st = make_state_from_scales(dom, coupling, {1e-2, 1e-2}, {pt(-0.3), pt(0.3)},
                                     {1e-4, 1e-4});
    auto basis = build_basis(st, coupling, profiles, dom);
    REQUIRE_THROWS_AS(solve_remainder(st, coupling, profiles, dom, basis), NoContraction);
}

TEST_CASE("energy of the ansatz matches the leading bubble value") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = symmetric_pair();
    auto profiles = make_all_profiles(coupling);
    auto st = make_state_from_scales(dom, coupling, {1e-3}, {Point4::Zero()}, {0.0, 0.0});
    auto basis = build_basis(st, coupling, profiles, dom);

    double S = profiles[0].c.squaredNorm();
    double J = energy(st, coupling, profiles, dom, basis);
    REQUIRE(J == Catch::Approx(S * 8.0 * kPi * kPi / 3.0).epsilon(0.02));
}

TEST_CASE("energy decreases in each lambda") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);
    auto st0 = make_state_from_scales(dom, coupling, {1e-2}, {Point4::Zero()}, {0.0});
    auto basis = build_basis(st0, coupling, profiles, dom);
    double j0 = energy(st0, coupling, profiles, dom, basis);

    AnsatzState st1 = st0;
    st1.lambda = {1e-2};
    GalerkinBasis b1 = basis;
    b1.lambda_snap = st1.lambda;
    double j1 = energy(st1, coupling, profiles, dom, b1);
    REQUIRE(j1 < j0);
}

TEST_CASE("energy is additive over well-separated uncoupled groups") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0, 0.1);
    auto coupling2 = two_singletons(0.0);
    auto profiles2 = make_all_profiles(coupling2);
    auto st2 = make_state_from_scales(dom, coupling2, {2e-3, 2e-3}, {pt(-0.3), pt(0.3)},
                                      {0.0, 0.0});
    auto basis2 = build_basis(st2, coupling2, profiles2, dom);
    double j2 = energy(st2, coupling2, profiles2, dom, basis2);

    auto coupling1 = single_component();
    auto profiles1 = make_all_profiles(coupling1);
    double jsum = 0.0;
    for (double x : {-0.3, 0.3}) {
        auto st1 = make_state_from_scales(dom, coupling1, {2e-3}, {pt(x)}, {0.0});
        auto basis1 = build_basis(st1, coupling1, profiles1, dom);
        jsum += energy(st1, coupling1, profiles1, dom, basis1);
    }
    REQUIRE(j2 == Catch::Approx(jsum).epsilon(2e-3));
}

TEST_CASE("expansion fit recovers synthetic coefficients") {
    const double A0 = 26.3, A1 = 6200.0, A2 = 80.0;
    std::vector<EnergySample> samples;
    double r = 0.0253;
    for (double d : {1e-2, 5e-3, 2.5e-3, 1.25e-3})
        for (double lam : {1e-3, 1e-2, 5e-2}) {
            EnergySample s;
            s.delta = {d};
            s.lambda_star = {lam};
            s.robin = {r};
            s.group_mass = {1.0};
            s.jtilde = A0 + A1 * d * d * r - A2 * lam * d * d * std::abs(std::log(d));
            samples.push_back(s);
        }
    auto model = fit_expansion(samples);
    REQUIRE(model.A0 == Catch::Approx(A0).epsilon(1e-9));
    REQUIRE(model.A1 == Catch::Approx(A1).epsilon(1e-6));
    REQUIRE(model.A2 == Catch::Approx(A2).epsilon(1e-6));
    REQUIRE(model.A1 > 0.0);
    REQUIRE(model.A2 > 0.0);

    REQUIRE_THROWS_AS(fit_expansion(std::vector<EnergySample>(samples.begin(),
                                                              samples.begin() + 5)),
                      IllConditionedFit);
}

TEST_CASE("reduced energy is stationary in xi at the ball center") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);

    auto jt = [&](const Point4& xi) {
        auto st = make_state_from_scales(dom, coupling, {5e-3}, {xi}, {1e-4});
        return reduced_energy(st, coupling, profiles, dom).jtilde;
    };
    const double h = 0.02;
    double j0 = jt(Point4::Zero());
    for (int dir = 0; dir < 2; ++dir) {
        Point4 e = Point4::Zero();
        e[dir] = h;
        double grad = (jt(e) - jt(-e)) / (2.0 * h);
        REQUIRE(std::abs(grad) <= 1e-4 * std::abs(j0));
    }
}

TEST_CASE("phi shifts the energy only at higher order") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);

    std::vector<double> ratios;
    for (double d : {1e-2, 2.5e-3}) {
        auto st = make_state_from_scales(dom, coupling, {d}, {Point4::Zero()}, {1e-5});
        auto res = reduced_energy(st, coupling, profiles, dom);
        ratios.push_back(std::abs(res.jtilde - res.j_of_w) / (d * d));
    }
    REQUIRE(ratios[1] < ratios[0]);
}

TEST_CASE("critical point trajectory on the ball heads to the center") {
    DomainModel dom = DomainModel::ball(Point4::Zero(), 1.0, 0.1);
    auto coupling = single_component();
    auto profiles = make_all_profiles(coupling);

    ReducedEnergyModel model;
    model.A0 = 26.3;
    model.A1 = 6200.0;
    model.A2 = 80.0;

    CriticalSearchOptions opts;
    opts.lambda_schedule = {1e-1, 5e-2, 2.5e-2, 1e-2};
    opts.xi_init = {pt(0.4, 0.1, 0.0, 0.0)};
    auto traj = find_critical_point(model, dom, coupling, profiles, opts);

    REQUIRE(traj.points.size() == 4);
    REQUIRE(traj.xi_limit[0].norm() <= 1e-2);
    // the rate stays in the admissible window and heads to (A1/A2) r(0)
    double d_expect = (model.A1 / model.A2) * dom.robin(Point4::Zero());
    REQUIRE(traj.points.back().d[0] == Catch::Approx(d_expect).margin(0.05));
    REQUIRE(traj.matching[0] == 0);
    REQUIRE((traj.robin_points[traj.matching[0]].point - Point4::Zero()).norm() <= 1e-5);
}

TEST_CASE("box pair with repulsive coupling keeps the groups separated") {
    DomainModel dom = DomainModel::box(Point4::Zero(), Point4::Ones(), 0.15);
    auto coupling = two_singletons(-0.5);
    auto profiles = make_all_profiles(coupling);

    ReducedEnergyModel model;
    model.A0 = 26.3;
    model.A1 = 6200.0;
    model.A2 = 80.0;

    CriticalSearchOptions opts;
    opts.lambda_schedule = {1e-1, 5e-2, 2.5e-2, 1e-2};
    opts.xi_init = {pt(0.3, 0.5, 0.5, 0.5), pt(0.7, 0.5, 0.5, 0.5)};
    opts.dstar = 0.5; // segregation diagnostic
    auto traj = find_critical_point(model, dom, coupling, profiles, opts);

    for (const auto& p : traj.points)
        REQUIRE((p.xi[0] - p.xi[1]).norm() >= dom.eta);

    // |beta*| delta_h decreases along the schedule in the segregation regime
    for (int h = 0; h < 2; ++h)
        for (std::size_t s = 1; s < traj.points.size(); ++s)
            REQUIRE(traj.points[s].seg_log10[h] < traj.points[s - 1].seg_log10[h]);
}
