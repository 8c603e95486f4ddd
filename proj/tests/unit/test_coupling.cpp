#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "bubbles/coupling.hpp"

using namespace bubbles;

namespace {

CouplingModel pair_model(double mu1, double mu2, double b12) {
    CouplingModel m;
    m.m = 2;
    m.beta.resize(2, 2);
    m.beta << mu1, b12, b12, mu2;
    m.decomposition = {0, 2};
    return m;
}

CouplingModel singleton_model(double mu) {
    CouplingModel m;
    m.m = 1;
    m.beta.resize(1, 1);
    m.beta << mu;
    m.decomposition = {0, 1};
    return m;
}

} // namespace

TEST_CASE("decomposition read-off") {
    CouplingModel m;
    m.m = 3;
    m.beta = Eigen::MatrixXd::Identity(3, 3);
    m.decomposition = {0, 1, 3};
    auto groups = validate_decomposition(m);
    REQUIRE(groups.size() == 2);
    REQUIRE(groups[0] == std::vector<int>{0});
    REQUIRE(groups[1] == std::vector<int>{1, 2});
}

TEST_CASE("single group decomposition") {
    CouplingModel m = pair_model(1.0, 1.0, 2.0);
    auto groups = validate_decomposition(m);
    REQUIRE(groups.size() == 1);
    REQUIRE(groups[0] == std::vector<int>{0, 1});
}

TEST_CASE("malformed decomposition rejected") {
    CouplingModel m = pair_model(1.0, 1.0, 0.5);
    m.decomposition = {0, 2, 2};
    REQUIRE_THROWS_AS(validate_decomposition(m), MalformedDecomposition);
    m.decomposition = {1, 2};
    REQUIRE_THROWS_AS(validate_decomposition(m), MalformedDecomposition);
}

TEST_CASE("sync coefficients: singleton") {
    auto profile = solve_sync_coefficients(singleton_model(1.0), 0);
    REQUIRE(profile.c.size() == 1);
    REQUIRE(profile.c(0) == Catch::Approx(1.0).margin(1e-14));
}

TEST_CASE("sync coefficients: symmetric pair") {
    // 1 = c1^2 + 2 c2^2 with c1 = c2 collapses to 1 = 3 c^2
    auto profile = solve_sync_coefficients(pair_model(1.0, 1.0, 2.0), 0);
    const double expect = 1.0 / std::sqrt(3.0);
    REQUIRE(profile.c(0) == Catch::Approx(expect).margin(1e-13));
    REQUIRE(profile.c(1) == Catch::Approx(expect).margin(1e-13));
}

TEST_CASE("sync coefficients: inconsistent pair has no positive solution") {
    // 1 = c1^2 - c2^2, 1 = -c1^2 + c2^2 is inconsistent; the linear solve in
    // the squares lands on a nonpositive value.
    REQUIRE_THROWS_AS(solve_sync_coefficients(pair_model(1.0, 1.0, -1.0), 0),
                      NoPositiveSolution);
}

TEST_CASE("singular group matrix detected") {
    REQUIRE_THROWS_AS(solve_sync_coefficients(pair_model(1.0, 1.0, 1.0), 0),
                      SingularGroupMatrix);
}

TEST_CASE("A2 gate") {
    REQUIRE(check_A2(singleton_model(1.0), 0).first);
    REQUIRE_FALSE(check_A2(pair_model(1.0, 1.0, 1.0), 0).first); // singular
    REQUIRE(check_A2(pair_model(1.0, 1.0, 2.0), 0).first);       // det = -3
    REQUIRE_FALSE(check_A2(pair_model(1.0, 1.0, -0.5), 0).first); // negative entry
}

TEST_CASE("alpha matrix values") {
    auto m = pair_model(1.0, 1.0, 2.0);
    auto profile = solve_sync_coefficients(m, 0);
    Eigen::MatrixXd A = alpha_matrix(profile, m);
    REQUIRE(A(0, 0) == Catch::Approx(5.0 / 3.0).margin(1e-13));
    REQUIRE(A(1, 1) == Catch::Approx(5.0 / 3.0).margin(1e-13));
    REQUIRE(A(0, 1) == Catch::Approx(4.0 / 3.0).margin(1e-13));
    REQUIRE(A(0, 1) == A(1, 0));

    auto ms = singleton_model(1.0);
    auto ps = solve_sync_coefficients(ms, 0);
    Eigen::MatrixXd As = alpha_matrix(ps, ms);
    REQUIRE(As(0, 0) == Catch::Approx(3.0).margin(1e-14));
}

TEST_CASE("group eigenvector for eigenvalue 3") {
    Eigen::MatrixXd A(2, 2);
    A << 5.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0, 5.0 / 3.0;
    auto [e, residual] = group_eigenvector(A);
    REQUIRE(residual <= 1e-12);
    REQUIRE(e(0) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));
    REQUIRE(e(1) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));

    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    REQUIRE_THROWS_AS(group_eigenvector(I2), EigenvalueThreeMissing);
}

TEST_CASE("synchronized residual vanishes for valid profiles") {
    auto m = pair_model(1.0, 1.0, 2.0);
    auto profile = make_sync_profile(m, 0);
    Point4 origin = Point4::Zero();
    REQUIRE(synchronized_residual(profile, m, origin) <= 1e-10);

    // far from the peak the defect decays with U^3
    Point4 far;
    far << 50.0, 0.0, 0.0, 0.0;
    REQUIRE(synchronized_residual(profile, m, far) <= 1e-8);

    // perturbing c breaks the algebraic identity by a computable margin
    SyncProfile bad = profile;
    bad.c *= 1.1;
    double u0 = Bubble(1.0, origin)(origin);
    REQUIRE(synchronized_residual(bad, m, origin) >
            0.1 * u0 * u0 * u0 * bad.c.minCoeff() * 0.9);
}

TEST_CASE("eigenvector identity A e = 3 e for valid groups") {
    auto m = pair_model(2.0, 1.0, 3.0);
    auto profile = make_sync_profile(m, 0);
    Eigen::MatrixXd A = alpha_matrix(profile, m);
    REQUIRE((A * profile.e - 3.0 * profile.e).norm() <= 1e-10);
    // e is the normalized coefficient vector
    Eigen::VectorXd cn = profile.c / profile.c.norm();
    REQUIRE((profile.e - cn).norm() <= 1e-10);
}

TEST_CASE("row identity for valid coefficients") {
    auto m = pair_model(2.0, 1.0, 3.0);
    auto profile = solve_sync_coefficients(m, 0);
    Eigen::MatrixXd B = m.group_matrix(0);
    for (int i = 0; i < 2; ++i) {
        double row = 0.0;
        for (int j = 0; j < 2; ++j) row += B(i, j) * profile.c(j) * profile.c(j);
        REQUIRE(row == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("permutation equivariance within a group") {
    CouplingModel m;
    m.m = 2;
    m.beta.resize(2, 2);
    m.beta << 1.0, 3.0, 3.0, 2.0;
    m.decomposition = {0, 2};
    auto p = make_sync_profile(m, 0);

    CouplingModel mp;
    mp.m = 2;
    mp.beta.resize(2, 2);
    mp.beta << 2.0, 3.0, 3.0, 1.0; // swap the two components
    mp.decomposition = {0, 2};
    auto pp = make_sync_profile(mp, 0);

    REQUIRE(p.c(0) == Catch::Approx(pp.c(1)).margin(1e-12));
    REQUIRE(p.c(1) == Catch::Approx(pp.c(0)).margin(1e-12));
    REQUIRE(p.e(0) == Catch::Approx(pp.e(1)).margin(1e-12));
    REQUIRE(p.e(1) == Catch::Approx(pp.e(0)).margin(1e-12));
}

TEST_CASE("beta scaling law: c scales by t^{-1/2}, e invariant") {
    auto m = pair_model(2.0, 1.0, 3.0);
    auto p = make_sync_profile(m, 0);
    const double t = 2.7;
    CouplingModel mt = m;
    mt.beta *= t;
    auto pt = make_sync_profile(mt, 0);
    for (int i = 0; i < 2; ++i) {
        REQUIRE(pt.c(i) == Catch::Approx(p.c(i) / std::sqrt(t)).margin(1e-12));
        REQUIRE(pt.e(i) == Catch::Approx(p.e(i)).margin(1e-12));
    }
}
