#include "doctest.h"
#include "support.hpp"

#include <cmath>
#include <set>

#include "flux/transport.hpp"

using namespace flux;
using flux::test::random_matrix;

namespace {

double max_marginal_error(const Matrix& plan) {
    const double a = 1.0 / static_cast<double>(plan.rows()), b = 1.0 / static_cast<double>(plan.cols());
    return std::max((plan.rowwise().sum().array() - a).abs().maxCoeff(), (plan.colwise().sum().array() - b).abs().maxCoeff());
}

// Plain (non-log) Sinkhorn run for a very long time: the fixed-point oracle.
Matrix long_run_sinkhorn(const Matrix& cost, double eps, int iters) {
    const Matrix K = (-cost.array() / eps).exp().matrix();
    const Eigen::Index n = cost.rows(), m = cost.cols();
    Vector u = Vector::Ones(n), v = Vector::Ones(m);
    for (int i = 0; i < iters; ++i) {
        u = (1.0 / n) / (K * v).array();
        v = (1.0 / m) / (K.transpose() * u).array();
    }
    return u.asDiagonal() * K * v.asDiagonal();
}

}  // namespace

TEST_CASE("marginal sequence validation") {
    MarginalSequence s;
    s.marginals = {Matrix::Zero(3, 2), Matrix::Zero(4, 2)};
    s.times = {0.0, 1.0};
    CHECK_NOTHROW(s.validate());
    s.times = {1.0, 0.5};
    CHECK_THROWS_AS(s.validate(), DataError);
    s.times = {0.0, 1.0};
    s.marginals[1] = Matrix::Zero(4, 3);
    CHECK_THROWS_AS(s.validate(), DataError);
    s.marginals = {Matrix::Zero(3, 2)};
    s.times = {0.0};
    CHECK_THROWS_AS(s.validate(), DataError);
}

TEST_CASE("uniform times") {
    const auto t = uniform_times(8);
    REQUIRE(t.size() == 8);
    for (int k = 0; k < 8; ++k) CHECK(t[k] == doctest::Approx(k / 7.0).epsilon(1e-15));
}

TEST_CASE("sinkhorn trivial cases") {
    const auto one = sinkhorn_plan(Matrix::Constant(1, 1, 3.0), 0.1, 100);
    CHECK(one.plan(0, 0) == doctest::Approx(1.0));
    Matrix sym(2, 2);
    sym << 0.0, 1.0, 1.0, 0.0;
    sym = Matrix::Constant(2, 2, 1.0);
    const auto u = sinkhorn_plan(sym, 0.1, 100);
    CHECK((u.plan.array() - 0.25).abs().maxCoeff() < 1e-12);
    Rng rng(1);
    const Matrix c = random_matrix(4, 5, rng).cwiseAbs();
    const auto big = sinkhorn_plan(c, 1e6, 1000);
    CHECK((big.plan.array() - 1.0 / 20.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("sinkhorn: identical point sets give a near-permutation") {
    Rng rng(2);
    const Matrix x = random_matrix(20, 3, rng);
    const Matrix c = squared_euclidean_cost(x, x);
    const auto r = sinkhorn_plan(c, 1e-3 * median_of(c), 20000);
    for (int i = 0; i < 20; ++i) CHECK(r.plan(i, i) * 20.0 > 0.99);
}

TEST_CASE("sinkhorn agrees with a long-run fixed point on random 3x3 costs") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix c = random_matrix(3, 3, rng).cwiseAbs();
        const double eps = 0.2 + uniform01(rng);
        const auto r = sinkhorn_plan(c, eps, 5000);
        CHECK((r.plan - long_run_sinkhorn(c, eps, 10000)).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("sinkhorn marginals within 1e-6 on random problems") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + uniform_index(rng, 30), m = 2 + uniform_index(rng, 30);
        const Matrix c = squared_euclidean_cost(random_matrix(n, 3, rng), random_matrix(m, 3, rng));
        const auto r = sinkhorn_plan(c, 0.05 * median_of(c), 200000, 1e-10);
        CHECK(r.converged);
        CHECK(max_marginal_error(r.plan) < 1e-6);
        CHECK(r.plan.sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("sinkhorn log-domain fallback handles extreme cost ranges") {
    Rng rng(5);
    const Matrix c = squared_euclidean_cost(random_matrix(10, 2, rng, 100.0), random_matrix(10, 2, rng, 100.0));
    const auto r = sinkhorn_plan(c, 1e-3 * median_of(c), 200000);
    CHECK(r.plan.allFinite());
    CHECK(max_marginal_error(r.plan) < 1e-6);
}

TEST_CASE("sinkhorn rejects bad inputs") {
    CHECK_THROWS_AS(sinkhorn_plan(Matrix::Ones(2, 2), 0.0, 10), ParameterError);
    Matrix c = Matrix::Ones(2, 2);
    c(0, 1) = std::nan("");
    CHECK_THROWS_AS(sinkhorn_plan(c, 1.0, 10), ParameterError);
}

TEST_CASE("couplings pair rows of A with rows of B") {
    Rng rng(6);
    const Matrix a = random_matrix(7, 2, rng), b = random_matrix(5, 2, rng);
    for (auto kind : {CouplingKind::random_perm, CouplingKind::index_aligned, CouplingKind::sinkhorn_ot}) {
        const auto pairs = couple(Coupling{kind}, a, b, 23, rng);
        CHECK(pairs.size() == 23);
        for (const auto& [i, j] : pairs) {
            CHECK(i >= 0);
            CHECK(i < 7);
            CHECK(j >= 0);
            CHECK(j < 5);
        }
        CHECK(coupling_from_string(to_string(kind)) == kind);
    }
    const auto aligned = couple(Coupling{CouplingKind::index_aligned}, a, b, 12, rng);
    for (int i = 0; i < 12; ++i) {
        CHECK(aligned[i].first == i % 7);
        CHECK(aligned[i].second == i % 5);
    }
    const auto single = couple(Coupling{CouplingKind::sinkhorn_ot}, a.topRows(1), b.topRows(1), 3, rng);
    for (const auto& p : single) CHECK(p == IndexPair{0, 0});
    CHECK_THROWS_AS(coupling_from_string("greedy"), ParameterError);
}

TEST_CASE("sinkhorn coupling on identical sets mostly pairs points with themselves") {
    Rng rng(7);
    const Matrix x = random_matrix(64, 3, rng);
    Coupling c{CouplingKind::sinkhorn_ot};
    c.epsilon_scale = 0.005;
    const auto pairs = couple(c, x, x, 64, rng);
    int same = 0;
    for (const auto& [i, j] : pairs) same += i == j;
    CHECK(same >= 60);
}

TEST_CASE("euler: constant field, linear growth, exponential convergence") {
    const FunctionField constant(2, [](double, const Matrix& x, const Matrix&) {
        Matrix v(x.rows(), 2);
        v.col(0).setConstant(0.5);
        v.col(1).setConstant(-2.0);
        return v;
    });
    Matrix x0(1, 2);
    x0 << 1.0, 1.0;
    const auto r = euler_integrate(constant, x0, 0.0, 1.0, 16);
    CHECK(r.endpoint(0, 0) == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(r.endpoint(0, 1) == doctest::Approx(-1.0).epsilon(1e-14));

    const FunctionField identity(1, [](double, const Matrix& x, const Matrix&) { return x; });
    const Matrix one = Matrix::Ones(1, 1);
    CHECK(euler_integrate(identity, one, 0.0, 1.0, 1).endpoint(0, 0) == 2.0);
    CHECK(std::abs(euler_integrate(identity, one, 0.0, 1.0, 1000).endpoint(0, 0) / std::exp(1.0) - 1.0) < 0.003);
}

TEST_CASE("euler: diverged rows are frozen, flagged and excluded") {
    const FunctionField blowup(1, [](double, const Matrix& x, const Matrix&) { return Matrix((x.array() * x.array() * 1e200).matrix()); });
    Matrix x0(3, 1);
    x0 << 0.0, 1e60, 0.0;
    const auto r = euler_integrate(blowup, x0, 0.0, 1.0, 4);
    CHECK(r.n_diverged == 1);
    CHECK(r.diverged[1]);
    CHECK_FALSE(r.diverged[0]);
    CHECK(finite_rows(r.endpoint).rows() == 2);
}

TEST_CASE("flow-map composition is bit-identical") {
    Rng rng(8);
    const Matrix w = random_matrix(3, 3, rng, 0.5);
    const FunctionField f(3, [&](double t, const Matrix& x, const Matrix&) {
        return Matrix((x * w).array().sin().matrix() + Matrix::Constant(x.rows(), 3, t));
    });
    const Matrix x0 = random_matrix(10, 3, rng);
    const auto grid = time_grid(0.0, 1.0, 100);
    for (int split : {1, 37, 50, 99}) {
        const std::vector<double> g1(grid.begin(), grid.begin() + split + 1), g2(grid.begin() + split, grid.end());
        const Matrix mid = euler_integrate_grid(f, x0, g1).endpoint;
        const Matrix two = euler_integrate_grid(f, mid, g2).endpoint;
        const Matrix direct = euler_integrate_grid(f, x0, grid).endpoint;
        CHECK((two.array() == direct.array()).all());
    }
}

TEST_CASE("pushforward chain") {
    Rng rng(9);
    const Matrix x0 = random_matrix(5, 2, rng);
    const FunctionField zero(2, [](double, const Matrix& x, const Matrix&) { return Matrix(Matrix::Zero(x.rows(), x.cols())); });
    const auto times = uniform_times(8);
    const auto p = pushforward_chain(zero, x0, times, 100);
    REQUIRE(p.sets.size() == 8);
    for (const auto& s : p.sets) CHECK(s == x0);

    const FunctionField lin(2, [](double t, const Matrix& x, const Matrix&) { return Matrix((x * (1.0 + t)).eval()); });
    const auto two = pushforward_chain(lin, x0, {0.0, 1.0}, 50);
    const auto direct = euler_integrate(lin, x0, 0.0, 1.0, 50);
    CHECK((two.sets[1].array() == direct.endpoint.array()).all());
}

TEST_CASE("source conditioning resets at each recorded time") {
    std::vector<double> seen;
    const FunctionField f(1, [&](double, const Matrix& x, const Matrix& src) {
        seen.push_back(src(0, 0));
        return Matrix(Matrix::Ones(x.rows(), 1));
    });
    const auto p = pushforward_chain(f, Matrix::Zero(1, 1), {0.0, 0.5, 1.0}, 2);
    CHECK(p.sets[2](0, 0) == doctest::Approx(1.0));
    REQUIRE(seen.size() == 4);
    CHECK(seen[0] == 0.0);
    CHECK(seen[1] == 0.0);
    CHECK(seen[2] == doctest::Approx(0.5));
    CHECK(seen[3] == doctest::Approx(0.5));
}
