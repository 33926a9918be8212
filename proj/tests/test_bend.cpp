#include "doctest.h"
#include "support.hpp"

#include <cmath>

#include "flux/bend.hpp"

using namespace flux;
using flux::test::fd_gradient;
using flux::test::random_matrix;
using flux::test::random_vector;
using flux::test::rel_error;

namespace {

// Smooth bend net so that parameter finite differences are well defined.
BendModel tanh_bend(int d, int hidden, Rng& rng) {
    return BendModel{Mlp({2 * d + 1, hidden, hidden, d}, Activation::tanh, rng), ""};
}

RbfMetric ring_metric() {
    RbfMetric m;
    m.centers.resize(12, 2);
    for (int i = 0; i < 12; ++i) {
        const double a = 2.0 * M_PI * i / 12.0;
        m.centers.row(i) << std::cos(a), std::sin(a);
    }
    m.bandwidth = 0.3;
    m.a = 4.0;
    m.b = -2.0;
    return m;
}

}  // namespace

TEST_CASE("gamma vanishes at both endpoints") {
    CHECK(bend_gamma(0.0) == 0.0);
    CHECK(bend_gamma(1.0) == 0.0);
    CHECK(bend_gamma(0.5) == 1.0);
    CHECK(bend_gamma_derivative(0.5) == 0.0);
}

TEST_CASE("interpolant hits both endpoints exactly for any network") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + trial % 5;
        const BendModel b = make_bend(d, 16, rng);
        const Vector x0 = random_vector(d, rng, 3.0), x1 = random_vector(d, rng, 3.0);
        CHECK((bend_interpolant(b, x0, x1, 0.0) - x0).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((bend_interpolant(b, x0, x1, 1.0) - x1).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("zero network gives the straight line and its constant tangent") {
    BendModel b{Mlp::zeros({7, 5, 5, 3}, Activation::relu), ""};
    Rng rng(22);
    const Vector x0 = random_vector(3, rng), x1 = random_vector(3, rng);
    for (double tau : {0.0, 0.25, 0.5, 1.0}) {
        CHECK((bend_interpolant(b, x0, x1, tau) - ((1 - tau) * x0 + tau * x1)).norm() < 1e-12);
        CHECK((bend_tangent(b, x0, x1, tau) - (x1 - x0)).norm() < 1e-10);
    }
    CHECK(path_energy(b, UniformMetric{}, x0, x1) == doctest::Approx((x1 - x0).squaredNorm()).epsilon(1e-10));
}

TEST_CASE("path energy equals the midpoint rule on a straight path") {
    BendModel b{Mlp::zeros({5, 4, 4, 2}, Activation::relu), ""};
    const MetricModel metric = ring_metric();
    const Vector x0{{-1.5, 0.2}}, x1{{1.5, -0.1}};
    double expected = 0.0;
    for (int i = 0; i < 8; ++i) {
        const double tau = (i + 0.5) / 8.0;
        expected += metric_scalar(metric, (1 - tau) * x0 + tau * x1) * (x1 - x0).squaredNorm();
    }
    CHECK(path_energy(b, metric, x0, x1, 8) == doctest::Approx(expected / 8.0).epsilon(1e-10));
}

TEST_CASE("tangent agrees with a fine difference of the interpolant") {
    Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        const BendModel b = tanh_bend(3, 8, rng);
        const Vector x0 = random_vector(3, rng), x1 = random_vector(3, rng);
        const double tau = 0.05 + 0.9 * uniform01(rng);
        const double h = 1e-6;
        const Vector fd = (bend_interpolant(b, x0, x1, tau + h) - bend_interpolant(b, x0, x1, tau - h)) / (2 * h);
        CHECK(rel_error(bend_tangent(b, x0, x1, tau), fd) < 1e-5);
    }
}

TEST_CASE("batched points and tangents match per-pair evaluation") {
    Rng rng(24);
    const BendModel b = make_bend(4, 16, rng);
    const Matrix x0 = random_matrix(4, 10, rng), x1 = random_matrix(4, 10, rng);
    Vector tau(10);
    for (int j = 0; j < 10; ++j) tau(j) = j / 9.0;
    const Matrix pts = bend_points(b, x0, x1, tau), tan = bend_tangents(b, x0, x1, tau);
    for (int j = 0; j < 10; ++j) {
        CHECK((pts.col(j) - bend_interpolant(b, x0.col(j), x1.col(j), tau(j))).norm() < 1e-12);
        CHECK((tan.col(j) - bend_tangent(b, x0.col(j), x1.col(j), tau(j))).norm() < 1e-10);
    }
}

TEST_CASE("batch loss equals mean path energy at midpoint nodes") {
    Rng rng(25);
    const BendModel b = make_bend(2, 16, rng);
    const MetricModel metric = ring_metric();
    const Matrix x0 = random_matrix(2, 5, rng), x1 = random_matrix(2, 5, rng);
    Matrix tau(5, 8);
    for (int i = 0; i < 8; ++i) tau.col(i).setConstant((i + 0.5) / 8.0);
    double expected = 0.0;
    for (int p = 0; p < 5; ++p) expected += path_energy(b, metric, x0.col(p), x1.col(p), 8);
    CHECK(bend_batch_loss(b, metric, x0, x1, tau).loss == doctest::Approx(expected / 5.0).epsilon(1e-10));
}

TEST_CASE("batch loss gradient matches finite differences") {
    Rng rng(26);
    const MetricModel metric = ring_metric();
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        BendModel b = tanh_bend(2, 6, rng);
        const Matrix x0 = random_matrix(2, 3, rng), x1 = random_matrix(2, 3, rng);
        Matrix tau(3, 4);
        for (Eigen::Index i = 0; i < tau.size(); ++i) tau(i) = 0.01 + 0.98 * uniform01(rng);
        const Vector analytic = bend_batch_loss(b, metric, x0, x1, tau).grad;
        const Vector fd = fd_gradient(
            [&](const Vector& p) {
                BendModel c = b;
                c.net.params() = p;
                return bend_batch_loss(c, metric, x0, x1, tau).loss;
            },
            b.net.params(), 1e-6);
        CHECK(rel_error(analytic, fd) < 1e-5);
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("invalid tau and shape mismatches are rejected") {
    Rng rng(27);
    const BendModel b = make_bend(2, 4, rng);
    const Vector x0 = Vector::Zero(2), x1 = Vector::Ones(2);
    CHECK_THROWS_AS(bend_interpolant(b, x0, x1, 1.5), ParameterError);
    CHECK_THROWS_AS(bend_interpolant(b, x0, x1, std::nan("")), ParameterError);
    CHECK_THROWS_AS(bend_interpolant(b, Vector::Zero(3), x1, 0.5), ShapeError);
    CHECK_THROWS_AS(make_bend(0, 4, rng), ParameterError);
}

TEST_CASE("training lowers path energy through a low-density gap") {
    // Endpoints on opposite sides of a ring of high score: the straight chord
    // crosses the empty center, where the metric is large.
    MarginalSequence seq;
    Rng data_rng(28);
    for (double side : {-1.0, 1.0}) {
        Matrix m(40, 2);
        for (int i = 0; i < 40; ++i) {
            const double a = (side < 0 ? M_PI : 0.0) + 0.2 * standard_normal(data_rng);
            m.row(i) << std::cos(a), std::sin(a);
        }
        seq.marginals.push_back(m);
    }
    seq.times = {0.0, 1.0};
    const MetricModel metric = ring_metric();
    BendTrainConfig cfg;
    cfg.epochs = 40;
    cfg.lr = 3e-3;
    cfg.hidden = 32;
    Rng rng(29);
    BendTrainReport rep;
    const BendModel b = train_bend(seq, {0, 1}, metric, Coupling{}, cfg, rng, &rep);
    REQUIRE(rep.best_loss.size() == 40);
    CHECK(rep.best_loss.back() < 0.8 * rep.initial_loss);
    for (std::size_t e = 1; e < rep.best_loss.size(); ++e) CHECK(rep.best_loss[e] <= rep.best_loss[e - 1]);
    // Endpoints are still exact after training.
    const Vector x0 = seq.marginals[0].row(0).transpose(), x1 = seq.marginals[1].row(0).transpose();
    CHECK((bend_interpolant(b, x0, x1, 0.0) - x0).norm() <= 1e-12);
    CHECK((bend_interpolant(b, x0, x1, 1.0) - x1).norm() <= 1e-12);
}

TEST_CASE("training rejects empty marginals and one-marginal schedules") {
    MarginalSequence seq;
    seq.marginals = {Matrix::Zero(0, 2), Matrix::Ones(3, 2)};
    seq.times = {0.0, 1.0};
    Rng rng(30);
    CHECK_THROWS_AS(train_bend(seq, {0, 1}, UniformMetric{}, Coupling{}, BendTrainConfig{}, rng), DataError);
    CHECK_THROWS_AS(train_bend(seq, {1}, UniformMetric{}, Coupling{}, BendTrainConfig{}, rng), DataError);
}

TEST_CASE("bend checkpoint round-trips with its metric hash") {
    Rng rng(31);
    BendModel b = make_bend(3, 8, rng);
    b.metric_hash = "abc123";
    const BendModel c = bend_from_checkpoint(bend_checkpoint(b));
    CHECK(c.metric_hash == "abc123");
    CHECK(c.net.params() == b.net.params());
}
