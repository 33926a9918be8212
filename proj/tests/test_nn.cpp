#include "doctest.h"
#include "support.hpp"

#include <cmath>
#include <numbers>

#include "flux/nn.hpp"

using namespace flux;
using flux::test::random_matrix;
using flux::test::random_vector;

TEST_CASE("zero network outputs zeros") {
    const Mlp net = Mlp::zeros({4, 7, 3}, Activation::relu);
    Rng rng(1);
    const Vector y = net.forward(random_vector(4, rng));
    CHECK(y.size() == 3);
    CHECK(y.isZero(0.0));
}

TEST_CASE("relu clamps negatives on an identity 1-1 net") {
    Mlp net = Mlp::zeros({1, 1, 1}, Activation::relu);
    net.weight(0)(0, 0) = 1.0;
    net.weight(1)(0, 0) = 1.0;
    CHECK(net.forward(Vector(Vector::Constant(1, -2.0)))(0) == 0.0);
    CHECK(net.forward(Vector(Vector::Constant(1, 3.0)))(0) == 3.0);
}

TEST_CASE("forward matches hand-written matrix products on a 2-3-1 net") {
    Rng rng(2);
    for (Activation act : {Activation::relu, Activation::tanh}) {
        const Mlp net({2, 3, 1}, act, rng);
        const Vector x = random_vector(2, rng);
        const Matrix w0 = net.weight(0), w1 = net.weight(1);
        const Vector b0 = net.bias(0), b1 = net.bias(1);
        Vector h = w0 * x + b0;
        for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = act == Activation::relu ? std::max(0.0, h(i)) : std::tanh(h(i));
        const Vector expected = w1 * h + b1;
        CHECK((net.forward(x) - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("input dimension mismatch is a shape error") {
    Rng rng(3);
    const Mlp net({3, 4, 2}, Activation::relu, rng);
    CHECK_THROWS_AS(net.forward(Vector(Vector::Zero(2))), ShapeError);
    CHECK_THROWS_AS(net.forward(Matrix(Matrix::Zero(4, 5))), ShapeError);
}

TEST_CASE("batched forward equals per-column forward") {
    Rng rng(4);
    const Mlp net({3, 6, 6, 2}, Activation::tanh, rng);
    const Matrix x = random_matrix(3, 9, rng);
    const Matrix y = net.forward(x);
    for (int c = 0; c < 9; ++c) CHECK((y.col(c) - net.forward(Vector(x.col(c)))).norm() == 0.0);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
    Rng rng(5);
    const Mlp net({3, 5, 2}, Activation::relu, rng);
    const auto g = net.gradients(random_vector(3, rng), Vector::Zero(2));
    CHECK(g.params.isZero(0.0));
    CHECK(g.input.isZero(0.0));
}

TEST_CASE("backward: linear 1-1 net") {
    Mlp net = Mlp::zeros({1, 1}, Activation::relu);
    net.weight(0)(0, 0) = 0.7;
    net.bias(0)(0) = -0.3;
    const auto g = net.gradients(Vector::Constant(1, 2.5), Vector::Constant(1, 1.0));
    CHECK(g.params(0) == doctest::Approx(2.5));
    CHECK(g.params(1) == doctest::Approx(1.0));
    CHECK(g.input(0) == doctest::Approx(0.7));
}

TEST_CASE("backward: non-finite input is a numeric error") {
    Rng rng(6);
    const Mlp net({2, 3, 1}, Activation::relu, rng);
    Vector x(2);
    x << 1.0, std::nan("");
    CHECK_THROWS_AS(net.gradients(x, Vector::Ones(1)), NumericError);
}

TEST_CASE("backward matches central differences on random 3-5-2 nets") {
    Rng rng(7);
    for (Activation act : {Activation::relu, Activation::tanh}) {
        int cases = 0;
        while (cases < 100) {
            Mlp net({3, 5, 2}, act, rng);
            const Vector x = random_vector(3, rng);
            if (act == Activation::relu && flux::test::kink_margin(net, x) < 1e-3) continue;
            const Vector up = random_vector(2, rng);
            const auto g = net.gradients(x, up);
            Mlp probe = net;
            const Vector fd_params = flux::test::fd_gradient(
                [&](const Vector& p) {
                    probe.params() = p;
                    return up.dot(probe.forward(x));
                },
                net.params(), 1e-5);
            const Vector fd_input = flux::test::fd_gradient([&](const Vector& xi) { return up.dot(net.forward(xi)); }, x, 1e-5);
            CHECK(flux::test::rel_error(g.params, fd_params) < 1e-4);
            CHECK(flux::test::rel_error(g.input, fd_input) < 1e-4);
            ++cases;
        }
    }
}

TEST_CASE("AdamW: zero gradients and no decay leave params unchanged") {
    Rng rng(8);
    Vector p = random_vector(6, rng);
    const Vector before = p;
    AdamW opt(6, {0.01, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i) opt.step(p, Vector::Zero(6));
    CHECK((p - before).norm() == 0.0);
    CHECK(opt.step_count() == 5);
}

TEST_CASE("AdamW: first step on a scalar") {
    // m = 0.1, v = 0.001; bias corrected m_hat = 1, v_hat = 1, so the step is
    // lr * 1 / (1 + eps).
    Vector p = Vector::Constant(1, 2.0);
    AdamW opt(1, {0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.step(p, Vector::Constant(1, 1.0));
    const double expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(p(0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(2.0 - p(0) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(opt.first_moment()(0) == doctest::Approx(0.1));
    CHECK(opt.second_moment()(0) == doctest::Approx(0.001));
}

TEST_CASE("AdamW: decoupled decay with zero gradients") {
    Vector p(3);
    p << 1.0, -2.0, 0.5;
    const Vector before = p;
    AdamW opt(3, {0.1, 0.9, 0.999, 1e-8, 0.01});
    opt.step(p, Vector::Zero(3));
    CHECK((p - before * (1.0 - 0.1 * 0.01)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("plateau scheduler reduces once bad epochs exceed patience") {
    PlateauScheduler s(0.5, 2);
    double lr = 1.0;
    lr = s.update(1.0, lr);
    lr = s.update(1.0, lr);
    lr = s.update(1.0, lr);
    CHECK(lr == 1.0);
    lr = s.update(1.0, lr);
    CHECK(lr == 0.5);
    lr = s.update(0.5, lr);
    CHECK(lr == 0.5);
}

TEST_CASE("time embedding") {
    const TimeEmbedding e{16, 0.25, 8.0};
    const Vector z = e.embed(0.0);
    REQUIRE(z.size() == 16);
    for (int i = 0; i < 16; i += 2) {
        CHECK(z(i) == 0.0);
        CHECK(z(i + 1) == 1.0);
    }
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const double t = 4.0 * uniform01(rng) - 2.0;
        const double dt = 1e-3 * standard_normal(rng);
        const Vector a = e.embed(t), b = e.embed(t + dt);
        CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
        CHECK((a - b).norm() <= e.max_freq * 2.0 * std::numbers::pi * std::abs(dt) * std::sqrt(16.0) + 1e-15);
    }
}

TEST_CASE("gumbel schedule") {
    const GumbelSchedule s{1.0, 0.2, 0.9995, 50};
    for (int e : {0, 1, 10, 100, 5000, 100000}) CHECK(s.temperature(e) == doctest::Approx(std::max(0.2, std::pow(0.9995, e))));
    CHECK_FALSE(s.hard_enabled(0));
    CHECK_FALSE(s.hard_enabled(49));
    CHECK(s.hard_enabled(50));
}

TEST_CASE("gumbel softmax: simplex, one-hot, temperature limit") {
    Rng rng(10);
    for (int trial = 0; trial < 500; ++trial) {
        const int k = 2 + uniform_index(rng, 5);
        const Vector logits = random_vector(k, rng, 3.0);
        const double tau = 0.05 + 2.0 * uniform01(rng);
        const auto soft = gumbel_softmax(logits, tau, false, rng);
        CHECK(std::abs(soft.weights.sum() - 1.0) < 1e-6);
        CHECK(soft.weights.minCoeff() >= 0.0);
        const auto hard = gumbel_softmax(logits, tau, true, rng);
        int ones = 0, zeros = 0;
        for (int j = 0; j < k; ++j) {
            ones += hard.weights(j) == 1.0;
            zeros += hard.weights(j) == 0.0;
        }
        CHECK(ones == 1);
        CHECK(zeros == k - 1);
        Eigen::Index arg;
        hard.soft.maxCoeff(&arg);
        CHECK(hard.weights(arg) == 1.0);
    }
    const auto flat = gumbel_softmax(Vector::LinSpaced(4, -1.0, 1.0), 1e9, false, rng);
    CHECK((flat.weights.array() - 0.25).abs().maxCoeff() < 1e-6);
    CHECK_THROWS_AS(gumbel_softmax(Vector::Zero(3), 0.0, false, rng), ParameterError);
}

TEST_CASE("gumbel hard selection frequency for equal logits") {
    Rng rng(11);
    int first = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) first += gumbel_softmax(Vector::Zero(2), 1.0, true, rng).weights(0) == 1.0;
    CHECK(std::abs(static_cast<double>(first) / n - 0.5) < 0.01);
}

TEST_CASE("softmax backward matches finite differences") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 2 + uniform_index(rng, 4);
        const Vector z = random_vector(k, rng);
        const Vector dy = random_vector(k, rng);
        const double tau = 0.3 + uniform01(rng);
        const Vector analytic = softmax_backward(softmax(z / tau), dy, tau);
        const Vector fd = flux::test::fd_gradient([&](const Vector& zz) { return dy.dot(softmax(zz / tau)); }, z);
        CHECK(flux::test::rel_error(analytic, fd) < 1e-6);
    }
}

TEST_CASE("categorical entropy") {
    CHECK(std::abs(categorical_entropy(one_hot(3, 1))) < 1e-10);
    CHECK(categorical_entropy(Vector::Constant(2, 0.5)) == doctest::Approx(std::log(2.0)).epsilon(1e-10));
    Vector w(2);
    w << 0.9, 0.1;
    CHECK(categorical_entropy(w) == doctest::Approx(0.3251).epsilon(1e-4));
}

TEST_CASE("activation names round-trip") {
    CHECK(activation_from_string(to_string(Activation::relu)) == Activation::relu);
    CHECK(activation_from_string(to_string(Activation::tanh)) == Activation::tanh);
    CHECK_THROWS_AS(activation_from_string("gelu"), ParameterError);
}
