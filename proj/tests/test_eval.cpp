#include "doctest.h"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "flux/eval.hpp"

using namespace flux;
using flux::test::random_labels;
using flux::test::random_matrix;

namespace {

// ARI from explicit pair enumeration.
double ari_pairs(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size();
    double both = 0, same_a = 0, same_b = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sa = a[i] == a[j], sb = b[i] == b[j];
            both += sa && sb;
            same_a += sa;
            same_b += sb;
            pairs += 1;
        }
    const double expected = same_a * same_b / pairs;
    const double max = 0.5 * (same_a + same_b);
    if (max == expected) return a == b ? 1.0 : 0.0;
    return (both - expected) / (max - expected);
}

// NMI = 2 I / (H_a + H_b) by direct summation over joint frequencies.
double nmi_direct(const std::vector<int>& a, const std::vector<int>& b) {
    const double n = static_cast<double>(a.size());
    std::map<int, double> pa, pb;
    std::map<std::pair<int, int>, double> pab;
    for (std::size_t i = 0; i < a.size(); ++i) {
        pa[a[i]] += 1 / n;
        pb[b[i]] += 1 / n;
        pab[{a[i], b[i]}] += 1 / n;
    }
    double ha = 0, hb = 0, mi = 0;
    for (auto [k, p] : pa) ha -= p * std::log(p);
    for (auto [k, p] : pb) hb -= p * std::log(p);
    for (auto [k, p] : pab) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
    return 2 * mi / (ha + hb);
}

std::vector<double> column(const Matrix& m, Eigen::Index j) {
    return {m.col(j).data(), m.col(j).data() + m.rows()};
}

// Straight W1 of equal-size sets by sorting.
double sorted_distance(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

class IdentityTransport final : public TransportModel {
public:
    Matrix transport(const Matrix& x, int, int) const override { return x; }
    bool shared_ode() const override { return true; }
};

}  // namespace

TEST_CASE("one-dimensional W1 anchors") {
    CHECK(w1_1d({1, 2, 3}, {3, 1, 2}) == 0.0);
    CHECK(w1_1d({0}, {2.5}) == doctest::Approx(2.5));
    CHECK(w1_1d({0, 1}, {0, 1, 0, 1}) == doctest::Approx(0.0).epsilon(1e-15));
    // Quantile functions: {0} vs {0, 1} differ on half the mass by 1.
    CHECK(w1_1d({0}, {0, 1}) == doctest::Approx(0.5));
}

TEST_CASE("sliced W1 matches sorting per fixed direction") {
    Rng rng(61);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix a = random_matrix(30, 2, rng), b = random_matrix(30, 2, rng, 2.0);
        const Matrix dirs = random_directions(2, 8, rng);
        const Vector got = projected_w1(a, b, dirs);
        const Matrix pa = a * dirs.transpose(), pb = b * dirs.transpose();
        for (int j = 0; j < 8; ++j) CHECK(std::abs(got(j) - sorted_distance(column(pa, j), column(pb, j))) < 1e-12);
        CHECK((sorted_w1(sorted_projections(a, dirs), sorted_projections(b, dirs)) - got).cwiseAbs().maxCoeff() < 1e-12);
    }
    Rng r2(1);
    const Matrix a = random_matrix(20, 3, rng);
    CHECK(sliced_w1(a, a, 64, r2) == 0.0);
}

TEST_CASE("random directions are unit vectors") {
    Rng rng(62);
    const Matrix d = random_directions(5, 100, rng);
    for (int i = 0; i < 100; ++i) CHECK(d.row(i).norm() == doctest::Approx(1.0));
}

TEST_CASE("property: sliced W1 symmetry and triangle inequality") {
    Rng rng(63);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix a = random_matrix(40, 3, rng), b = random_matrix(40, 3, rng, 1.5), c = random_matrix(40, 3, rng, 0.5);
        const Matrix dirs = random_directions(3, 128, rng);
        const double ab = projected_w1(a, b, dirs).mean(), ba = projected_w1(b, a, dirs).mean();
        const double ac = projected_w1(a, c, dirs).mean(), cb = projected_w1(c, b, dirs).mean();
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        // Same directions on all three sides, so the inequality holds exactly.
        CHECK(ab <= ac + cb + 1e-12);
    }
}

TEST_CASE("wd suite: identity flow on identical marginals is zero") {
    Rng rng(64);
    MarginalSequence seq;
    const Matrix base = random_matrix(50, 2, rng);
    for (int k = 0; k < 4; ++k) seq.marginals.push_back(base);
    seq.times = uniform_times(4);
    const auto s = wd_suite(IdentityTransport(), seq, 32, 7);
    CHECK(s.wd1.mean == 0.0);
    REQUIRE(s.wd2);
    CHECK(s.wd2->mean == 0.0);
    REQUIRE(s.wd_fc);
    CHECK(s.wd_fc->mean == 0.0);
    CHECK(s.one_hop.size() == 3);

    MarginalSequence two;
    two.marginals = {base, base};
    two.times = {0.0, 1.0};
    CHECK_FALSE(wd_suite(IdentityTransport(), two, 32, 7).wd2.has_value());
}

TEST_CASE("wd suite: exact translation field reproduces a translation chain") {
    Rng rng(65);
    const Vector shift{{1.5, -0.5}};
    MarginalSequence seq;
    const Matrix base = random_matrix(400, 2, rng);
    for (int k = 0; k < 3; ++k) seq.marginals.push_back(base.rowwise() + (k * shift).transpose());
    seq.times = uniform_times(3);
    // v = c (T - 1) moves one marginal per 1 / (T - 1) of model time.
    const FunctionField field(2, [&](double, const Matrix& x, const Matrix&) {
        return Matrix((Vector(shift * 2.0).transpose()).replicate(x.rows(), 1));
    });
    const FieldTransport transport(field, seq.times, 100);
    const auto s = wd_suite(transport, seq, 128, 3);
    // Against an independent resample of the same law, which sets the Monte-Carlo floor.
    Rng r2(66);
    const Matrix other = random_matrix(400, 2, r2);
    Rng r3(3);
    const double floor = sliced_w1(base, other, 128, r3);
    CHECK(s.wd1.mean < 2 * floor);
    CHECK(s.wd2->mean < 2 * floor);
    CHECK(s.wd_fc->mean < 2 * floor);
    CHECK(s.wd1.mean < 1e-9);
}

TEST_CASE("segment majority and tie rule") {
    const auto one = segment_majority({3, 3, 3, 3}, {0, 0, 1, 1});
    CHECK(one.labels == std::vector<int>{3, 3});
    CHECK(segment_majority({0, 0, 1}, {5, 5, 5}).labels == std::vector<int>{0});
    CHECK(segment_majority({1, 0}, {2, 2}).labels == std::vector<int>{0});
    const auto ordered = segment_majority({1, 0, 0}, {9, 2, 2});
    CHECK(ordered.segments == std::vector<int>{2, 9});
    CHECK(ordered.labels == std::vector<int>{0, 1});
}

TEST_CASE("ARI anchors and pair-counting oracle") {
    CHECK(ari({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
    CHECK(ari({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    CHECK(ari({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(ari_pairs({0, 0, 1, 1}, {0, 1, 0, 1})).epsilon(1e-12));
    CHECK(ari({0, 0, 1, 1}, {0, 1, 0, 1}) <= 0.0);
    CHECK(ari({0, 0, 0}, {0, 0, 0}) == 1.0);
    CHECK(ari({0, 0, 0, 0}, {0, 0, 1, 1}) == 0.0);

    Rng rng(67);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 4 + trial % 10;
        const auto a = random_labels(n, 2 + trial % 3, rng), b = random_labels(n, 2 + trial % 4, rng);
        CHECK(std::abs(ari(a, b) - ari_pairs(a, b)) < 1e-10);
    }
}

TEST_CASE("NMI anchors and direct summation oracle") {
    CHECK(nmi({0, 1, 1, 2}, {0, 1, 1, 2}) == doctest::Approx(1.0));
    CHECK(nmi({0, 0}, {0, 0}) == 1.0);
    CHECK(nmi({0, 0, 1, 1}, {0, 0, 0, 0}) == 0.0);
    CHECK(nmi({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(68);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 6 + trial % 10;
        auto a = random_labels(n, 3, rng), b = random_labels(n, 2 + trial % 3, rng);
        a[0] = 0, a[1] = 1, b[0] = 0, b[1] = 1;  // both non-constant
        CHECK(std::abs(nmi(a, b) - nmi_direct(a, b)) < 1e-10);
    }

    const auto a = random_labels(20000, 3, rng), b = random_labels(20000, 3, rng);
    CHECK(nmi(a, b) < 0.01);
}

TEST_CASE("property: ARI and NMI ignore relabeling of predictions") {
    Rng rng(69);
    for (int trial = 0; trial < 100; ++trial) {
        const auto a = random_labels(12, 3, rng), b = random_labels(12, 3, rng);
        std::vector<int> perm{0, 1, 2};
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> relabeled(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) relabeled[i] = perm[b[i]] + 10;
        CHECK(ari(a, b) == doctest::Approx(ari(a, relabeled)).epsilon(1e-12));
        CHECK(nmi(a, b) == doctest::Approx(nmi(a, relabeled)).epsilon(1e-12));
    }
}

TEST_CASE("switch rate and gating entropy") {
    CHECK(switch_rate({{0, 1, 2}, {1, 1, 1}}) == 0.0);
    CHECK(switch_rate({{0, 1, 2, 3}, {0, 1, 0, 1}}) == 1.0);
    CHECK(switch_rate({{0, 1, 2, 3, 4}, {0, 0, 1, 1, 1}}) == doctest::Approx(0.25));

    CHECK(std::abs(gating_entropy(Matrix::Identity(3, 3))) < 1e-10);
    CHECK(gating_entropy(Matrix::Constant(4, 3, 1.0 / 3.0)) == doctest::Approx(std::log(3.0)));
    Rng rng(70);
    Matrix p(5, 4);
    for (int i = 0; i < 5; ++i) p.row(i) = flux::test::random_simplex(4, rng).transpose();
    double mean = 0.0;
    for (int i = 0; i < 5; ++i) mean += categorical_entropy(p.row(i).transpose()) / 5.0;
    CHECK(gating_entropy(p) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("GMM recovers separated blobs and increases likelihood monotonically") {
    Rng rng(71);
    Matrix x(300, 2);
    std::vector<int> truth(300);
    for (int i = 0; i < 300; ++i) {
        truth[i] = i % 3;
        x.row(i) = flux::test::random_vector(2, rng, 0.3).transpose();
        x(i, 0) += 20.0 * truth[i];
    }
    const auto g = gmm_em(x, 3, 100, rng);
    CHECK(ari(truth, g.labels) == doctest::Approx(1.0));
    for (std::size_t i = 1; i < g.log_likelihood.size(); ++i) CHECK(g.log_likelihood[i] >= g.log_likelihood[i - 1] - 1e-9);
    CHECK(ari(truth, kmeans_labels(x, 3, 100, rng)) == doctest::Approx(1.0));
}

TEST_CASE("single-component GMM equals the sample moments") {
    Rng rng(72);
    const Matrix x = random_matrix(200, 3, rng);
    const auto g = gmm_em(x, 1, 20, rng);
    const Vector mean = x.colwise().mean().transpose();
    const Matrix centered = x.rowwise() - mean.transpose();
    const Matrix cov = centered.transpose() * centered / 200.0;
    CHECK((g.means.row(0).transpose() - mean).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g.covariances[0] - cov).cwiseAbs().maxCoeff() < 1e-5);  // covariance carries a 1e-6 ridge
}

TEST_CASE("Gaussian baseline fits and reproduces moments") {
    Rng rng(73);
    Matrix x = random_matrix(500, 2, rng);
    x.col(1) = 0.5 * x.col(0) + 2.0 * x.col(1);
    x.col(0).array() += 3.0;
    const auto fit = fit_gaussian(x);
    CHECK((fit.mean - x.colwise().mean().transpose()).norm() < 1e-12);
    const Matrix s = sample_gaussian(fit, 200000, rng);
    CHECK((s.colwise().mean().transpose() - fit.mean).norm() < 0.03);
    const Matrix c = s.rowwise() - s.colwise().mean();
    CHECK(((c.transpose() * c / 200000.0) - fit.cov).cwiseAbs().maxCoeff() < 0.1);

    MarginalSequence seq;
    seq.marginals = {x, x};
    seq.times = {0.0, 1.0};
    const GaussianTransport g(seq, 1);
    CHECK_FALSE(wd_suite(g, seq, 16, 1).wd_fc.has_value());
}

TEST_CASE("linear interpolation baseline endpoints") {
    Rng rng(74);
    const Matrix a = random_matrix(10, 2, rng), b = random_matrix(10, 2, rng);
    Rng r1(1), r2(1);
    const Matrix at_zero = linear_interp_baseline(a, b, 0.0, r1);
    const Matrix at_one = linear_interp_baseline(a, b, 1.0, r2);
    // The endpoints are row permutations of a and b.
    auto rows_of = [](const Matrix& m) {
        std::vector<std::vector<double>> r;
        for (Eigen::Index i = 0; i < m.rows(); ++i) r.push_back({m(i, 0), m(i, 1)});
        std::sort(r.begin(), r.end());
        return r;
    };
    CHECK(rows_of(at_zero) == rows_of(a));
    CHECK(rows_of(at_one) == rows_of(b));
    const Matrix same(Matrix::Ones(6, 2));
    Rng r3(2);
    CHECK(linear_interp_baseline(same, same, 0.5, r3) == same);
}

TEST_CASE("eval report JSON round-trips with absent fields") {
    EvalReport r;
    r.wd1 = 0.25;
    r.seg_ari = 1.0;
    r.one_hop = {0.1, 0.2};
    r.segment_labels_pred = {0, 1};
    const auto back = report_from_json(to_json(r));
    CHECK(back.wd1 == 0.25);
    CHECK_FALSE(back.wd2.has_value());
    CHECK(back.seg_ari == 1.0);
    CHECK(back.one_hop == r.one_hop);
    CHECK(to_json(back) == to_json(r));
}
