#include "flux/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "flux/geometry.hpp"
#include "flux/nn.hpp"

namespace flux {

double w1_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw DataError("w1: empty sample set");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        return s / static_cast<double>(a.size());
    }
    // Walk the union of quantile breakpoints i/n and j/m.
    const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double u = 0.0, total = 0.0;
    while (i < a.size() && j < b.size()) {
        const double ua = static_cast<double>(i + 1) / n, ub = static_cast<double>(j + 1) / m;
        const double next = std::min(ua, ub);
        total += (next - u) * std::abs(a[i] - b[j]);
        u = next;
        if (ua <= next) ++i;
        if (ub <= next) ++j;
    }
    return total;
}

Matrix random_directions(int dim, int n, Rng& rng) {
    Matrix dirs(n, dim);
    for (int p = 0; p < n; ++p) {
        double norm = 0.0;
        do {
            for (int j = 0; j < dim; ++j) dirs(p, j) = standard_normal(rng);
            norm = dirs.row(p).norm();
        } while (norm == 0.0);
        dirs.row(p) /= norm;
    }
    return dirs;
}

Matrix sorted_projections(const Matrix& a, const Matrix& directions) {
    if (a.rows() == 0) throw DataError("sliced_w1: empty sample set");
    if (directions.cols() != a.cols()) throw ShapeError("sliced_w1: dimension mismatch");
    Matrix p = a * directions.transpose();
    for (Eigen::Index c = 0; c < p.cols(); ++c) std::sort(p.col(c).data(), p.col(c).data() + p.rows());
    return p;
}

Vector sorted_w1(const Matrix& pa, const Matrix& pb) {
    if (pa.cols() != pb.cols()) throw ShapeError("sliced_w1: projection count mismatch");
    Vector out(pa.cols());
    for (Eigen::Index p = 0; p < pa.cols(); ++p) {
        if (pa.rows() == pb.rows()) {
            out(p) = (pa.col(p) - pb.col(p)).cwiseAbs().mean();
        } else {
            out(p) = w1_1d(std::vector<double>(pa.col(p).data(), pa.col(p).data() + pa.rows()),
                           std::vector<double>(pb.col(p).data(), pb.col(p).data() + pb.rows()));
        }
    }
    return out;
}

Vector projected_w1(const Matrix& a, const Matrix& b, const Matrix& directions) {
    if (a.rows() == 0 || b.rows() == 0) throw DataError("sliced_w1: empty sample set");
    if (a.cols() != b.cols() || directions.cols() != a.cols()) throw ShapeError("sliced_w1: dimension mismatch");
    return sorted_w1(sorted_projections(a, directions), sorted_projections(b, directions));
}

double sliced_w1(const Matrix& a, const Matrix& b, int n_projections, Rng& rng) {
    if (n_projections < 1) throw ParameterError("sliced_w1: n_projections must be >= 1");
    if (a.rows() == 0 || b.rows() == 0) throw DataError("sliced_w1: empty sample set");
    return projected_w1(a, b, random_directions(static_cast<int>(a.cols()), n_projections, rng)).mean();
}

double coordinate_w1(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("coordinate_w1: dimension mismatch");
    return projected_w1(a, b, Matrix::Identity(a.cols(), a.cols())).mean();
}

// ---------------------------------------------------------------- transport

FieldTransport::FieldTransport(const VelocityField& field, std::vector<double> times, int n_steps)
    : fields_{&field}, times_(std::move(times)), n_steps_(n_steps) {}

FieldTransport::FieldTransport(std::vector<const VelocityField*> per_segment, std::vector<double> times, int n_steps)
    : fields_(std::move(per_segment)), times_(std::move(times)), n_steps_(n_steps) {
    if (fields_.size() + 1 != times_.size()) throw ParameterError("FieldTransport: one field per segment expected");
}

Pushforward FieldTransport::chain(const Matrix& x, int from) const {
    if (fields_.size() == 1) {
        std::vector<double> t(times_.begin() + from, times_.end());
        auto p = pushforward_chain(*fields_[0], x, t, n_steps_);
        diverged_ += p.n_diverged.back();
        return p;
    }
    Pushforward out;
    out.sets.push_back(finite_rows(x));
    out.n_diverged.push_back(static_cast<int>(x.rows() - out.sets.back().rows()));
    for (std::size_t k = from; k + 1 < times_.size(); ++k) {
        auto p = pushforward_chain(*fields_[k], out.sets.back(), {times_[k], times_[k + 1]}, n_steps_);
        out.sets.push_back(p.sets.back());
        out.n_diverged.push_back(out.n_diverged.back() + p.n_diverged.back());
    }
    diverged_ += out.n_diverged.back();
    return out;
}

Matrix FieldTransport::transport(const Matrix& x, int from, int to) const {
    if (from < 0 || to >= static_cast<int>(times_.size()) || from > to) throw ParameterError("transport: bad range");
    if (from == to) return finite_rows(x);
    if (fields_.size() == 1) {
        std::vector<double> t(times_.begin() + from, times_.begin() + to + 1);
        auto p = pushforward_chain(*fields_[0], x, t, n_steps_);
        diverged_ += p.n_diverged.back();
        return p.sets.back();
    }
    Matrix cur = finite_rows(x);
    for (int k = from; k < to; ++k) {
        auto p = pushforward_chain(*fields_[k], cur, {times_[k], times_[k + 1]}, n_steps_);
        diverged_ += p.n_diverged.back();
        cur = p.sets.back();
    }
    return cur;
}

namespace {

WdValue mean_std(const std::vector<double>& v) {
    WdValue out;
    out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double s = 0.0;
        for (double x : v) s += (x - out.mean) * (x - out.mean);
        out.std = std::sqrt(s / static_cast<double>(v.size() - 1));
    }
    return out;
}

}  // namespace

WdSuite wd_suite(const TransportModel& model, const MarginalSequence& seq, int n_projections, std::uint64_t seed,
                 int n_seeds) {
    seq.validate();
    if (n_seeds < 1) throw ParameterError("wd_suite: n_seeds must be >= 1");
    const int T = seq.size();
    std::vector<Matrix> one(T - 1), two;
    for (int k = 0; k + 1 < T; ++k) one[k] = model.transport(seq.marginals[k], k, k + 1);
    for (int k = 0; k + 2 < T; ++k) two.push_back(model.transport(seq.marginals[k], k, k + 2));
    std::optional<Matrix> fc;
    if (model.shared_ode()) fc = model.transport(seq.marginals[0], 0, T - 1);

    std::vector<double> s1, s2, sfc;
    WdSuite out;
    for (int s = 0; s < n_seeds; ++s) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
        const Matrix dirs = random_directions(seq.dim(), n_projections, rng);
        std::vector<Matrix> targets(T);
        for (int k = 1; k < T; ++k) targets[k] = sorted_projections(seq.marginals[k], dirs);
        double acc = 0.0;
        for (int k = 0; k + 1 < T; ++k) {
            const double w = sorted_w1(sorted_projections(one[k], dirs), targets[k + 1]).mean();
            if (s == 0) out.one_hop.push_back(w);
            acc += w;
        }
        s1.push_back(acc / (T - 1));
        if (!two.empty()) {
            acc = 0.0;
            for (std::size_t k = 0; k < two.size(); ++k)
                acc += sorted_w1(sorted_projections(two[k], dirs), targets[k + 2]).mean();
            s2.push_back(acc / static_cast<double>(two.size()));
        }
        if (fc) sfc.push_back(sorted_w1(sorted_projections(*fc, dirs), targets[T - 1]).mean());
    }
    out.wd1 = mean_std(s1);
    if (!s2.empty()) out.wd2 = mean_std(s2);
    if (!sfc.empty()) out.wd_fc = mean_std(sfc);
    return out;
}

// ---------------------------------------------------------------- regimes

SegmentLabels segment_majority(const std::vector<int>& assignments, const std::vector<int>& segment_ids) {
    if (assignments.size() != segment_ids.size()) throw ShapeError("segment_majority: size mismatch");
    std::map<int, std::map<int, int>> counts;
    for (std::size_t i = 0; i < assignments.size(); ++i) ++counts[segment_ids[i]][assignments[i]];
    SegmentLabels out;
    for (const auto& [seg, c] : counts) {
        int best = c.begin()->first, best_n = -1;
        for (const auto& [label, n] : c)
            if (n > best_n) {
                best = label;
                best_n = n;
            }
        out.segments.push_back(seg);
        out.labels.push_back(best);
    }
    return out;
}

namespace {

struct Contingency {
    std::vector<std::vector<double>> n;
    std::vector<double> rows, cols;
    double total = 0.0;
};

Contingency contingency(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw ShapeError("label vectors differ in length");
    std::map<int, int> ia, ib;
    for (int v : a) ia.emplace(v, 0);
    for (int v : b) ib.emplace(v, 0);
    int k = 0;
    for (auto& [v, i] : ia) i = k++;
    k = 0;
    for (auto& [v, i] : ib) i = k++;
    Contingency c;
    c.n.assign(ia.size(), std::vector<double>(ib.size(), 0.0));
    c.rows.assign(ia.size(), 0.0);
    c.cols.assign(ib.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        c.n[ia[a[i]]][ib[b[i]]] += 1.0;
        c.rows[ia[a[i]]] += 1.0;
        c.cols[ib[b[i]]] += 1.0;
    }
    c.total = static_cast<double>(a.size());
    return c;
}

double comb2(double x) { return x * (x - 1.0) / 2.0; }

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<int, int> ab, ba;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto [it1, new1] = ab.emplace(a[i], b[i]);
        auto [it2, new2] = ba.emplace(b[i], a[i]);
        if (it1->second != b[i] || it2->second != a[i]) return false;
    }
    return true;
}

}  // namespace

double ari(const std::vector<int>& truth, const std::vector<int>& pred) {
    const auto c = contingency(truth, pred);
    double index = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& r : c.n)
        for (double v : r) index += comb2(v);
    for (double v : c.rows) sa += comb2(v);
    for (double v : c.cols) sb += comb2(v);
    const double all = comb2(c.total);
    const double expected = all > 0.0 ? sa * sb / all : 0.0;
    const double max_index = 0.5 * (sa + sb);
    const double denom = max_index - expected;
    if (denom == 0.0) return same_partition(truth, pred) ? 1.0 : 0.0;
    return (index - expected) / denom;
}

double nmi(const std::vector<int>& truth, const std::vector<int>& pred) {
    const auto c = contingency(truth, pred);
    if (c.total == 0.0) return 1.0;
    auto entropy = [&](const std::vector<double>& m) {
        double h = 0.0;
        for (double v : m)
            if (v > 0.0) h -= (v / c.total) * std::log(v / c.total);
        return h;
    };
    const double ht = entropy(c.rows), hp = entropy(c.cols);
    if (ht == 0.0 || hp == 0.0) return same_partition(truth, pred) ? 1.0 : 0.0;
    double mi = 0.0;
    for (std::size_t i = 0; i < c.n.size(); ++i)
        for (std::size_t j = 0; j < c.n[i].size(); ++j) {
            const double p = c.n[i][j] / c.total;
            if (p > 0.0) mi += p * std::log(p / ((c.rows[i] / c.total) * (c.cols[j] / c.total)));
        }
    return std::clamp(2.0 * mi / (ht + hp), 0.0, 1.0);
}

double switch_rate(const SegmentLabels& s) {
    if (s.labels.size() < 2) return 0.0;
    int changes = 0;
    for (std::size_t i = 1; i < s.labels.size(); ++i) changes += s.labels[i] != s.labels[i - 1];
    return static_cast<double>(changes) / static_cast<double>(s.labels.size() - 1);
}

double gating_entropy(const Matrix& probs) {
    if (probs.rows() == 0) return 0.0;
    double h = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) h += categorical_entropy(probs.row(i).transpose());
    return h / static_cast<double>(probs.rows());
}

// ---------------------------------------------------------------- clustering

std::vector<int> kmeans_labels(const Matrix& samples, int k, int max_iter, Rng& rng) {
    return kmeans(samples, k, max_iter, rng).assignment;
}

namespace {

constexpr double kCovReg = 1e-6;

Matrix sample_covariance(const Matrix& x, const Vector& mean) {
    const Matrix c = x.rowwise() - mean.transpose();
    return c.transpose() * c / std::max<double>(1.0, static_cast<double>(x.rows()));
}

}  // namespace

GmmResult gmm_em(const Matrix& x, int k, int max_iter, Rng& rng) {
    const auto n = x.rows(), d = x.cols();
    if (k < 1 || k > n) throw ParameterError("gmm_em: need 1 <= k <= n");
    const auto km = kmeans(x, k, 100, rng);
    Matrix resp = Matrix::Zero(n, k);
    for (Eigen::Index i = 0; i < n; ++i) resp(i, km.assignment[i]) = 1.0;
    const Vector pooled_mean = x.colwise().mean().transpose();
    const Matrix pooled_cov = sample_covariance(x, pooled_mean) + kCovReg * Matrix::Identity(d, d);

    GmmResult g;
    g.weights.resize(k);
    g.means.resize(k, d);
    g.covariances.assign(k, Matrix::Identity(d, d));
    const double log2pi = std::log(2.0 * std::numbers::pi);

    auto m_step = [&] {
        for (int j = 0; j < k; ++j) {
            const double nk = resp.col(j).sum();
            if (nk <= 1e-12) {
                g.means.row(j) = x.row(uniform_index(rng, static_cast<int>(n)));
                g.covariances[j] = pooled_cov;
                g.weights(j) = 1.0 / k;
                ++g.resets;
                continue;
            }
            g.weights(j) = nk / static_cast<double>(n);
            const Vector mu = (resp.col(j).transpose() * x).transpose() / nk;
            g.means.row(j) = mu.transpose();
            const Matrix c = x.rowwise() - mu.transpose();
            g.covariances[j] = (c.transpose() * resp.col(j).asDiagonal() * c) / nk + kCovReg * Matrix::Identity(d, d);
        }
        g.weights /= g.weights.sum();
    };
    auto e_step = [&] {
        Matrix logp(n, k);
        for (int j = 0; j < k; ++j) {
            Eigen::LLT<Matrix> llt(g.covariances[j]);
            if (llt.info() != Eigen::Success) {
                g.means.row(j) = x.row(uniform_index(rng, static_cast<int>(n)));
                g.covariances[j] = pooled_cov;
                ++g.resets;
                llt.compute(g.covariances[j]);
            }
            const Matrix L = llt.matrixL();
            const double logdet = 2.0 * L.diagonal().array().log().sum();
            const Matrix c = (x.rowwise() - g.means.row(j)).transpose();
            const Matrix z = llt.matrixL().solve(c);
            const Vector maha = z.colwise().squaredNorm().transpose();
            logp.col(j) = (std::log(g.weights(j)) - 0.5 * (d * log2pi + logdet)) - 0.5 * maha.array();
        }
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Vector row = logp.row(i).transpose();
            const double lse = log_sum_exp(row);
            ll += lse;
            resp.row(i) = (row.array() - lse).exp().transpose();
        }
        return ll / static_cast<double>(n);
    };

    m_step();
    for (int it = 0; it < max_iter; ++it) {
        const double ll = e_step();
        g.log_likelihood.push_back(ll);
        if (it > 0 && std::abs(ll - g.log_likelihood[it - 1]) < 1e-10 * std::max(1.0, std::abs(ll))) break;
        m_step();
    }
    g.labels.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index j = 0;
        resp.row(i).maxCoeff(&j);
        g.labels[i] = static_cast<int>(j);
    }
    return g;
}

// ---------------------------------------------------------------- baselines

GaussianFit fit_gaussian(const Matrix& samples) {
    if (samples.rows() == 0) throw DataError("fit_gaussian: empty sample set");
    GaussianFit g;
    g.mean = samples.colwise().mean().transpose();
    const Matrix c = samples.rowwise() - g.mean.transpose();
    g.cov = c.transpose() * c / std::max<double>(1.0, static_cast<double>(samples.rows() - 1));
    return g;
}

Matrix sample_gaussian(const GaussianFit& g, int n, Rng& rng) {
    const auto d = g.mean.size();
    Eigen::SelfAdjointEigenSolver<Matrix> es(g.cov);
    const Matrix root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    Matrix z(d, n);
    for (int i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) z(j, i) = standard_normal(rng);
    return ((root * z).colwise() + g.mean).transpose();
}

std::vector<Matrix> gaussian_baseline(const MarginalSequence& seq, Rng& rng) {
    std::vector<Matrix> out;
    for (const auto& m : seq.marginals) out.push_back(sample_gaussian(fit_gaussian(m), static_cast<int>(m.rows()), rng));
    return out;
}

Matrix linear_interp_baseline(const Matrix& a, const Matrix& b, double alpha, Rng& rng) {
    if (a.rows() == 0 || b.rows() == 0) throw DataError("linear_interp_baseline: empty sample set");
    const auto pairs = couple(Coupling{CouplingKind::random_perm}, a, b, static_cast<int>(a.rows()), rng);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < pairs.size(); ++i)
        out.row(i) = (1.0 - alpha) * a.row(pairs[i].first) + alpha * b.row(pairs[i].second);
    return out;
}

GaussianTransport::GaussianTransport(const MarginalSequence& seq, std::uint64_t seed) : seed_(seed) {
    for (const auto& m : seq.marginals) fits_.push_back(fit_gaussian(m));
}

Matrix GaussianTransport::transport(const Matrix& x, int from, int to) const {
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(from) * 1000 + to));
    return sample_gaussian(fits_.at(to), static_cast<int>(x.rows()), rng);
}

Matrix LinearTransport::transport(const Matrix& x, int from, int to) const {
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(from) * 1000 + to));
    return linear_interp_baseline(x, seq_.marginals.at(to), 1.0, rng);
}

StaticOtTransport::StaticOtTransport(const MarginalSequence& seq, std::uint64_t seed, double epsilon_scale, int max_iter)
    : seq_(seq), seed_(seed) {
    for (int k = 0; k + 1 < seq.size(); ++k) {
        const Matrix cost = squared_euclidean_cost(seq.marginals[k], seq.marginals[k + 1]);
        double eps = epsilon_scale * median_of(cost);
        if (!(eps > 0.0)) eps = 1e-12;
        Matrix plan = sinkhorn_plan(cost, eps, max_iter, 1e-8).plan;
        for (Eigen::Index i = 0; i < plan.rows(); ++i) {
            for (Eigen::Index j = 1; j < plan.cols(); ++j) plan(i, j) += plan(i, j - 1);
            plan.row(i) /= plan(i, plan.cols() - 1);
        }
        row_cdfs_.push_back(std::move(plan));
    }
}

Matrix StaticOtTransport::transport(const Matrix& x, int from, int to) const {
    if (x.rows() != seq_.marginals.at(from).rows()) throw ShapeError("static OT: input must be the source marginal");
    if (from == to) return x;
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(from) * 1000 + to));
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Eigen::Index idx = i;
        for (int k = from; k < to; ++k) {
            const Matrix& cdf = row_cdfs_.at(k);
            const double u = uniform01(rng);
            Eigen::Index j = 0;
            while (j + 1 < cdf.cols() && cdf(idx, j) < u) ++j;
            idx = j;
        }
        out.row(i) = seq_.marginals.at(to).row(idx);
    }
    return out;
}

// ---------------------------------------------------------------- report

namespace {

void put_opt(nlohmann::json& j, const char* key, const std::optional<double>& v) {
    j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> get_opt(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    put_opt(j, "wd1", r.wd1);
    put_opt(j, "wd1_std", r.wd1_std);
    put_opt(j, "wd2", r.wd2);
    put_opt(j, "wd2_std", r.wd2_std);
    put_opt(j, "wd_fc", r.wd_fc);
    put_opt(j, "wd_fc_std", r.wd_fc_std);
    j["one_hop"] = r.one_hop;
    put_opt(j, "seg_ari", r.seg_ari);
    put_opt(j, "seg_nmi", r.seg_nmi);
    put_opt(j, "gating_entropy", r.gating_entropy);
    put_opt(j, "switch_rate", r.switch_rate);
    put_opt(j, "majority_expert_fraction", r.majority_expert_fraction);
    j["segment_labels_true"] = r.segment_labels_true;
    j["segment_labels_pred"] = r.segment_labels_pred;
    j["per_marginal_wd"] = r.per_marginal_wd;
    put_opt(j, "held_out_wd", r.held_out_wd);
    put_opt(j, "train_wd", r.train_wd);
    put_opt(j, "all_wd", r.all_wd);
    put_opt(j, "surface_dev", r.surface_dev);
    j["n_diverged"] = r.n_diverged;
    return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.wd1 = get_opt(j, "wd1");
    r.wd1_std = get_opt(j, "wd1_std");
    r.wd2 = get_opt(j, "wd2");
    r.wd2_std = get_opt(j, "wd2_std");
    r.wd_fc = get_opt(j, "wd_fc");
    r.wd_fc_std = get_opt(j, "wd_fc_std");
    r.one_hop = j.value("one_hop", std::vector<double>{});
    r.seg_ari = get_opt(j, "seg_ari");
    r.seg_nmi = get_opt(j, "seg_nmi");
    r.gating_entropy = get_opt(j, "gating_entropy");
    r.switch_rate = get_opt(j, "switch_rate");
    r.majority_expert_fraction = get_opt(j, "majority_expert_fraction");
    r.segment_labels_true = j.value("segment_labels_true", std::vector<int>{});
    r.segment_labels_pred = j.value("segment_labels_pred", std::vector<int>{});
    r.per_marginal_wd = j.value("per_marginal_wd", std::vector<double>{});
    r.held_out_wd = get_opt(j, "held_out_wd");
    r.train_wd = get_opt(j, "train_wd");
    r.all_wd = get_opt(j, "all_wd");
    r.surface_dev = get_opt(j, "surface_dev");
    r.n_diverged = j.value("n_diverged", 0);
    return r;
}

}  // namespace flux
