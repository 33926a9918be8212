#include "flux/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace flux {

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

namespace {

double sq_dist(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
    return (a.row(i) - b.row(j)).squaredNorm();
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, int max_iter, Rng& rng) {
    const auto n = static_cast<int>(points.rows());
    if (k < 1) throw ParameterError("kmeans: k must be positive");
    if (k > n) throw ParameterError("kmeans: k=" + std::to_string(k) + " exceeds number of points " + std::to_string(n));
    const auto d = points.cols();

    // k-means++ seeding
    Matrix centers(k, d);
    centers.row(0) = points.row(uniform_index(rng, n));
    Vector dmin(n);
    for (int i = 0; i < n; ++i) dmin(i) = sq_dist(points, i, centers, 0);
    for (int c = 1; c < k; ++c) {
        const double total = dmin.sum();
        int pick = 0;
        if (total > 0.0) {
            double r = uniform01(rng) * total;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                r -= dmin(i);
                if (r < 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = uniform_index(rng, n);
        }
        centers.row(c) = points.row(pick);
        for (int i = 0; i < n; ++i) dmin(i) = std::min(dmin(i), sq_dist(points, i, centers, c));
    }

    KMeansResult res;
    res.assignment.assign(n, 0);
    std::vector<double> best(n);
    for (int it = 0; it < max_iter; ++it) {
        // assignment step
        bool changed = it == 0;
        double obj = 0.0;
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dd = sq_dist(points, i, centers, c);
                if (dd < bd) {
                    bd = dd;
                    arg = c;
                }
            }
            if (arg != res.assignment[i]) changed = true;
            res.assignment[i] = arg;
            best[i] = bd;
            obj += bd;
        }
        res.objective.push_back(obj);
        if (!changed) break;

        // update step
        Matrix sums = Matrix::Zero(k, d);
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            sums.row(res.assignment[i]) += points.row(i);
            ++counts[res.assignment[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                centers.row(c) = sums.row(c) / counts[c];
                continue;
            }
            // empty cluster: re-seed at the farthest point
            const auto far = static_cast<int>(std::max_element(best.begin(), best.end()) - best.begin());
            centers.row(c) = points.row(far);
            best[far] = 0.0;
        }
    }
    // final assignment against the final centers
    double obj = 0.0;
    for (int i = 0; i < n; ++i) {
        int arg = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            const double dd = sq_dist(points, i, centers, c);
            if (dd < bd) {
                bd = dd;
                arg = c;
            }
        }
        res.assignment[i] = arg;
        obj += bd;
    }
    if (res.objective.empty() || obj != res.objective.back()) res.objective.push_back(obj);
    res.centers = std::move(centers);
    return res;
}

// ---------------------------------------------------------------------------
// kernel score
// ---------------------------------------------------------------------------

namespace {

double sigmoid(double s) {
    const double h = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
    return std::clamp(h, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

double softplus(double s) { return std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))); }

// Per-column kernel quantities for features z (dz x B) against centers (M x dz).
struct KernelEval {
    Vector lse;   // log sum_m exp(-|z - c_m|^2 / 2 sigma^2)
    Matrix resp;  // M x B softmax responsibilities
};

KernelEval kernel_eval(const Matrix& z, const Matrix& centers, double bandwidth) {
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    Matrix e = centers * z;  // M x B
    const Vector zn = z.colwise().squaredNorm().transpose();
    const Vector cn = centers.rowwise().squaredNorm();
    for (Eigen::Index j = 0; j < e.cols(); ++j)
        for (Eigen::Index m = 0; m < e.rows(); ++m)
            e(m, j) = -std::max(0.0, cn(m) + zn(j) - 2.0 * e(m, j)) * inv;
    KernelEval k;
    k.lse.resize(e.cols());
    k.resp.resize(e.rows(), e.cols());
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
        const double mx = e.col(j).maxCoeff();
        k.resp.col(j) = (e.col(j).array() - mx).exp();
        const double s = k.resp.col(j).sum();
        k.resp.col(j) /= s;
        k.lse(j) = mx + std::log(s);
    }
    return k;
}

struct ScoreParts {
    const Matrix* centers;
    double bandwidth, a, b, eps, alpha;
};

template <typename F>
auto visit_kernel(const MetricModel& m, F&& f) {
    return std::visit(
        [&](const auto& metric) {
            using T = std::decay_t<decltype(metric)>;
            if constexpr (std::is_same_v<T, UniformMetric>) {
                return f(metric, nullptr);
            } else {
                ScoreParts p{&metric.centers, metric.bandwidth, metric.a, metric.b, metric.eps, metric.alpha};
                return f(metric, &p);
            }
        },
        m);
}

Matrix features_of(const MetricModel& m, const Matrix& x) {
    if (const auto* dk = std::get_if<DeepKernelMetric>(&m)) return dk->feature_map.forward(x);
    return x;
}

}  // namespace

std::string metric_kind(const MetricModel& m) {
    if (std::holds_alternative<UniformMetric>(m)) return "uniform";
    if (std::holds_alternative<RbfMetric>(m)) return "rbf";
    return "deep_kernel";
}

double metric_from_score(double h, double eps, double alpha) { return std::pow(h + eps, -alpha); }

Vector manifold_score_batch(const MetricModel& metric, const Matrix& x) {
    if (const auto* u = std::get_if<UniformMetric>(&metric)) {
        (void)u;
        return Vector::Ones(x.cols());
    }
    return visit_kernel(metric, [&](const auto&, const ScoreParts* p) -> Vector {
        const Matrix z = features_of(metric, x);
        if (z.rows() != p->centers->cols()) throw ShapeError("manifold_score: feature dim mismatch");
        const auto k = kernel_eval(z, *p->centers, p->bandwidth);
        Vector h(x.cols());
        for (Eigen::Index j = 0; j < h.size(); ++j) h(j) = sigmoid(p->a * k.lse(j) + p->b);
        return h;
    });
}

Vector metric_batch(const MetricModel& metric, const Matrix& x) {
    if (const auto* u = std::get_if<UniformMetric>(&metric)) return Vector::Constant(x.cols(), u->value);
    const Vector h = manifold_score_batch(metric, x);
    return visit_kernel(metric, [&](const auto&, const ScoreParts* p) -> Vector {
        Vector out(h.size());
        for (Eigen::Index j = 0; j < h.size(); ++j) out(j) = metric_from_score(h(j), p->eps, p->alpha);
        return out;
    });
}

double manifold_score(const MetricModel& metric, const Vector& x) {
    return manifold_score_batch(metric, Matrix(x))(0);
}

double metric_scalar(const MetricModel& metric, const Vector& x) { return metric_batch(metric, Matrix(x))(0); }

MetricWithGrad metric_with_grad(const MetricModel& metric, const Matrix& x) {
    MetricWithGrad out;
    if (const auto* u = std::get_if<UniformMetric>(&metric)) {
        out.value = Vector::Constant(x.cols(), u->value);
        out.grad = Matrix::Zero(x.rows(), x.cols());
        return out;
    }
    const auto* dk = std::get_if<DeepKernelMetric>(&metric);
    Mlp::Cache cache;
    const Matrix z = dk ? dk->feature_map.forward(x, cache) : x;
    return visit_kernel(metric, [&](const auto&, const ScoreParts* p) -> MetricWithGrad {
        const auto k = kernel_eval(z, *p->centers, p->bandwidth);
        MetricWithGrad r;
        r.value.resize(x.cols());
        Matrix dz(z.rows(), z.cols());
        const double inv_s2 = 1.0 / (p->bandwidth * p->bandwidth);
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double h = sigmoid(p->a * k.lse(j) + p->b);
            r.value(j) = metric_from_score(h, p->eps, p->alpha);
            const double dm_dh = -p->alpha * std::pow(h + p->eps, -p->alpha - 1.0);
            const double coef = dm_dh * h * (1.0 - h) * p->a * inv_s2;
            dz.col(j) = coef * (p->centers->transpose() * k.resp.col(j) - z.col(j));
        }
        if (dk) {
            Vector scratch = Vector::Zero(dk->feature_map.num_params());
            r.grad = dk->feature_map.backward(cache, dz, scratch);
        } else {
            r.grad = dz;
        }
        return r;
    });
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

BoundingBox inflated_bounds(const Matrix& pooled, double factor) {
    const Vector lo = pooled.colwise().minCoeff().transpose();
    const Vector hi = pooled.colwise().maxCoeff().transpose();
    const Vector mid = 0.5 * (lo + hi);
    const Vector half = 0.5 * factor * (hi - lo);
    return {mid - half, mid + half};
}

Matrix sample_chords(const Matrix& pooled, int n, Rng& rng) {
    if (pooled.rows() == 0) throw DataError("sample_chords: empty sample set");
    Matrix out(n, pooled.cols());
    const int rows = static_cast<int>(pooled.rows());
    for (int i = 0; i < n; ++i) {
        const int a = uniform_index(rng, rows), b = uniform_index(rng, rows);
        const double l = 0.25 + 0.5 * uniform01(rng);
        out.row(i) = (1.0 - l) * pooled.row(a) + l * pooled.row(b);
    }
    return out;
}

Matrix sample_box(const BoundingBox& box, int n, Rng& rng) {
    Matrix out(n, box.lo.size());
    for (int i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < box.lo.size(); ++j)
            out(i, j) = box.lo(j) + (box.hi(j) - box.lo(j)) * uniform01(rng);
    return out;
}

namespace {

double approx_diameter(const Matrix& pts) {
    const Eigen::Index n = pts.rows();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / 1000);
    double best = 0.0;
    for (Eigen::Index i = 0; i < n; i += stride)
        for (Eigen::Index j = i + stride; j < n; j += stride) best = std::max(best, (pts.row(i) - pts.row(j)).squaredNorm());
    return std::sqrt(best);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<long>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

constexpr double kTargetMedianScore = 0.9;

MetricModel train_rbf(const Matrix& pooled, const GeometryTrainConfig& cfg, Rng& rng) {
    RbfMetric m;
    const int k = std::min<int>(cfg.num_centers, static_cast<int>(pooled.rows()));
    m.centers = kmeans(pooled, k, cfg.kmeans_iters, rng).centers;
    const double d = static_cast<double>(pooled.cols());
    m.bandwidth = cfg.bandwidth_scale * std::sqrt(d / 3.0) * approx_diameter(pooled);
    if (!(m.bandwidth > 0.0)) throw DataError("train_geometry: degenerate data diameter");
    m.eps = cfg.eps;
    m.alpha = cfg.alpha;
    // Calibrate so that the median data score equals kTargetMedianScore with a = 1.
    const auto kev = kernel_eval(pooled.transpose(), m.centers, m.bandwidth);
    std::vector<double> lse(kev.lse.data(), kev.lse.data() + kev.lse.size());
    m.a = 1.0;
    m.b = std::log(kTargetMedianScore / (1.0 - kTargetMedianScore)) - median(lse);
    return m;
}

}  // namespace

double deep_kernel_bce(const DeepKernelMetric& m, const Matrix& x, const Vector& y, DeepKernelGrads* g) {
    Mlp::Cache cache;
    const Matrix z = m.feature_map.forward(x, cache);
    const auto k = kernel_eval(z, m.centers, m.bandwidth);
    const double n = static_cast<double>(x.cols());
    double loss = 0.0;
    Vector ds(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double s = m.a * k.lse(j) + m.b;
        loss += softplus(s) - y(j) * s;
        ds(j) = (sigmoid(s) - y(j)) / n;
    }
    if (g) {
        const double inv_s2 = 1.0 / (m.bandwidth * m.bandwidth);
        g->log_a = ds.dot(k.lse) * m.a;
        g->b = ds.sum();
        Matrix dz(z.rows(), z.cols());
        g->centers = Matrix::Zero(m.centers.rows(), m.centers.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double c = ds(j) * m.a * inv_s2;
            dz.col(j) = c * (m.centers.transpose() * k.resp.col(j) - z.col(j));
            // d/dc_m of -(|z - c_m|^2)/2s^2 weighted by responsibility
            for (Eigen::Index mm = 0; mm < m.centers.rows(); ++mm)
                g->centers.row(mm) += c * k.resp(mm, j) * (z.col(j).transpose() - m.centers.row(mm));
        }
        g->feature = Vector::Zero(m.feature_map.num_params());
        m.feature_map.backward(cache, dz, g->feature);
    }
    return loss / n;
}

namespace {

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

MetricModel train_deep_kernel(const Matrix& pooled, const GeometryTrainConfig& cfg, Rng& rng,
                              GeometryTrainReport* report) {
    const int n = static_cast<int>(pooled.rows());
    const int d = static_cast<int>(pooled.cols());
    DeepKernelMetric m;
    m.feature_map = Mlp({d, cfg.hidden, cfg.hidden, cfg.feature_dim}, Activation::relu, rng);
    m.eps = cfg.eps;
    m.alpha = cfg.alpha;

    // Warmup: centers from k-means on initial features, bandwidth from the
    // median pairwise feature distance.
    const Matrix feats = m.feature_map.forward(Matrix(pooled.transpose())).transpose();
    const int k = std::min<int>(cfg.num_centers, n);
    m.centers = kmeans(feats, k, cfg.kmeans_iters, rng).centers;
    {
        std::vector<double> dists;
        const int stride = std::max(1, n / 256);
        for (int i = 0; i < n; i += stride)
            for (int j = i + stride; j < n; j += stride) dists.push_back((feats.row(i) - feats.row(j)).norm());
        m.bandwidth = median(dists);
        if (!(m.bandwidth > 0.0)) throw DataError("train_geometry: degenerate feature distances");
    }
    m.a = 1.0;
    m.b = 0.0;

    // Validation split for early stopping.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const int n_val = std::max(1, n / 10);
    std::vector<int> val_idx(order.begin(), order.begin() + n_val);
    std::vector<int> train_idx(order.begin() + n_val, order.end());
    if (train_idx.empty()) train_idx = val_idx;

    const auto box = inflated_bounds(pooled, 1.5);
    if (cfg.chord_fraction < 0.0 || cfg.chord_fraction > 1.0)
        throw ParameterError("train_geometry: chord_fraction must lie in [0, 1]");
    // Columns: chord points first, then box points.
    auto negatives = [&](int count) {
        const int chords = static_cast<int>(std::lround(count * cfg.chord_fraction));
        Matrix out(d, count);
        if (chords > 0) out.leftCols(chords) = sample_chords(pooled, chords, rng).transpose();
        if (count > chords) out.rightCols(count - chords) = sample_box(box, count - chords, rng).transpose();
        return out;
    };
    const int n_val_neg = std::max(1, static_cast<int>(std::lround(n_val * cfg.negative_ratio)));
    Matrix val_x(d, n_val + n_val_neg);
    Vector val_y(n_val + n_val_neg);
    for (int i = 0; i < n_val; ++i) {
        val_x.col(i) = pooled.row(val_idx[i]).transpose();
        val_y(i) = 1.0;
    }
    val_x.rightCols(n_val_neg) = negatives(n_val_neg);
    val_y.tail(n_val_neg).setZero();

    AdamWConfig opt{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    AdamW opt_f(m.feature_map.num_params(), opt);
    AdamW opt_c(m.centers.size(), AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
    AdamW opt_ab(2, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
    double log_a = std::log(m.a);

    DeepKernelMetric best = m;
    double best_val = deep_kernel_bce(m, val_x, val_y, nullptr);
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const int bs = static_cast<int>(std::min<std::size_t>(cfg.batch_size, train_idx.size() - start));
            const int nneg = std::max(1, static_cast<int>(std::lround(bs * cfg.negative_ratio)));
            Matrix x(d, bs + nneg);
            Vector y(bs + nneg);
            for (int i = 0; i < bs; ++i) {
                x.col(i) = pooled.row(train_idx[start + i]).transpose();
                y(i) = 1.0;
            }
            x.rightCols(nneg) = negatives(nneg);
            y.tail(nneg).setZero();

            DeepKernelGrads g;
            epoch_loss += deep_kernel_bce(m, x, y, &g);
            ++batches;
            opt_f.step(m.feature_map.params(), g.feature);
            Vector c = flatten(m.centers);
            opt_c.step(c, flatten(g.centers));
            m.centers = Eigen::Map<Matrix>(c.data(), m.centers.rows(), m.centers.cols());
            Vector ab(2);
            ab << log_a, m.b;
            Vector gab(2);
            gab << g.log_a, g.b;
            opt_ab.step(ab, gab);
            log_a = ab(0);
            m.a = std::exp(log_a);
            m.b = ab(1);
        }
        const double val = deep_kernel_bce(m, val_x, val_y, nullptr);
        if (report) {
            report->train_loss.push_back(epoch_loss / std::max(1, batches));
            report->val_loss.push_back(val);
        }
        if (val < best_val) {
            best_val = val;
            best = m;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    return best;
}

}  // namespace

MetricModel train_geometry(const Matrix& pooled, const GeometryTrainConfig& cfg, Rng& rng,
                           GeometryTrainReport* report) {
    if (pooled.rows() == 0) throw DataError("train_geometry: empty pooled sample set");
    if (!pooled.allFinite()) throw DataError("train_geometry: non-finite samples");
    if (cfg.epochs < 1) throw ParameterError("train_geometry: epochs must be >= 1");
    const Vector var = (pooled.rowwise() - pooled.colwise().mean()).colwise().squaredNorm();
    if (var.maxCoeff() <= 0.0) throw DataError("train_geometry: data has zero variance in every dimension");
    if (pooled.cols() < cfg.deep_kernel_min_dim) return train_rbf(pooled, cfg, rng);
    return train_deep_kernel(pooled, cfg, rng, report);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

Checkpoint metric_checkpoint(const MetricModel& metric) {
    Checkpoint c("metric");
    c.meta()["backend"] = metric_kind(metric);
    std::visit(
        [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, UniformMetric>) {
                c.put_scalar("value", m.value);
            } else {
                c.put("centers", m.centers);
                c.put_scalar("bandwidth", m.bandwidth);
                c.put_scalar("a", m.a);
                c.put_scalar("b", m.b);
                c.put_scalar("eps", m.eps);
                c.put_scalar("alpha", m.alpha);
                if constexpr (std::is_same_v<T, DeepKernelMetric>) c.put_mlp("feature_map", m.feature_map);
            }
        },
        metric);
    return c;
}

MetricModel metric_from_checkpoint(const Checkpoint& c) {
    if (c.kind() != "metric") throw ParseError("checkpoint is not a metric");
    const auto backend = c.meta().at("backend").get<std::string>();
    if (backend == "uniform") return UniformMetric{c.scalar("value")};
    auto fill = [&](auto& m) {
        m.centers = c.matrix("centers");
        m.bandwidth = c.scalar("bandwidth");
        m.a = c.scalar("a");
        m.b = c.scalar("b");
        m.eps = c.scalar("eps");
        m.alpha = c.scalar("alpha");
    };
    if (backend == "rbf") {
        RbfMetric m;
        fill(m);
        return m;
    }
    if (backend == "deep_kernel") {
        DeepKernelMetric m;
        fill(m);
        m.feature_map = c.mlp("feature_map");
        return m;
    }
    throw ParseError("unknown metric backend '" + backend + "'");
}

}  // namespace flux
