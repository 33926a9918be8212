#include "flux/bend.hpp"

#include <algorithm>
#include <cmath>

namespace flux {

BendModel make_bend(int dim, int hidden, Rng& rng) {
    if (dim < 1 || hidden < 1) throw ParameterError("make_bend: dims must be positive");
    return BendModel{Mlp({2 * dim + 1, hidden, hidden, dim}, Activation::relu, rng), ""};
}

namespace {

void check_tau(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("bend: tau must lie in [0, 1]");
}

Matrix net_inputs(const Matrix& x0, const Matrix& x1, const Vector& tau) {
    const auto d = x0.rows();
    Matrix in(2 * d + 1, x0.cols());
    in.topRows(d) = x0;
    in.middleRows(d, d) = x1;
    in.row(2 * d) = tau.transpose();
    return in;
}

void check_pair(const BendModel& b, const Matrix& x0, const Matrix& x1) {
    if (x0.rows() != b.dim() || x1.rows() != b.dim() || x0.cols() != x1.cols())
        throw ShapeError("bend: endpoint shapes do not match the model dimension");
}

}  // namespace

std::pair<double, double> tangent_knots(double tau) {
    return {std::max(0.0, tau - kTangentStep), std::min(1.0, tau + kTangentStep)};
}

Matrix bend_points(const BendModel& b, const Matrix& x0, const Matrix& x1, const Vector& tau) {
    check_pair(b, x0, x1);
    if (tau.size() != x0.cols()) throw ShapeError("bend_points: one tau per column expected");
    for (Eigen::Index i = 0; i < tau.size(); ++i) check_tau(tau(i));
    const Matrix delta = b.net.forward(net_inputs(x0, x1, tau));
    Matrix out(x0.rows(), x0.cols());
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        const double t = tau(j);
        out.col(j) = (1.0 - t) * x0.col(j) + t * x1.col(j) + bend_gamma(t) * delta.col(j);
    }
    return out;
}

Matrix bend_tangents(const BendModel& b, const Matrix& x0, const Matrix& x1, const Vector& tau) {
    Vector lo(tau.size()), hi(tau.size());
    for (Eigen::Index i = 0; i < tau.size(); ++i) {
        check_tau(tau(i));
        std::tie(lo(i), hi(i)) = tangent_knots(tau(i));
    }
    Matrix v = bend_points(b, x0, x1, hi) - bend_points(b, x0, x1, lo);
    for (Eigen::Index j = 0; j < v.cols(); ++j) v.col(j) /= (hi(j) - lo(j));
    return v;
}

Vector bend_interpolant(const BendModel& b, const Vector& x0, const Vector& x1, double tau) {
    check_tau(tau);
    return bend_points(b, x0, x1, Vector::Constant(1, tau)).col(0);
}

Vector bend_tangent(const BendModel& b, const Vector& x0, const Vector& x1, double tau) {
    return bend_tangents(b, x0, x1, Vector::Constant(1, tau)).col(0);
}

double path_energy(const BendModel& b, const MetricModel& metric, const Vector& x0, const Vector& x1,
                   int n_points) {
    if (n_points < 1) throw ParameterError("path_energy: n_points must be >= 1");
    Matrix a = x0.replicate(1, n_points), c = x1.replicate(1, n_points);
    Vector tau(n_points);
    for (int i = 0; i < n_points; ++i) tau(i) = (i + 0.5) / n_points;
    const Matrix pts = bend_points(b, a, c, tau);
    const Matrix vel = bend_tangents(b, a, c, tau);
    const Vector m = metric_batch(metric, pts);
    double e = 0.0;
    for (int i = 0; i < n_points; ++i) e += m(i) * vel.col(i).squaredNorm();
    return e / n_points;
}

BendBatchLoss bend_batch_loss(const BendModel& b, const MetricModel& metric, const Matrix& x0, const Matrix& x1,
                              const Matrix& tau) {
    check_pair(b, x0, x1);
    const auto d = x0.rows();
    const auto n_pairs = x0.cols();
    const auto n_nodes = tau.cols();
    if (tau.rows() != n_pairs) throw ShapeError("bend_batch_loss: tau must have one row per pair");
    const auto q = n_pairs * n_nodes;

    // Columns [0, q) low knots, [q, 2q) nodes, [2q, 3q) high knots.
    Matrix a(d, 3 * q), c(d, 3 * q);
    Vector taus(3 * q);
    Vector span(q);
    for (Eigen::Index p = 0; p < n_pairs; ++p)
        for (Eigen::Index i = 0; i < n_nodes; ++i) {
            const auto col = p * n_nodes + i;
            const double t = tau(p, i);
            check_tau(t);
            const auto [lo, hi] = tangent_knots(t);
            taus(col) = lo;
            taus(q + col) = t;
            taus(2 * q + col) = hi;
            span(col) = hi - lo;
            for (int s = 0; s < 3; ++s) {
                a.col(s * q + col) = x0.col(p);
                c.col(s * q + col) = x1.col(p);
            }
        }

    Mlp::Cache cache;
    const Matrix delta = b.net.forward(net_inputs(a, c, taus), cache);
    Matrix pts(d, 3 * q);
    for (Eigen::Index j = 0; j < 3 * q; ++j)
        pts.col(j) = (1.0 - taus(j)) * a.col(j) + taus(j) * c.col(j) + bend_gamma(taus(j)) * delta.col(j);

    Matrix vel = pts.middleCols(2 * q, q) - pts.leftCols(q);
    for (Eigen::Index j = 0; j < q; ++j) vel.col(j) /= span(j);
    const MetricWithGrad mg = metric_with_grad(metric, pts.middleCols(q, q));

    const double scale = 1.0 / static_cast<double>(q);
    BendBatchLoss out;
    Matrix dpts = Matrix::Zero(d, 3 * q);
    for (Eigen::Index j = 0; j < q; ++j) {
        const double speed2 = vel.col(j).squaredNorm();
        out.loss += mg.value(j) * speed2;
        dpts.col(q + j) = scale * speed2 * mg.grad.col(j);
        const Vector dv = scale * 2.0 * mg.value(j) * vel.col(j) / span(j);
        dpts.col(2 * q + j) += dv;
        dpts.col(j) -= dv;
    }
    out.loss *= scale;
    Matrix upstream(d, 3 * q);
    for (Eigen::Index j = 0; j < 3 * q; ++j) upstream.col(j) = bend_gamma(taus(j)) * dpts.col(j);
    out.grad = Vector::Zero(b.net.num_params());
    b.net.backward(cache, upstream, out.grad);
    return out;
}

BendModel train_bend(const MarginalSequence& seq, const std::vector<int>& which, const MetricModel& metric,
                     const Coupling& coupling, const BendTrainConfig& cfg, Rng& rng, BendTrainReport* report) {
    if (which.size() < 2) throw DataError("train_bend: need at least two marginals");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ParameterError("train_bend: epochs and batch_size must be >= 1");
    if (cfg.n_energy_points < 2) throw ParameterError("train_bend: n_energy_points must be >= 2");
    for (int k : which)
        if (seq.marginals.at(k).rows() == 0) throw DataError("train_bend: empty marginal");
    const int d = seq.dim();
    BendModel model = make_bend(d, cfg.hidden, rng);
    AdamW opt(model.net.num_params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    PlateauScheduler sched(cfg.plateau_factor, cfg.plateau_patience);
    const int n = cfg.n_energy_points;

    struct Pair {
        int k0, i0, k1, i1;
    };
    auto draw_pairs = [&] {
        std::vector<Pair> pairs;
        for (std::size_t s = 0; s + 1 < which.size(); ++s) {
            const Matrix& A = seq.marginals[which[s]];
            const Matrix& B = seq.marginals[which[s + 1]];
            const int m = cfg.pairs_per_epoch > 0 ? cfg.pairs_per_epoch : static_cast<int>(A.rows());
            for (const auto& [i, j] : couple(coupling, A, B, m, rng)) pairs.push_back({which[s], i, which[s + 1], j});
        }
        std::shuffle(pairs.begin(), pairs.end(), rng);
        return pairs;
    };
    auto gather = [&](const std::vector<Pair>& pairs, std::size_t from, std::size_t to, Matrix& x0, Matrix& x1) {
        x0.resize(d, static_cast<Eigen::Index>(to - from));
        x1.resize(d, x0.cols());
        for (std::size_t i = from; i < to; ++i) {
            x0.col(i - from) = seq.marginals[pairs[i].k0].row(pairs[i].i0).transpose();
            x1.col(i - from) = seq.marginals[pairs[i].k1].row(pairs[i].i1).transpose();
        }
    };

    BendTrainReport rep;
    auto pairs = draw_pairs();
    {
        // Initial loss at the cell midpoints.
        double total = 0.0;
        std::size_t count = 0;
        Matrix x0, x1;
        for (std::size_t s = 0; s < pairs.size(); s += cfg.batch_size) {
            const auto e = std::min(pairs.size(), s + cfg.batch_size);
            gather(pairs, s, e, x0, x1);
            Matrix tau(x0.cols(), n);
            for (int i = 0; i < n; ++i) tau.col(i).setConstant((i + 0.5) / n);
            const double l = bend_batch_loss(model, metric, x0, x1, tau).loss;
            if (std::isfinite(l)) {
                total += l * x0.cols();
                count += x0.cols();
            }
        }
        rep.initial_loss = count ? total / count : std::numeric_limits<double>::infinity();
    }
    Vector best_params = model.net.params();
    double best = rep.initial_loss;

    double lr = cfg.lr;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0) pairs = draw_pairs();
        double total = 0.0;
        std::size_t count = 0;
        Matrix x0, x1;
        for (std::size_t s = 0; s < pairs.size(); s += cfg.batch_size) {
            const auto e = std::min(pairs.size(), s + cfg.batch_size);
            gather(pairs, s, e, x0, x1);
            Matrix tau(x0.cols(), n);
            for (Eigen::Index p = 0; p < tau.rows(); ++p)
                for (int i = 0; i < n; ++i) tau(p, i) = (i + uniform01(rng)) / n;
            const auto bl = bend_batch_loss(model, metric, x0, x1, tau);
            if (!std::isfinite(bl.loss) || !bl.grad.allFinite()) {
                ++rep.skipped_batches;
                continue;
            }
            opt.step(model.net.params(), bl.grad);
            total += bl.loss * x0.cols();
            count += x0.cols();
        }
        const double epoch_loss = count ? total / count : std::numeric_limits<double>::infinity();
        rep.loss.push_back(epoch_loss);
        if (epoch_loss < best) {
            best = epoch_loss;
            best_params = model.net.params();
        }
        rep.best_loss.push_back(best);
        lr = sched.update(epoch_loss, lr);
        opt.config().lr = lr;
    }
    model.net.params() = best_params;
    model.metric_hash = metric_checkpoint(metric).hash();
    if (report) *report = std::move(rep);
    return model;
}

Checkpoint bend_checkpoint(const BendModel& b) {
    Checkpoint c("bend");
    c.meta()["metric_hash"] = b.metric_hash;
    c.put_mlp("net", b.net);
    return c;
}

BendModel bend_from_checkpoint(const Checkpoint& c) {
    if (c.kind() != "bend") throw ParseError("checkpoint kind '" + c.kind() + "' is not a bend");
    return BendModel{c.mlp("net"), c.meta().value("metric_hash", std::string())};
}

}  // namespace flux
