#include "flux/velocity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flux {

int MixtureVelocityModel::input_dim() const { return experts.front().input_dim(); }

MixtureVelocityModel make_mixture(const MixtureShape& s, Rng& rng) {
    if (s.dim < 1 || s.experts < 1 || s.hidden < 1 || s.layers < 1 || s.router_hidden < 1)
        throw ParameterError("make_mixture: sizes must be positive");
    if (s.time_embedding.dim < 2 || s.time_embedding.dim % 2 != 0)
        throw ParameterError("make_mixture: time embedding dim must be even and positive");
    MixtureVelocityModel m;
    m.time_embedding = s.time_embedding;
    m.gumbel = s.gumbel;
    m.source_conditioning = s.source_conditioning;
    const int in = s.time_embedding.dim + s.dim * (s.source_conditioning ? 2 : 1);
    std::vector<int> dims{in};
    for (int l = 0; l < s.layers; ++l) dims.push_back(s.hidden);
    dims.push_back(s.dim);
    for (int k = 0; k < s.experts; ++k) m.experts.emplace_back(dims, s.expert_activation, rng);
    if (s.experts > 1) m.router = Mlp({in, s.router_hidden, s.router_hidden, s.experts}, s.router_activation, rng);
    return m;
}

Matrix mixture_inputs(const MixtureVelocityModel& m, const Vector& t, const Matrix& x, const Matrix& source) {
    const auto d = x.rows();
    const int e = m.time_embedding.dim;
    if (d != m.dim()) throw ShapeError("mixture: state dimension mismatch");
    if (t.size() != x.cols()) throw ShapeError("mixture: one time per column expected");
    Matrix in(m.input_dim(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) in.col(j).head(e) = m.time_embedding.embed(t(j));
    in.middleRows(e, d) = x;
    if (m.source_conditioning) {
        if (source.rows() != d || source.cols() != x.cols()) throw ShapeError("mixture: source shape mismatch");
        in.bottomRows(d) = source;
    }
    return in;
}

namespace {

Vector deterministic_weights(const Vector& logits) {
    Eigen::Index j = 0;
    logits.maxCoeff(&j);
    return one_hot(static_cast<int>(logits.size()), static_cast<int>(j));
}

}  // namespace

Routing route(const MixtureVelocityModel& m, double t, const Vector& x, const std::optional<Vector>& source,
              RouteMode mode, double tau, Rng& rng) {
    const int K = m.num_experts();
    if (K == 1) return {Vector::Zero(1), Vector::Ones(1)};
    const Matrix in = mixture_inputs(m, Vector::Constant(1, t), x, source ? *source : x);
    Routing r;
    r.logits = m.router.forward(in).col(0);
    switch (mode) {
        case RouteMode::deterministic: r.weights = deterministic_weights(r.logits); break;
        case RouteMode::soft: r.weights = gumbel_softmax(r.logits, tau, false, rng).weights; break;
        case RouteMode::hard: r.weights = gumbel_softmax(r.logits, tau, true, rng).weights; break;
    }
    return r;
}

Vector mixture_velocity(const MixtureVelocityModel& m, double t, const Vector& x, const std::optional<Vector>& source,
                        const Vector& weights) {
    if (weights.size() != m.num_experts()) throw ShapeError("mixture_velocity: one weight per expert expected");
    const Matrix in = mixture_inputs(m, Vector::Constant(1, t), x, source ? *source : x);
    Vector v = Vector::Zero(m.dim());
    for (int k = 0; k < m.num_experts(); ++k)
        if (weights(k) != 0.0) v += weights(k) * m.experts[k].forward(in).col(0);
    return v;
}

Matrix MixtureField::probabilities(double t, const Matrix& x, const Matrix& source) const {
    const int K = m_.num_experts();
    if (K == 1) return Matrix::Ones(x.rows(), 1);
    const Matrix in = mixture_inputs(m_, Vector::Constant(x.rows(), t), x.transpose(), source.transpose());
    const Matrix logits = m_.router.forward(in);
    Matrix p(x.rows(), K);
    for (Eigen::Index i = 0; i < x.rows(); ++i) p.row(i) = softmax(logits.col(i)).transpose();
    return p;
}

std::vector<int> MixtureField::assignments(double t, const Matrix& x, const Matrix& source) const {
    std::vector<int> out(x.rows(), 0);
    if (m_.num_experts() == 1) return out;
    const Matrix in = mixture_inputs(m_, Vector::Constant(x.rows(), t), x.transpose(), source.transpose());
    const Matrix logits = m_.router.forward(in);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Eigen::Index j = 0;
        logits.col(i).maxCoeff(&j);
        out[i] = static_cast<int>(j);
    }
    return out;
}

Matrix MixtureField::velocity(double t, const Matrix& x, const Matrix& source) const {
    const Matrix in = mixture_inputs(m_, Vector::Constant(x.rows(), t), x.transpose(), source.transpose());
    if (m_.num_experts() == 1) return m_.time_scale * m_.experts[0].forward(in).transpose();
    const auto assign = assignments(t, x, source);
    Matrix v(x.rows(), x.cols());
    for (int k = 0; k < m_.num_experts(); ++k) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < assign.size(); ++i)
            if (assign[i] == k) rows.push_back(static_cast<Eigen::Index>(i));
        if (rows.empty()) continue;
        Matrix sub(in.rows(), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) sub.col(i) = in.col(rows[i]);
        const Matrix out = m_.experts[k].forward(sub);
        for (std::size_t i = 0; i < rows.size(); ++i) v.row(rows[i]) = out.col(i).transpose();
    }
    return m_.time_scale * v;
}

PathSamples conditional_path(const BendModel* bend, const Matrix& x0, const Matrix& x1, const Vector& alpha,
                             const Vector& rate) {
    if (alpha.size() != x0.cols() || rate.size() != x0.cols()) throw ShapeError("conditional_path: size mismatch");
    PathSamples out;
    if (bend) {
        out.points = bend_points(*bend, x0, x1, alpha);
        out.targets = bend_tangents(*bend, x0, x1, alpha);
    } else {
        out.points.resize(x0.rows(), x0.cols());
        for (Eigen::Index j = 0; j < x0.cols(); ++j) out.points.col(j) = (1.0 - alpha(j)) * x0.col(j) + alpha(j) * x1.col(j);
        out.targets = x1 - x0;
    }
    for (Eigen::Index j = 0; j < x0.cols(); ++j) out.targets.col(j) *= rate(j);
    return out;
}

namespace {

double l2_norm2(const MixtureVelocityModel& m) {
    double s = 0.0;
    for (const auto& e : m.experts) s += e.params().squaredNorm();
    if (m.num_experts() > 1) s += m.router.params().squaredNorm();
    return s;
}

}  // namespace

VelocityBatchResult velocity_batch_loss(const MixtureVelocityModel& m, const VelocityBatch& b, RouteMode mode, double tau,
                                        const PenaltyWeights& pw, double lambda_lb, bool need_grad, Rng& rng) {
    const int K = m.num_experts();
    const auto B = b.points.cols();
    const Matrix in = mixture_inputs(m, b.t, b.points, b.source);
    VelocityBatchResult res;

    Matrix logits, soft, weights, q;
    Mlp::Cache router_cache;
    if (K > 1) {
        logits = need_grad ? m.router.forward(in, router_cache) : m.router.forward(in);
        soft.resize(B, K);
        weights.resize(B, K);
        q.resize(B, K);
        for (Eigen::Index i = 0; i < B; ++i) {
            const Vector l = logits.col(i);
            q.row(i) = softmax(l).transpose();
            if (mode == RouteMode::deterministic) {
                soft.row(i) = q.row(i);
                weights.row(i) = deterministic_weights(l).transpose();
            } else {
                const auto g = gumbel_softmax(l, tau, mode == RouteMode::hard, rng);
                soft.row(i) = g.soft.transpose();
                weights.row(i) = g.weights.transpose();
            }
        }
    } else {
        weights = Matrix::Ones(B, 1);
    }

    std::vector<Mlp::Cache> caches(K);
    std::vector<Matrix> outs(K);
    Matrix v = Matrix::Zero(m.dim(), B);
    for (int k = 0; k < K; ++k) {
        outs[k] = need_grad ? m.experts[k].forward(in, caches[k]) : m.experts[k].forward(in);
        v += outs[k] * weights.col(k).asDiagonal();
    }

    Matrix dv;
    res.terms.fm = flow_matching_loss(v, b.targets, need_grad ? &dv : nullptr);
    const bool v_finite = v.allFinite();
    res.terms.vel = v_finite ? v.squaredNorm() / static_cast<double>(v.size()) : 0.0;
    res.terms.l2 = pw.l2 > 0.0 ? l2_norm2(m) : 0.0;
    if (need_grad && pw.vel > 0.0 && v_finite) dv += (2.0 * pw.vel / static_cast<double>(v.size())) * v;

    Matrix dsoft, dlogits, dq;
    if (K > 1) {
        dsoft = Matrix::Zero(B, K);
        dlogits = Matrix::Zero(B, K);
        dq = Matrix::Zero(B, K);
        auto add = [&](double lambda, const PenaltyValue& p, double& slot, Matrix& target) {
            slot = p.value;
            if (lambda != 0.0) target += lambda * p.grad;
        };
        add(pw.div, penalty_diversity(soft), res.terms.div, dsoft);
        add(pw.sp, penalty_sparsity(soft), res.terms.sp, dsoft);
        add(pw.con, penalty_consistency(soft, b.groups), res.terms.con, dsoft);
        add(lambda_lb, penalty_load_balance(soft), res.terms.lb, dsoft);
        add(pw.z, penalty_z(logits.transpose()), res.terms.z, dlogits);
        add(pw.conf, penalty_confidence(soft), res.terms.conf, dsoft);
        add(pw.clust, penalty_clustering(q), res.terms.clust, dq);
        const auto seg = penalty_segments(soft, b.segments);
        add(pw.seg_con, seg.seg_con, res.terms.seg_con, dsoft);
        add(pw.seg_sharp, seg.seg_sharp, res.terms.seg_sharp, dsoft);
        add(pw.tv, seg.tv, res.terms.tv, dsoft);
        add(pw.contig, seg.contig, res.terms.contig, dsoft);
    }
    res.total = composite_loss(res.terms, pw, lambda_lb);
    if (!need_grad) return res;

    res.expert_grads.resize(K);
    for (int k = 0; k < K; ++k) {
        res.expert_grads[k] = Vector::Zero(m.experts[k].num_params());
        m.experts[k].backward(caches[k], dv * weights.col(k).asDiagonal(), res.expert_grads[k]);
        if (pw.l2 > 0.0) res.expert_grads[k] += 2.0 * pw.l2 * m.experts[k].params();
    }
    if (K > 1) {
        // Straight-through: the mixture weight gradient flows into the soft path.
        for (int k = 0; k < K; ++k) dsoft.col(k) += (dv.array() * outs[k].array()).colwise().sum().transpose().matrix();
        Matrix up(K, B);
        for (Eigen::Index i = 0; i < B; ++i) {
            const double t_soft = mode == RouteMode::deterministic ? 1.0 : tau;
            Vector g = dlogits.row(i).transpose();
            g += softmax_backward(soft.row(i).transpose(), dsoft.row(i).transpose(), t_soft);
            g += softmax_backward(q.row(i).transpose(), dq.row(i).transpose(), 1.0);
            up.col(i) = g;
        }
        res.router_grad = Vector::Zero(m.router.num_params());
        m.router.backward(router_cache, up, res.router_grad);
        if (pw.l2 > 0.0) res.router_grad += 2.0 * pw.l2 * m.router.params();
    }
    return res;
}

namespace {

void accumulate(LossTerms& acc, const LossTerms& t, double w) {
    acc.fm += w * t.fm;
    acc.vel += w * t.vel;
    acc.l2 += w * t.l2;
    acc.div += w * t.div;
    acc.con += w * t.con;
    acc.sp += w * t.sp;
    acc.lb += w * t.lb;
    acc.z += w * t.z;
    acc.conf += w * t.conf;
    acc.clust += w * t.clust;
    acc.seg_con += w * t.seg_con;
    acc.seg_sharp += w * t.seg_sharp;
    acc.tv += w * t.tv;
    acc.contig += w * t.contig;
}

struct PairRef {
    int step;  // index into `which` of the source marginal
    int i0, i1;
};

}  // namespace

MixtureVelocityModel train_velocity(const MarginalSequence& seq, const std::vector<int>& which, const BendModel* bend,
                                    const VelocityTrainConfig& cfg, Rng& rng, VelocityTrainReport* report,
                                    const std::function<void(const VelocityEpochLog&)>& on_epoch) {
    if (which.size() < 2) throw DataError("train_velocity: need at least two marginals");
    for (int k : which)
        if (seq.marginals.at(k).rows() == 0) throw DataError("train_velocity: empty marginal " + std::to_string(k));
    if (!cfg.euclidean && !bend) throw ParameterError("train_velocity: a bend model is required outside Euclidean mode");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ParameterError("train_velocity: epochs and batch_size must be >= 1");
    const BendModel* path = cfg.euclidean ? nullptr : bend;
    const int d = seq.dim();

    MixtureShape shape = cfg.shape;
    shape.dim = d;
    MixtureVelocityModel model = make_mixture(shape, rng);
    if (seq.size() > 1) model.time_scale = (seq.size() - 1) / (seq.times.back() - seq.times.front());
    const int K = model.num_experts();

    // Train/validation split: one index permutation shared by all marginals.
    std::vector<std::vector<int>> train_idx(seq.size()), val_idx(seq.size());
    {
        Eigen::Index max_n = 0;
        for (int k : which) max_n = std::max(max_n, seq.marginals[k].rows());
        std::vector<int> perm(max_n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int k : which) {
            const int n = static_cast<int>(seq.marginals[k].rows());
            const int n_val = n >= 2 ? std::clamp(static_cast<int>(cfg.val_fraction * n), 0, n - 1) : 0;
            for (int p : perm) {
                if (p >= n) continue;
                if (static_cast<int>(val_idx[k].size()) < n_val) val_idx[k].push_back(p);
                else train_idx[k].push_back(p);
            }
            std::sort(train_idx[k].begin(), train_idx[k].end());
            std::sort(val_idx[k].begin(), val_idx[k].end());
        }
    }
    auto rows_of = [&](int k, const std::vector<int>& idx) {
        Matrix out(static_cast<Eigen::Index>(idx.size()), d);
        for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = seq.marginals[k].row(idx[i]);
        return out;
    };
    std::vector<Matrix> train_sets(seq.size()), val_sets(seq.size());
    for (int k : which) {
        train_sets[k] = rows_of(k, train_idx[k]);
        val_sets[k] = rows_of(k, val_idx[k]);
    }

    auto draw_pairs = [&](const std::vector<Matrix>& sets, Rng& r) {
        std::vector<PairRef> pairs;
        for (std::size_t s = 0; s + 1 < which.size(); ++s) {
            const Matrix& A = sets[which[s]];
            const Matrix& B = sets[which[s + 1]];
            if (A.rows() == 0 || B.rows() == 0) continue;
            for (const auto& [i, j] : couple(cfg.coupling, A, B, static_cast<int>(A.rows()), r))
                pairs.push_back({static_cast<int>(s), i, j});
        }
        return pairs;
    };
    auto make_batch = [&](const std::vector<PairRef>& pairs, std::size_t from, std::size_t to,
                          const std::vector<std::vector<int>>& idx, const std::vector<Matrix>& sets, Rng& r) {
        const auto n = static_cast<Eigen::Index>(to - from);
        VelocityBatch b;
        Matrix x0(d, n), x1(d, n);
        Vector alpha(n), rate(n);
        b.t.resize(n);
        for (Eigen::Index c = 0; c < n; ++c) {
            const auto& p = pairs[from + c];
            const int ka = which[p.step], kb = which[p.step + 1];
            x0.col(c) = sets[ka].row(p.i0).transpose();
            x1.col(c) = sets[kb].row(p.i1).transpose();
            alpha(c) = uniform01(r);
            const double ta = seq.times[ka], tb = seq.times[kb];
            rate(c) = 1.0 / ((tb - ta) * model.time_scale);
            b.t(c) = global_time(ta, tb, alpha(c));
            b.groups.push_back(ka);
            b.segments.push_back(seq.has_segments() ? seq.segments[ka][idx[ka][p.i0]] : ka);
        }
        auto ps = conditional_path(path, x0, x1, alpha, rate);
        b.points = std::move(ps.points);
        b.targets = std::move(ps.targets);
        b.source = std::move(x0);
        return b;
    };

    // Fixed validation batches.
    std::vector<VelocityBatch> val_batches;
    {
        Rng vrng(derive_seed(rng(), 1));
        const auto vpairs = draw_pairs(val_sets, vrng);
        for (std::size_t s = 0; s < vpairs.size(); s += 256)
            val_batches.push_back(make_batch(vpairs, s, std::min(vpairs.size(), s + 256), val_idx, val_sets, vrng));
    }
    auto validation_fm = [&] {
        double total = 0.0;
        Eigen::Index count = 0;
        Rng unused(0);
        for (const auto& b : val_batches) {
            const auto r = velocity_batch_loss(model, b, RouteMode::deterministic, 1.0, PenaltyWeights::none(), 0.0, false, unused);
            total += r.terms.fm * static_cast<double>(b.points.cols());
            count += b.points.cols();
        }
        return count ? total / static_cast<double>(count) : 0.0;
    };

    const AdamWConfig ocfg{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    std::vector<AdamW> expert_opt;
    for (const auto& e : model.experts) expert_opt.emplace_back(e.num_params(), ocfg);
    AdamW router_opt(K > 1 ? model.router.num_params() : 0, ocfg);

    VelocityTrainReport rep;
    MixtureVelocityModel best = model;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        VelocityEpochLog log;
        log.epoch = epoch;
        log.temperature = model.gumbel.temperature(epoch);
        log.hard = model.gumbel.hard_enabled(epoch);
        log.lambda_lb = cfg.weights.lb_at(epoch, cfg.epochs);
        const RouteMode mode = log.hard ? RouteMode::hard : RouteMode::soft;

        auto pairs = draw_pairs(train_sets, rng);
        std::shuffle(pairs.begin(), pairs.end(), rng);
        double seen = 0.0;
        for (std::size_t s = 0; s < pairs.size(); s += cfg.batch_size) {
            const auto e = std::min(pairs.size(), s + cfg.batch_size);
            const VelocityBatch b = make_batch(pairs, s, e, train_idx, train_sets, rng);
            const auto r = velocity_batch_loss(model, b, mode, log.temperature, cfg.weights, log.lambda_lb, true, rng);
            bool finite = std::isfinite(r.total);
            for (const auto& g : r.expert_grads) finite = finite && g.allFinite();
            if (K > 1) finite = finite && r.router_grad.allFinite();
            if (!finite) {
                ++rep.skipped_batches;
                continue;
            }
            for (int k = 0; k < K; ++k) expert_opt[k].step(model.experts[k].params(), r.expert_grads[k]);
            if (K > 1) router_opt.step(model.router.params(), r.router_grad);
            const double w = static_cast<double>(b.points.cols());
            accumulate(log.terms, r.terms, w);
            log.total += w * r.total;
            seen += w;
        }
        if (seen > 0.0) {
            LossTerms scaled;
            accumulate(scaled, log.terms, 1.0 / seen);
            log.terms = scaled;
            log.total /= seen;
        }
        log.val_fm = validation_fm();
        rep.epochs.push_back(log);
        if (on_epoch) on_epoch(log);

        if (log.val_fm < best_val) {
            best_val = log.val_fm;
            best = model;
            rep.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    rep.best_val_fm = best_val;
    if (report) *report = std::move(rep);
    return best;
}

Checkpoint velocity_checkpoint(const MixtureVelocityModel& m) {
    Checkpoint c("velocity");
    auto& meta = c.meta();
    meta["experts"] = m.num_experts();
    meta["source_conditioning"] = m.source_conditioning;
    meta["time_scale"] = m.time_scale;
    meta["time_embedding"] = {{"dim", m.time_embedding.dim},
                              {"min_freq", m.time_embedding.min_freq},
                              {"max_freq", m.time_embedding.max_freq}};
    meta["gumbel"] = {{"tau_init", m.gumbel.tau_init},
                      {"tau_min", m.gumbel.tau_min},
                      {"tau_decay", m.gumbel.tau_decay},
                      {"soft_epochs", m.gumbel.soft_epochs}};
    for (int k = 0; k < m.num_experts(); ++k) c.put_mlp("expert" + std::to_string(k), m.experts[k]);
    if (m.num_experts() > 1) c.put_mlp("router", m.router);
    return c;
}

MixtureVelocityModel velocity_from_checkpoint(const Checkpoint& c) {
    if (c.kind() != "velocity") throw ParseError("checkpoint kind '" + c.kind() + "' is not a velocity model");
    const auto& meta = c.meta();
    MixtureVelocityModel m;
    m.source_conditioning = meta.at("source_conditioning").get<bool>();
    m.time_scale = meta.value("time_scale", 1.0);
    const auto& te = meta.at("time_embedding");
    m.time_embedding = {te.at("dim").get<int>(), te.at("min_freq").get<double>(), te.at("max_freq").get<double>()};
    const auto& g = meta.at("gumbel");
    m.gumbel = {g.at("tau_init").get<double>(), g.at("tau_min").get<double>(), g.at("tau_decay").get<double>(),
                g.at("soft_epochs").get<int>()};
    const int K = meta.at("experts").get<int>();
    for (int k = 0; k < K; ++k) m.experts.push_back(c.mlp("expert" + std::to_string(k)));
    if (K > 1) m.router = c.mlp("router");
    return m;
}

nlohmann::json to_json(const VelocityEpochLog& e) {
    const auto& t = e.terms;
    return {{"epoch", e.epoch},       {"total", e.total},   {"fm", t.fm},         {"vel", t.vel},
            {"l2", t.l2},             {"div", t.div},       {"con", t.con},       {"sp", t.sp},
            {"lb", t.lb},             {"z", t.z},           {"conf", t.conf},     {"clust", t.clust},
            {"seg_con", t.seg_con},   {"seg_sharp", t.seg_sharp},                 {"tv", t.tv},
            {"contig", t.contig},     {"val_fm", e.val_fm}, {"temperature", e.temperature},
            {"lambda_lb", e.lambda_lb}, {"hard", e.hard}};
}

}  // namespace flux
