#include "flux/penalties.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "flux/nn.hpp"

namespace flux {

namespace {

// H(p) = -sum p log(p + eps) and its gradient.
double entropy_with_grad(const Vector& p, Vector* grad) {
    double h = 0.0;
    if (grad) grad->resize(p.size());
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        h -= p(j) * std::log(p(j) + kLogEps);
        if (grad) (*grad)(j) = -std::log(p(j) + kLogEps) - p(j) / (p(j) + kLogEps);
    }
    return h;
}

int argmax_row(const Matrix& m, Eigen::Index i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    return static_cast<int>(j);
}

void check_rows(const Matrix& w, std::size_t n, const char* what) {
    if (static_cast<std::size_t>(w.rows()) != n) throw ShapeError(std::string(what) + ": one id per row expected");
}

// Rows grouped by id, ids ascending.
std::map<int, std::vector<int>> rows_by_id(const std::vector<int>& ids) {
    std::map<int, std::vector<int>> out;
    for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]].push_back(static_cast<int>(i));
    return out;
}

// Group-variance penalty shared by consistency and segment consistency.
PenaltyValue grouped_variance(const Matrix& w, const std::vector<int>& ids) {
    PenaltyValue out;
    out.grad = Matrix::Zero(w.rows(), w.cols());
    const auto groups = rows_by_id(ids);
    if (groups.empty()) return out;
    const double K = static_cast<double>(w.cols());
    const double G = static_cast<double>(groups.size());
    for (const auto& [id, rows] : groups) {
        out.value += group_variance(w, rows);
        Vector mean = Vector::Zero(w.cols());
        for (int r : rows) mean += w.row(r).transpose();
        mean /= static_cast<double>(rows.size());
        const double n = static_cast<double>(rows.size());
        for (int r : rows) out.grad.row(r) = (2.0 / (K * n * G)) * (w.row(r) - mean.transpose());
    }
    out.value /= G;
    return out;
}

}  // namespace

double group_variance(const Matrix& w, const std::vector<int>& rows) {
    if (rows.empty()) return 0.0;
    Vector mean = Vector::Zero(w.cols());
    for (int r : rows) mean += w.row(r).transpose();
    mean /= static_cast<double>(rows.size());
    double v = 0.0;
    for (int r : rows) v += (w.row(r).transpose() - mean).squaredNorm();
    return v / (static_cast<double>(rows.size()) * static_cast<double>(w.cols()));
}

PenaltyValue penalty_diversity(const Matrix& w) {
    PenaltyValue out;
    out.grad = Matrix::Zero(w.rows(), w.cols());
    if (w.cols() <= 1 || w.rows() == 0) return out;
    const double logk = std::log(static_cast<double>(w.cols()));
    const Vector mean = w.colwise().mean().transpose();
    Vector dh;
    const double h = entropy_with_grad(mean, &dh);
    out.value = 1.0 - h / logk;
    const Vector row = -dh / (logk * static_cast<double>(w.rows()));
    out.grad.rowwise() = row.transpose();
    return out;
}

PenaltyValue penalty_sparsity(const Matrix& w) {
    PenaltyValue out;
    out.grad = Matrix::Zero(w.rows(), w.cols());
    if (w.cols() <= 1 || w.rows() == 0) return out;
    const double scale = 1.0 / (std::log(static_cast<double>(w.cols())) * static_cast<double>(w.rows()));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        Vector dh;
        out.value += entropy_with_grad(w.row(i).transpose(), &dh);
        out.grad.row(i) = scale * dh.transpose();
    }
    out.value *= scale;
    return out;
}

PenaltyValue penalty_consistency(const Matrix& w, const std::vector<int>& groups) {
    check_rows(w, groups.size(), "penalty_consistency");
    return grouped_variance(w, groups);
}

PenaltyValue penalty_load_balance(const Matrix& w) {
    PenaltyValue out;
    out.grad = Matrix::Zero(w.rows(), w.cols());
    if (w.rows() == 0) return out;
    const double B = static_cast<double>(w.rows());
    const double K = static_cast<double>(w.cols());
    Vector f = Vector::Zero(w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) f(argmax_row(w, i)) += 1.0 / B;
    const Vector p = w.colwise().mean().transpose();
    out.value = K * f.dot(p);
    out.grad.rowwise() = (K / B) * f.transpose();
    return out;
}

PenaltyValue penalty_z(const Matrix& logits) {
    PenaltyValue out;
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    if (logits.rows() == 0) return out;
    const double B = static_cast<double>(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector l = logits.row(i).transpose();
        const double lse = log_sum_exp(l);
        out.value += lse * lse;
        out.grad.row(i) = (2.0 * lse / B) * softmax(l).transpose();
    }
    out.value /= B;
    return out;
}

PenaltyValue penalty_confidence(const Matrix& w) {
    PenaltyValue out;
    out.grad = Matrix::Zero(w.rows(), w.cols());
    if (w.rows() == 0) return out;
    const double B = static_cast<double>(w.rows());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        const int j = argmax_row(w, i);
        out.value += 1.0 - w(i, j);
        out.grad(i, j) = -1.0 / B;
    }
    out.value /= B;
    return out;
}

Matrix clustering_target(const Matrix& q) {
    const Vector freq = q.colwise().sum().transpose();
    Matrix p(q.rows(), q.cols());
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (Eigen::Index j = 0; j < q.cols(); ++j) p(i, j) = q(i, j) * q(i, j) / std::max(freq(j), kLogEps);
        const double s = p.row(i).sum();
        if (s > 0.0) p.row(i) /= s;
    }
    return p;
}

PenaltyValue penalty_clustering(const Matrix& q) {
    PenaltyValue out;
    out.grad = Matrix::Zero(q.rows(), q.cols());
    if (q.rows() == 0) return out;
    const double B = static_cast<double>(q.rows());
    const Matrix p = clustering_target(q);
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (Eigen::Index j = 0; j < q.cols(); ++j) {
            // Exact where both are positive; the eps form only guards zero entries.
            const bool exact = q(i, j) > 0.0 && p(i, j) > 0.0;
            const double lr = exact ? std::log(q(i, j) / p(i, j)) : std::log((q(i, j) + kLogEps) / (p(i, j) + kLogEps));
            out.value += q(i, j) * lr;
            out.grad(i, j) = (lr + (exact ? 1.0 : q(i, j) / (q(i, j) + kLogEps))) / B;
        }
    out.value /= B;
    return out;
}

SegmentPenalties penalty_segments(const Matrix& w, const std::vector<int>& segments) {
    check_rows(w, segments.size(), "penalty_segments");
    SegmentPenalties out;
    out.seg_con = grouped_variance(w, segments);
    const auto K = w.cols();
    for (auto* p : {&out.seg_sharp, &out.tv, &out.contig}) p->grad = Matrix::Zero(w.rows(), K);
    const auto groups = rows_by_id(segments);
    const auto S = static_cast<Eigen::Index>(groups.size());
    if (S == 0) return out;

    Matrix means(S, K);
    std::vector<const std::vector<int>*> members;
    {
        Eigen::Index s = 0;
        for (const auto& [id, rows] : groups) {
            Vector m = Vector::Zero(K);
            for (int r : rows) m += w.row(r).transpose();
            means.row(s++) = m.transpose() / static_cast<double>(rows.size());
            members.push_back(&rows);
        }
    }
    // Spreads a gradient on segment means back onto member rows.
    auto scatter = [&](const Matrix& dmeans, Matrix& grad) {
        for (Eigen::Index s = 0; s < S; ++s) {
            const double n = static_cast<double>(members[s]->size());
            for (int r : *members[s]) grad.row(r) += dmeans.row(s) / n;
        }
    };

    if (K > 1) {
        const double logk = std::log(static_cast<double>(K));
        Matrix dm(S, K);
        for (Eigen::Index s = 0; s < S; ++s) {
            Vector dh;
            out.seg_sharp.value += entropy_with_grad(means.row(s).transpose(), &dh);
            dm.row(s) = dh.transpose() / (logk * static_cast<double>(S));
        }
        out.seg_sharp.value /= logk * static_cast<double>(S);
        scatter(dm, out.seg_sharp.grad);
    }

    if (S > 1) {
        Matrix dm = Matrix::Zero(S, K);
        const double norm = 1.0 / static_cast<double>(S - 1);
        for (Eigen::Index s = 0; s + 1 < S; ++s)
            for (Eigen::Index j = 0; j < K; ++j) {
                const double diff = means(s, j) - means(s + 1, j);
                out.tv.value += std::abs(diff);
                const double sg = (diff > 0.0) - (diff < 0.0);
                dm(s, j) += norm * sg;
                dm(s + 1, j) -= norm * sg;
            }
        out.tv.value *= norm;
        scatter(dm, out.tv.grad);
    }

    {
        Matrix dm = Matrix::Zero(S, K);
        const double Sd = static_cast<double>(S);
        for (Eigen::Index j = 0; j < K; ++j) {
            Vector y(S);
            for (Eigen::Index s = 0; s < S; ++s) y(s) = static_cast<double>(s + 1) * means(s, j);
            const double ybar = y.mean();
            const double var = (y.array() - ybar).square().sum() / Sd;
            const double den = means.col(j).sum() + kLogEps;
            out.contig.value += var / den;
            for (Eigen::Index s = 0; s < S; ++s)
                dm(s, j) = ((2.0 / Sd) * (y(s) - ybar) * static_cast<double>(s + 1) / den - var / (den * den)) /
                           static_cast<double>(K);
        }
        out.contig.value /= static_cast<double>(K);
        scatter(dm, out.contig.grad);
    }
    return out;
}

double flow_matching_loss(const Matrix& pred, const Matrix& target, Matrix* grad) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw ShapeError("flow_matching_loss: prediction and target shapes differ");
    const auto n = pred.size();
    if (grad) grad->setZero(pred.rows(), pred.cols());
    if (n == 0) return 0.0;
    double total = 0.0;
    for (Eigen::Index j = 0; j < pred.cols(); ++j)
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            const bool pf = std::isfinite(pred(i, j));
            const double p = pf ? pred(i, j) : 0.0;
            const double t = std::isfinite(target(i, j)) ? target(i, j) : 0.0;
            const double raw = p - t;
            const double r = std::clamp(raw, -kResidualClamp, kResidualClamp);
            total += r * r;
            if (grad && pf && raw == r) (*grad)(i, j) = 2.0 * r / static_cast<double>(n);
        }
    return total / static_cast<double>(n);
}

double PenaltyWeights::lb_at(int epoch, int total_epochs) const {
    if (total_epochs <= 1) return lb_start;
    const double f = std::clamp(static_cast<double>(epoch) / (total_epochs - 1), 0.0, 1.0);
    return lb_start + (lb_end - lb_start) * f;
}

PenaltyWeights PenaltyWeights::none() {
    PenaltyWeights w;
    w.div = w.con = w.sp = w.lb_start = w.lb_end = w.z = w.conf = w.clust = 0.0;
    w.seg_con = w.seg_sharp = w.tv = w.contig = w.vel = w.l2 = 0.0;
    return w;
}

double routing_loss(const LossTerms& t, const PenaltyWeights& w, double lambda_lb) {
    return w.div * t.div + w.con * t.con + w.sp * t.sp + lambda_lb * t.lb + w.z * t.z + w.conf * t.conf +
           w.clust * t.clust + w.seg_con * t.seg_con + w.seg_sharp * t.seg_sharp + w.tv * t.tv +
           w.contig * t.contig;
}

double composite_loss(const LossTerms& t, const PenaltyWeights& w, double lambda_lb) {
    return t.fm + w.l2 * t.l2 + w.vel * t.vel + routing_loss(t, w, lambda_lb);
}

}  // namespace flux
