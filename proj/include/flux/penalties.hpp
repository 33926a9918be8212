#pragma once

// Routing penalties, finite-safe flow-matching loss and the composite objective.
// Batches are (B x K) with one sample per row. Every penalty returns its value
// and the gradient with respect to the matrix it consumes.

#include <vector>

#include "flux/common.hpp"

namespace flux {

struct PenaltyValue {
    double value = 0.0;
    Matrix grad;  // same shape as the consumed matrix
};

// 1 - H(mean w) / log K. Zero for K = 1.
PenaltyValue penalty_diversity(const Matrix& w);
// mean_i H(w_i) / log K. Zero for K = 1.
PenaltyValue penalty_sparsity(const Matrix& w);
// Mean over groups of the within-group variance (mean over components of the
// population variance). `groups` holds one group id per row.
PenaltyValue penalty_consistency(const Matrix& w, const std::vector<int>& groups);
// K sum_j F_j P_j. F (hard fractions from argmax) is not differentiated.
PenaltyValue penalty_load_balance(const Matrix& w);
// mean_i (log sum_j exp l_ij)^2; gradient with respect to logits.
PenaltyValue penalty_z(const Matrix& logits);
// mean_i (1 - max_j w_ij)
PenaltyValue penalty_confidence(const Matrix& w);
// Sharpened target P from the pre-noise assignment Q (rows of softmax(logits)).
Matrix clustering_target(const Matrix& q);
// mean_i KL(Q_i || P_i) with P held fixed; gradient with respect to Q.
PenaltyValue penalty_clustering(const Matrix& q);

struct SegmentPenalties {
    PenaltyValue seg_con, seg_sharp, tv, contig;
};
// Segments are ordered by id; the contiguity index is the 1-based position of
// each present segment in that order.
SegmentPenalties penalty_segments(const Matrix& w, const std::vector<int>& segments);

// Population variance of the columns of w over `rows`, averaged over columns.
double group_variance(const Matrix& w, const std::vector<int>& rows);

// Finite-safe MSE: non-finite entries become 0, residuals are clamped to
// [-1e3, 1e3], and the mean runs over all entries. `grad` (optional) gets
// d loss / d pred.
double flow_matching_loss(const Matrix& pred, const Matrix& target, Matrix* grad = nullptr);

inline constexpr double kResidualClamp = 1e3;

struct PenaltyWeights {
    double div = 1.0;
    double con = 0.0;
    double sp = 0.0;
    double lb_start = 0.1;
    double lb_end = 0.001;
    double z = 0.01;
    double conf = 0.05;
    double clust = 0.5;
    double seg_con = 0.0;
    double seg_sharp = 0.0;
    double tv = 0.05;
    double contig = 0.0;
    double vel = 0.10;
    double l2 = 0.0;

    // Linear decay from lb_start at epoch 0 to lb_end at the last epoch.
    double lb_at(int epoch, int total_epochs) const;
    // Every weight zero.
    static PenaltyWeights none();
};

struct LossTerms {
    double fm = 0.0, vel = 0.0, l2 = 0.0;
    double div = 0.0, con = 0.0, sp = 0.0, lb = 0.0, z = 0.0, conf = 0.0, clust = 0.0;
    double seg_con = 0.0, seg_sharp = 0.0, tv = 0.0, contig = 0.0;
};

double routing_loss(const LossTerms& t, const PenaltyWeights& w, double lambda_lb);
// L_FM + l2 * L_L2 + vel * L_vel + L_routing
double composite_loss(const LossTerms& t, const PenaltyWeights& w, double lambda_lb);

}  // namespace flux
