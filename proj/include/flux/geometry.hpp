#pragma once

// Stage-0 geometry backends. Both backends produce a manifold score
// h(x) in (0,1) and the isotropic scalar metric M(x) = (h(x) + eps)^-alpha.

#include <variant>
#include <vector>

#include "flux/checkpoint.hpp"
#include "flux/common.hpp"
#include "flux/nn.hpp"

namespace flux {

struct KMeansResult {
    Matrix centers;                 // k x d
    std::vector<int> assignment;    // per point
    std::vector<double> objective;  // sum of squared distances per Lloyd iteration
};

// Lloyd's algorithm with k-means++ seeding. Points are rows.
// Empty clusters are re-seeded at the point farthest from its current center.
KMeansResult kmeans(const Matrix& points, int k, int max_iter, Rng& rng);

// Direct RBF score on ambient coordinates (used when d < 5).
struct RbfMetric {
    Matrix centers;  // M_c x d
    double bandwidth = 1.0;
    double a = 1.0;
    double b = 0.0;
    double eps = 1e-2;
    double alpha = 1.0;
};

// Deep-kernel score: RBF mass computed on learned features q(x).
struct DeepKernelMetric {
    Mlp feature_map;
    Matrix centers;  // M_c x d_z
    double bandwidth = 1.0;
    double a = 1.0;
    double b = 0.0;
    double eps = 1e-2;
    double alpha = 1.0;
};

// M(x) = value everywhere. Reference backend for Euclidean paths and tests.
struct UniformMetric {
    double value = 1.0;
};

using MetricModel = std::variant<UniformMetric, RbfMetric, DeepKernelMetric>;

std::string metric_kind(const MetricModel& m);

double manifold_score(const MetricModel& metric, const Vector& x);
double metric_scalar(const MetricModel& metric, const Vector& x);
double metric_from_score(double h, double eps, double alpha);

// Batched evaluation, X is (d x batch).
Vector manifold_score_batch(const MetricModel& metric, const Matrix& x);
Vector metric_batch(const MetricModel& metric, const Matrix& x);

struct MetricWithGrad {
    Vector value;  // M(x_i)
    Matrix grad;   // dM/dx, d x batch
};
MetricWithGrad metric_with_grad(const MetricModel& metric, const Matrix& x);

struct GeometryTrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double negative_ratio = 1.0;
    // Share of deep-kernel negatives taken from chords between random data
    // pairs; the rest are uniform box samples.
    double chord_fraction = 0.5;
    int early_stop_patience = 30;
    int num_centers = 128;
    int feature_dim = 32;
    int hidden = 64;
    double eps = 1e-2;
    double alpha = 1.0;
    // Ambient dims below this use the direct RBF backend.
    int deep_kernel_min_dim = 5;
    // Direct RBF bandwidth = bandwidth_scale * sqrt(d/3) * data diameter.
    double bandwidth_scale = 10.0 / 818.0;
    int kmeans_iters = 100;
};

struct GeometryTrainReport {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
};

struct DeepKernelGrads {
    Vector feature;  // feature-map parameters
    Matrix centers;
    double log_a = 0.0;
    double b = 0.0;
};

// Deep-kernel training loss: mean BCE of the score logit a * lse + b against
// labels y (1 = data, 0 = negative) for columns of x. Fills gradients when g is set.
double deep_kernel_bce(const DeepKernelMetric& m, const Matrix& x, const Vector& y, DeepKernelGrads* g);

// Trains on pooled samples (rows). Selects the backend from the ambient dim.
MetricModel train_geometry(const Matrix& pooled, const GeometryTrainConfig& cfg, Rng& rng,
                           GeometryTrainReport* report = nullptr);

// Axis-aligned data box inflated by `factor` about its center, used for negatives.
struct BoundingBox {
    Vector lo, hi;
};
BoundingBox inflated_bounds(const Matrix& pooled, double factor);
Matrix sample_box(const BoundingBox& box, int n, Rng& rng);
// Points (1 - l) x_a + l x_b with l ~ U[0.25, 0.75] for random row pairs of `pooled`.
Matrix sample_chords(const Matrix& pooled, int n, Rng& rng);

Checkpoint metric_checkpoint(const MetricModel& metric);
MetricModel metric_from_checkpoint(const Checkpoint& c);

}  // namespace flux
