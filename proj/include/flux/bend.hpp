#pragma once

// Stage-1 interpolant B(x0, x1, tau) = (1 - tau) x0 + tau x1 + gamma(tau) net(x0, x1, tau)
// with gamma(tau) = 4 tau (1 - tau), trained to minimize metric path energy.

#include <string>
#include <vector>

#include "flux/checkpoint.hpp"
#include "flux/geometry.hpp"
#include "flux/nn.hpp"
#include "flux/transport.hpp"

namespace flux {

struct BendModel {
    Mlp net;                  // (2d + 1) -> hidden -> hidden -> d
    std::string metric_hash;  // checkpoint hash of the metric it was trained against

    int dim() const { return net.output_dim(); }
};

BendModel make_bend(int dim, int hidden, Rng& rng);

inline double bend_gamma(double tau) { return 4.0 * tau * (1.0 - tau); }
inline double bend_gamma_derivative(double tau) { return 4.0 - 8.0 * tau; }

inline constexpr double kTangentStep = 1e-3;

Vector bend_interpolant(const BendModel& b, const Vector& x0, const Vector& x1, double tau);
Vector bend_tangent(const BendModel& b, const Vector& x0, const Vector& x1, double tau);

// Batched versions. X0, X1 are (d x batch); tau has one entry per column.
Matrix bend_points(const BendModel& b, const Matrix& x0, const Matrix& x1, const Vector& tau);
Matrix bend_tangents(const BendModel& b, const Matrix& x0, const Matrix& x1, const Vector& tau);

// Finite-difference knots used for the tangent at tau.
std::pair<double, double> tangent_knots(double tau);

// (1/n) sum_i M(B(tau_i)) |dB/dtau(tau_i)|^2 over midpoints of n uniform cells.
double path_energy(const BendModel& b, const MetricModel& metric, const Vector& x0, const Vector& x1,
                   int n_points = 8);

struct BendTrainConfig {
    int epochs = 100;
    int batch_size = 32;
    // Endpoint pairs drawn per adjacent marginal pair per epoch (0 = marginal size).
    int pairs_per_epoch = 0;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int n_energy_points = 8;
    int hidden = 64;
    double plateau_factor = 0.5;
    int plateau_patience = 10;
};

struct BendTrainReport {
    std::vector<double> loss;       // mean energy per epoch
    std::vector<double> best_loss;  // best-so-far
    double initial_loss = 0.0;
    int skipped_batches = 0;
};

// Loss and parameter gradient of the mean stratified energy over a batch of
// endpoint pairs (columns of x0/x1) at quadrature nodes tau (n_points per pair,
// row i of tau belongs to pair i).
struct BendBatchLoss {
    double loss = 0.0;
    Vector grad;
};
BendBatchLoss bend_batch_loss(const BendModel& b, const MetricModel& metric, const Matrix& x0, const Matrix& x1,
                              const Matrix& tau);

// Trains on adjacent pairs among `which` marginals (consecutive entries of `which`).
BendModel train_bend(const MarginalSequence& seq, const std::vector<int>& which, const MetricModel& metric,
                     const Coupling& coupling, const BendTrainConfig& cfg, Rng& rng,
                     BendTrainReport* report = nullptr);

Checkpoint bend_checkpoint(const BendModel& b);
BendModel bend_from_checkpoint(const Checkpoint& c);

}  // namespace flux
