#pragma once

// Stage-2 mixture-of-experts velocity field v(t, x) = sum_m w_m(t, x) f_m(t, x)
// with a Gumbel-routed gate, plus its flow-matching trainer.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flux/bend.hpp"
#include "flux/checkpoint.hpp"
#include "flux/nn.hpp"
#include "flux/penalties.hpp"
#include "flux/transport.hpp"

namespace flux {

enum class RouteMode { soft, hard, deterministic };

struct MixtureVelocityModel {
    std::vector<Mlp> experts;  // [temb; x; source?] -> ... -> d
    Mlp router;                // same input -> ... -> K (unused when K = 1)
    TimeEmbedding time_embedding;
    GumbelSchedule gumbel;
    bool source_conditioning = false;
    // Model-time velocity per unit of local path fraction: (T-1) / (t_last - t_first).
    // Experts predict d/d(alpha) of the path; integration multiplies by this.
    double time_scale = 1.0;

    int num_experts() const { return static_cast<int>(experts.size()); }
    int dim() const { return experts.front().output_dim(); }
    int input_dim() const;
};

struct MixtureShape {
    int dim = 3;
    int experts = 2;
    int hidden = 8;
    int layers = 2;
    int router_hidden = 32;
    Activation expert_activation = Activation::relu;
    Activation router_activation = Activation::tanh;
    TimeEmbedding time_embedding;
    GumbelSchedule gumbel;
    bool source_conditioning = true;
};

MixtureVelocityModel make_mixture(const MixtureShape& shape, Rng& rng);

// Network input columns [temb(t_i); x_i; source_i] for a batch with samples as columns.
Matrix mixture_inputs(const MixtureVelocityModel& m, const Vector& t, const Matrix& x, const Matrix& source);

struct Routing {
    Vector logits;
    Vector weights;
};

// A missing source is replaced by x itself.
Routing route(const MixtureVelocityModel& m, double t, const Vector& x, const std::optional<Vector>& source,
              RouteMode mode, double tau, Rng& rng);
Vector mixture_velocity(const MixtureVelocityModel& m, double t, const Vector& x, const std::optional<Vector>& source,
                        const Vector& weights);

// Batched inference with deterministic routing; samples as rows.
class MixtureField final : public VelocityField {
public:
    explicit MixtureField(const MixtureVelocityModel& m) : m_(m) {}
    int dim() const override { return m_.dim(); }
    Matrix velocity(double t, const Matrix& x, const Matrix& source) const override;
    // Argmax expert per row.
    std::vector<int> assignments(double t, const Matrix& x, const Matrix& source) const;
    // Router probabilities softmax(logits), rows = samples.
    Matrix probabilities(double t, const Matrix& x, const Matrix& source) const;

private:
    const MixtureVelocityModel& m_;
};

struct VelocityTrainConfig {
    MixtureShape shape;
    int epochs = 180;
    int batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int early_stop_patience = 30;
    double val_fraction = 0.2;
    Coupling coupling;
    PenaltyWeights weights;
    // Straight paths x0 -> x1 instead of the bend network.
    bool euclidean = false;
};

struct VelocityEpochLog {
    int epoch = 0;
    LossTerms terms;  // epoch means
    double total = 0.0;
    double val_fm = 0.0;
    double temperature = 1.0;
    double lambda_lb = 0.0;
    bool hard = false;
};

struct VelocityTrainReport {
    std::vector<VelocityEpochLog> epochs;
    int best_epoch = -1;
    double best_val_fm = 0.0;
    int skipped_batches = 0;
};

// One minibatch, samples as columns. `groups` feeds the consistency penalty
// (marginal index), `segments` the segment penalties.
struct VelocityBatch {
    Matrix points, targets, source;
    Vector t;
    std::vector<int> groups, segments;
};

struct VelocityBatchResult {
    LossTerms terms;
    double total = 0.0;
    std::vector<Vector> expert_grads;  // empty unless need_grad
    Vector router_grad;
};

// Composite loss of a batch routed through `mode`. Hard mode uses the
// straight-through estimator: one-hot forward, soft-path gradient.
VelocityBatchResult velocity_batch_loss(const MixtureVelocityModel& m, const VelocityBatch& b, RouteMode mode, double tau,
                                        const PenaltyWeights& pw, double lambda_lb, bool need_grad, Rng& rng);

// Trains on adjacent pairs among `which` marginals. `bend` may be null in
// Euclidean mode. `on_epoch` (optional) observes every epoch record.
MixtureVelocityModel train_velocity(const MarginalSequence& seq, const std::vector<int>& which, const BendModel* bend,
                                    const VelocityTrainConfig& cfg, Rng& rng, VelocityTrainReport* report = nullptr,
                                    const std::function<void(const VelocityEpochLog&)>& on_epoch = {});

// Global model time for local fraction alpha on the segment [t_a, t_b].
inline double global_time(double t_a, double t_b, double alpha) { return t_a + alpha * (t_b - t_a); }

// Training points and model-time velocity targets for endpoint columns x0/x1
// at local fractions alpha; targets are d/d(alpha) of the path times `rate` per column.
// A null bend gives straight paths.
struct PathSamples {
    Matrix points;
    Matrix targets;
};
PathSamples conditional_path(const BendModel* bend, const Matrix& x0, const Matrix& x1, const Vector& alpha,
                             const Vector& rate);

Checkpoint velocity_checkpoint(const MixtureVelocityModel& m);
MixtureVelocityModel velocity_from_checkpoint(const Checkpoint& c);

nlohmann::json to_json(const VelocityEpochLog& e);

}  // namespace flux
