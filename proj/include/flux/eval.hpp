#pragma once

// Transport distances, regime-discovery metrics and non-learned baselines.

#include <memory>
#include <optional>
#include <vector>

#include "json.hpp"
#include "flux/common.hpp"
#include "flux/transport.hpp"

namespace flux {

// Exact 1D W1 between empirical measures; unequal sizes use the quantile
// functions on the union of their breakpoints.
double w1_1d(std::vector<double> a, std::vector<double> b);

// n unit directions (rows), uniformly distributed on the sphere.
Matrix random_directions(int dim, int n, Rng& rng);
// Projections onto each direction (columns), each column sorted.
Matrix sorted_projections(const Matrix& a, const Matrix& directions);
// Per-column W1 of two sorted projection matrices.
Vector sorted_w1(const Matrix& pa, const Matrix& pb);
// Per-direction exact W1 of the projected sets.
Vector projected_w1(const Matrix& a, const Matrix& b, const Matrix& directions);
double sliced_w1(const Matrix& a, const Matrix& b, int n_projections, Rng& rng);
// Mean over coordinates of the 1D W1 of each column.
double coordinate_w1(const Matrix& a, const Matrix& b);

// Maps a sample set observed at marginal `from` to marginal time `to`.
class TransportModel {
public:
    virtual ~TransportModel() = default;
    virtual Matrix transport(const Matrix& x, int from, int to) const = 0;
    // True when one continuous-time field covers the whole chain.
    virtual bool shared_ode() const = 0;
    virtual int diverged() const { return 0; }
};

// Euler pushforward through the marginal times with the source reset at every
// marginal. One field for all segments, or one field per segment.
class FieldTransport final : public TransportModel {
public:
    FieldTransport(const VelocityField& field, std::vector<double> times, int n_steps);
    FieldTransport(std::vector<const VelocityField*> per_segment, std::vector<double> times, int n_steps);
    Matrix transport(const Matrix& x, int from, int to) const override;
    // Generated sets at every marginal time from `from` onward (finite rows only).
    Pushforward chain(const Matrix& x, int from) const;
    bool shared_ode() const override { return fields_.size() == 1; }
    int diverged() const override { return diverged_; }

private:
    std::vector<const VelocityField*> fields_;
    std::vector<double> times_;
    int n_steps_;
    mutable int diverged_ = 0;
};

struct WdValue {
    double mean = 0.0;
    double std = 0.0;
};

struct WdSuite {
    WdValue wd1;
    std::optional<WdValue> wd2;
    std::optional<WdValue> wd_fc;
    std::vector<double> one_hop;  // per adjacent pair, first projection seed
};

// WD1 over adjacent pairs, WD2 over (i, i + 2), WD_fc from marginal 0 to the
// last (shared-ODE models only). Repeated over n_seeds projection seeds.
WdSuite wd_suite(const TransportModel& model, const MarginalSequence& seq, int n_projections, std::uint64_t seed,
                 int n_seeds = 5);

// ---- regime metrics ----

struct SegmentLabels {
    std::vector<int> segments;  // ordered ids
    std::vector<int> labels;    // majority label per segment
};

// Per-segment mode; ties go to the smaller label.
SegmentLabels segment_majority(const std::vector<int>& assignments, const std::vector<int>& segment_ids);

double ari(const std::vector<int>& truth, const std::vector<int>& pred);
double nmi(const std::vector<int>& truth, const std::vector<int>& pred);
double switch_rate(const SegmentLabels& s);
// Mean categorical entropy of the rows of a (B x K) probability matrix.
double gating_entropy(const Matrix& probs);

// ---- clustering baselines ----

struct GmmResult {
    std::vector<int> labels;
    Vector weights;
    Matrix means;                  // k x d
    std::vector<Matrix> covariances;
    std::vector<double> log_likelihood;  // per iteration (mean per sample)
    int resets = 0;
};

GmmResult gmm_em(const Matrix& samples, int k, int max_iter, Rng& rng);
std::vector<int> kmeans_labels(const Matrix& samples, int k, int max_iter, Rng& rng);

// ---- transport baselines ----

struct GaussianFit {
    Vector mean;
    Matrix cov;
};
GaussianFit fit_gaussian(const Matrix& samples);
Matrix sample_gaussian(const GaussianFit& g, int n, Rng& rng);
// One generated set per marginal, sized like the marginal.
std::vector<Matrix> gaussian_baseline(const MarginalSequence& seq, Rng& rng);

// (1 - alpha) a_i + alpha b_{pi(i)} with a random pairing pi.
Matrix linear_interp_baseline(const Matrix& a, const Matrix& b, double alpha, Rng& rng);

// Transport by sampling the fitted Gaussian of the target marginal.
class GaussianTransport final : public TransportModel {
public:
    GaussianTransport(const MarginalSequence& seq, std::uint64_t seed);
    Matrix transport(const Matrix& x, int from, int to) const override;
    bool shared_ode() const override { return false; }

private:
    std::vector<GaussianFit> fits_;
    std::uint64_t seed_;
};

// Random pairing with the target marginal, interpolated to alpha = 1.
class LinearTransport final : public TransportModel {
public:
    LinearTransport(const MarginalSequence& seq, std::uint64_t seed) : seq_(seq), seed_(seed) {}
    Matrix transport(const Matrix& x, int from, int to) const override;
    bool shared_ode() const override { return false; }

private:
    const MarginalSequence& seq_;
    std::uint64_t seed_;
};

// Entropic OT between adjacent marginals; transport is the barycentric
// projection, composed through intermediate marginals. Inputs must be the
// `from` marginal itself.
class StaticOtTransport final : public TransportModel {
public:
    StaticOtTransport(const MarginalSequence& seq, std::uint64_t seed, double epsilon_scale = 0.05, int max_iter = 2000);
    // Each source sample draws a target index from its plan row, hop by hop.
    Matrix transport(const Matrix& x, int from, int to) const override;
    bool shared_ode() const override { return false; }

private:
    const MarginalSequence& seq_;
    std::uint64_t seed_;
    std::vector<Matrix> row_cdfs_;  // cumulative row-normalized plan k -> k+1
};

// ---- report ----

struct EvalReport {
    std::optional<double> wd1, wd1_std, wd2, wd2_std, wd_fc, wd_fc_std;
    std::vector<double> one_hop;
    std::optional<double> seg_ari, seg_nmi, gating_entropy, switch_rate, majority_expert_fraction;
    std::vector<int> segment_labels_true, segment_labels_pred;
    std::vector<double> per_marginal_wd;
    std::optional<double> held_out_wd, train_wd, all_wd, surface_dev;
    int n_diverged = 0;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

}  // namespace flux
