#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flux/common.hpp"

namespace flux {

// T ordered marginals. Samples are rows. Segment ids and regime labels are
// optional per-sample annotations (empty vectors when absent).
struct MarginalSequence {
    std::vector<Matrix> marginals;
    std::vector<double> times;
    std::vector<std::vector<int>> segments;
    std::vector<std::vector<int>> labels;

    int size() const { return static_cast<int>(marginals.size()); }
    int dim() const { return marginals.empty() ? 0 : static_cast<int>(marginals.front().cols()); }
    bool has_segments() const { return !segments.empty(); }
    bool has_labels() const { return !labels.empty(); }

    // Throws DataError when the invariants (T >= 2, common dim, increasing times,
    // annotation sizes) do not hold.
    void validate() const;

    // Rows of all marginals stacked in order.
    Matrix pooled() const;
    // Rows of the listed marginals; an empty one is a DataError.
    Matrix pooled(const std::vector<int>& which) const;
};

// times t_k = k / (T - 1)
std::vector<double> uniform_times(int T);

enum class CouplingKind { random_perm, index_aligned, sinkhorn_ot };

std::string to_string(CouplingKind k);
CouplingKind coupling_from_string(const std::string& s);

struct Coupling {
    CouplingKind kind = CouplingKind::random_perm;
    // Absolute entropic regularization; <= 0 selects epsilon_scale * median(cost).
    double epsilon = 0.0;
    double epsilon_scale = 0.05;
    int max_sinkhorn_iter = 2000;
};

using IndexPair = std::pair<int, int>;

// n_pairs endpoint index pairs (row of A, row of B).
std::vector<IndexPair> couple(const Coupling& cfg, const Matrix& a, const Matrix& b, int n_pairs, Rng& rng);

struct SinkhornResult {
    Matrix plan;
    int iterations = 0;
    bool converged = false;
    double marginal_error = 0.0;
};

// |log| of a scaling above which it is absorbed into the potentials.
inline constexpr double kSinkhornAbsorb = 50.0;

// Entropic OT with uniform marginals via stabilized scaling iterations
// (log-domain when the kernel underflows). Plan entries sum to 1.
SinkhornResult sinkhorn_plan(const Matrix& cost, double epsilon, int max_iter, double tol = 1e-12);

Matrix squared_euclidean_cost(const Matrix& a, const Matrix& b);
double median_of(const Matrix& m);

// A time-dependent velocity field. `source` holds, per sample, the state at the
// start of the current integration segment (used for source conditioning).
// All matrices have samples as rows.
class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual int dim() const = 0;
    virtual Matrix velocity(double t, const Matrix& x, const Matrix& source) const = 0;
};

// Adapts a callable.
class FunctionField final : public VelocityField {
public:
    using Fn = std::function<Matrix(double, const Matrix&, const Matrix&)>;
    FunctionField(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
    int dim() const override { return dim_; }
    Matrix velocity(double t, const Matrix& x, const Matrix& source) const override { return fn_(t, x, source); }

private:
    int dim_;
    Fn fn_;
};

struct Trajectory {
    std::vector<Matrix> states;  // states[i] at grid[i]; empty unless recorded
    Matrix endpoint;
    std::vector<bool> diverged;  // per sample
    int n_diverged = 0;
};

// Explicit Euler over an explicit time grid. Diverged rows (non-finite) are
// frozen at their first non-finite value and flagged.
Trajectory euler_integrate_grid(const VelocityField& field, const Matrix& x0, const std::vector<double>& grid,
                                bool record = false);

// Grid t_start + (t_end - t_start) * i / n_steps.
std::vector<double> time_grid(double t_start, double t_end, int n_steps);

Trajectory euler_integrate(const VelocityField& field, const Matrix& x0, double t_start, double t_end,
                           int n_steps, bool record = false);

struct Pushforward {
    std::vector<Matrix> sets;       // finite samples at each requested time
    std::vector<int> n_diverged;    // cumulative diverged count at each time
};

// Integrates x0 sequentially through `times`, resetting the source state at
// every recorded time. sets[0] is x0 itself.
Pushforward pushforward_chain(const VelocityField& field, const Matrix& x0, const std::vector<double>& times,
                              int n_steps_per_segment);

Matrix finite_rows(const Matrix& m);

}  // namespace flux
