#pragma once

// Minimal differentiable MLP substrate: batched forward/backward, AdamW,
// sinusoidal time features and the Gumbel-Softmax estimator.

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "flux/common.hpp"

namespace flux {

enum class Activation { relu, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Fully connected network. Parameters live in one flat vector so that
// optimizers and checkpoints see a single contiguous buffer. Layer l stores
// W_l (out x in, column-major) followed by b_l. The activation applies to
// hidden layers only.
//
// Batched calls take inputs as columns: X is (input_dim x batch).
class Mlp {
public:
    struct Cache {
        std::vector<Matrix> pre;   // pre-activation per layer
        std::vector<Matrix> post;  // post[0] = input, post[l+1] = layer l output
    };

    Mlp() = default;
    Mlp(std::vector<int> layer_dims, Activation hidden, Rng& rng);

    // All parameters zero.
    static Mlp zeros(std::vector<int> layer_dims, Activation hidden);

    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    int num_layers() const { return static_cast<int>(dims_.size()) - 1; }
    const std::vector<int>& layer_dims() const { return dims_; }
    Activation activation() const { return act_; }
    Eigen::Index num_params() const { return params_.size(); }

    Vector& params() { return params_; }
    const Vector& params() const { return params_; }

    Eigen::Map<const Matrix> weight(int layer) const;
    Eigen::Map<Matrix> weight(int layer);
    Eigen::Map<const Vector> bias(int layer) const;
    Eigen::Map<Vector> bias(int layer);

    Vector forward(const Vector& x) const;
    Matrix forward(const Matrix& x) const;
    Matrix forward(const Matrix& x, Cache& cache) const;

    // Backpropagates `upstream` (output_dim x batch). Adds d(sum upstream.out)/dparams
    // into `grad` (size num_params) and returns the input gradient.
    Matrix backward(const Cache& cache, const Matrix& upstream, Vector& grad) const;

    // Single-sample gradient of upstream^T output.
    struct Gradients {
        Vector params;
        Vector input;
    };
    Gradients gradients(const Vector& x, const Vector& upstream) const;

private:
    void layout();

    std::vector<int> dims_;
    Activation act_ = Activation::relu;
    Vector params_;
    std::vector<Eigen::Index> w_off_, b_off_;
};

// AdamW with decoupled weight decay.
struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    AdamW() = default;
    AdamW(Eigen::Index n, AdamWConfig cfg);

    void step(Vector& params, const Vector& grads);

    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return step_; }
    const Vector& first_moment() const { return m_; }
    const Vector& second_moment() const { return v_; }

private:
    AdamWConfig cfg_;
    long step_ = 0;
    Vector m_, v_;
};

// Halves the learning rate after `patience` epochs without improvement.
class PlateauScheduler {
public:
    explicit PlateauScheduler(double factor = 0.5, int patience = 10, double min_lr = 1e-8)
        : factor_(factor), patience_(patience), min_lr_(min_lr) {}

    // Returns the (possibly reduced) learning rate.
    double update(double loss, double lr);

private:
    double factor_;
    int patience_;
    double min_lr_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

// Interleaved sin/cos features: [sin(2pi f0 t), cos(2pi f0 t), sin(2pi f1 t), ...]
// with f_i geometric between min_freq and max_freq.
struct TimeEmbedding {
    int dim = 16;
    double min_freq = 0.25;
    double max_freq = 8.0;

    std::vector<double> frequencies() const;
    Vector embed(double t) const;
};

Vector sinusoidal_time_embedding(const TimeEmbedding& e, double t);

struct GumbelSchedule {
    double tau_init = 1.0;
    double tau_min = 0.2;
    double tau_decay = 0.9995;
    int soft_epochs = 50;

    double temperature(int epoch) const;
    bool hard_enabled(int epoch) const { return epoch >= soft_epochs; }
};

Vector softmax(const Vector& logits);
double log_sum_exp(const Vector& v);

// Backward of y = softmax(z / tau): returns dL/dz given y and dL/dy.
Vector softmax_backward(const Vector& y, const Vector& dy, double tau = 1.0);

struct GumbelSample {
    Vector soft;     // softmax((logits + noise) / tau)
    Vector weights;  // forward value: soft, or one-hot in hard mode
    Vector noise;
};

// Noise eta = -log(-log u), u ~ U(0,1) clamped to [1e-12, 1 - 1e-12].
double gumbel_noise(Rng& rng);

GumbelSample gumbel_softmax(const Vector& logits, double tau, bool hard, Rng& rng);
GumbelSample gumbel_softmax_with_noise(const Vector& logits, const Vector& noise, double tau,
                                       bool hard);

inline constexpr double kLogEps = 1e-12;

double categorical_entropy(const Vector& w);

Vector one_hot(int k, int index);

}  // namespace flux
