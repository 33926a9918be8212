#include "flux/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flux {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ParameterError("unknown activation '" + s + "'");
}

void Mlp::layout() {
    if (dims_.size() < 2) throw ShapeError("Mlp needs at least input and output dims");
    Eigen::Index off = 0;
    w_off_.clear();
    b_off_.clear();
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        if (dims_[l] <= 0 || dims_[l + 1] <= 0) throw ShapeError("Mlp layer dims must be positive");
        w_off_.push_back(off);
        off += static_cast<Eigen::Index>(dims_[l + 1]) * dims_[l];
        b_off_.push_back(off);
        off += dims_[l + 1];
    }
    params_ = Vector::Zero(off);
}

Mlp::Mlp(std::vector<int> layer_dims, Activation hidden, Rng& rng)
    : dims_(std::move(layer_dims)), act_(hidden) {
    layout();
    // Uniform fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    for (int l = 0; l < num_layers(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        auto w = weight(l);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
        auto b = bias(l);
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = dist(rng);
    }
}

Mlp Mlp::zeros(std::vector<int> layer_dims, Activation hidden) {
    Mlp m;
    m.dims_ = std::move(layer_dims);
    m.act_ = hidden;
    m.layout();
    return m;
}

Eigen::Map<const Matrix> Mlp::weight(int l) const {
    return {params_.data() + w_off_[l], dims_[l + 1], dims_[l]};
}
Eigen::Map<Matrix> Mlp::weight(int l) { return {params_.data() + w_off_[l], dims_[l + 1], dims_[l]}; }
Eigen::Map<const Vector> Mlp::bias(int l) const { return {params_.data() + b_off_[l], dims_[l + 1]}; }
Eigen::Map<Vector> Mlp::bias(int l) { return {params_.data() + b_off_[l], dims_[l + 1]}; }

namespace {

void apply_activation(Activation act, Matrix& m) {
    if (act == Activation::relu)
        m = m.cwiseMax(0.0);
    else
        m = m.array().tanh().matrix();
}

}  // namespace

Vector Mlp::forward(const Vector& x) const {
    if (x.size() != input_dim())
        throw ShapeError("mlp_forward: expected input of length " + std::to_string(input_dim()) +
                         ", got " + std::to_string(x.size()));
    Matrix out = forward(Matrix(x));
    return out.col(0);
}

Matrix Mlp::forward(const Matrix& x) const {
    if (x.rows() != input_dim())
        throw ShapeError("mlp_forward: expected " + std::to_string(input_dim()) + " input rows, got " +
                         std::to_string(x.rows()));
    Matrix h = x;
    for (int l = 0; l < num_layers(); ++l) {
        Matrix z = weight(l) * h;
        z.colwise() += bias(l);
        if (l + 1 < num_layers()) apply_activation(act_, z);
        h = std::move(z);
    }
    return h;
}

Matrix Mlp::forward(const Matrix& x, Cache& cache) const {
    if (x.rows() != input_dim())
        throw ShapeError("mlp_forward: expected " + std::to_string(input_dim()) + " input rows, got " +
                         std::to_string(x.rows()));
    cache.pre.resize(num_layers());
    cache.post.resize(num_layers() + 1);
    cache.post[0] = x;
    for (int l = 0; l < num_layers(); ++l) {
        Matrix z = weight(l) * cache.post[l];
        z.colwise() += bias(l);
        cache.pre[l] = z;
        if (l + 1 < num_layers()) apply_activation(act_, z);
        cache.post[l + 1] = std::move(z);
    }
    return cache.post.back();
}

Matrix Mlp::backward(const Cache& cache, const Matrix& upstream, Vector& grad) const {
    if (upstream.rows() != output_dim() || upstream.cols() != cache.post[0].cols())
        throw ShapeError("mlp backward: upstream shape mismatch");
    if (grad.size() != num_params()) grad = Vector::Zero(num_params());
    Matrix delta = upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
        if (l + 1 < num_layers()) {
            if (act_ == Activation::relu)
                delta = (cache.pre[l].array() > 0.0).select(delta, 0.0);
            else
                delta = (delta.array() * (1.0 - cache.post[l + 1].array().square())).matrix();
        }
        Eigen::Map<Matrix> gw(grad.data() + w_off_[l], dims_[l + 1], dims_[l]);
        Eigen::Map<Vector> gb(grad.data() + b_off_[l], dims_[l + 1]);
        gw.noalias() += delta * cache.post[l].transpose();
        gb.noalias() += delta.rowwise().sum();
        delta = weight(l).transpose() * delta;
    }
    return delta;
}

Mlp::Gradients Mlp::gradients(const Vector& x, const Vector& upstream) const {
    if (!x.allFinite() || !upstream.allFinite())
        throw NumericError("mlp_gradients: non-finite input");
    if (upstream.size() != output_dim())
        throw ShapeError("mlp_gradients: upstream length must equal output dim");
    Cache cache;
    forward(Matrix(x), cache);
    Gradients g;
    g.params = Vector::Zero(num_params());
    Matrix dx = backward(cache, Matrix(upstream), g.params);
    g.input = dx.col(0);
    return g;
}

AdamW::AdamW(Eigen::Index n, AdamWConfig cfg) : cfg_(cfg), m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

void AdamW::step(Vector& params, const Vector& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw ShapeError("adamw_step: parameter/gradient shape mismatch");
    ++step_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grads;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    params *= (1.0 - cfg_.lr * cfg_.weight_decay);
    params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

double PlateauScheduler::update(double loss, double lr) {
    if (loss < best_ * (1.0 - 1e-4)) {
        best_ = loss;
        bad_epochs_ = 0;
        return lr;
    }
    if (++bad_epochs_ > patience_) {
        bad_epochs_ = 0;
        return std::max(min_lr_, lr * factor_);
    }
    return lr;
}

std::vector<double> TimeEmbedding::frequencies() const {
    const int half = dim / 2;
    std::vector<double> f(half);
    for (int i = 0; i < half; ++i) {
        const double r = half == 1 ? 0.0 : static_cast<double>(i) / (half - 1);
        f[i] = min_freq * std::pow(max_freq / min_freq, r);
    }
    return f;
}

Vector TimeEmbedding::embed(double t) const {
    if (dim <= 0 || dim % 2 != 0) throw ParameterError("time embedding dim must be even and positive");
    const auto f = frequencies();
    Vector out(dim);
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double phase = 2.0 * std::numbers::pi * f[i] * t;
        out(2 * i) = std::sin(phase);
        out(2 * i + 1) = std::cos(phase);
    }
    return out;
}

Vector sinusoidal_time_embedding(const TimeEmbedding& e, double t) { return e.embed(t); }

double GumbelSchedule::temperature(int epoch) const {
    return std::max(tau_min, tau_init * std::pow(tau_decay, static_cast<double>(epoch)));
}

double log_sum_exp(const Vector& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

Vector softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector e = (logits.array() - m).exp();
    return e / e.sum();
}

Vector softmax_backward(const Vector& y, const Vector& dy, double tau) {
    const double dot = y.dot(dy);
    return (y.array() * (dy.array() - dot)).matrix() / tau;
}

double gumbel_noise(Rng& rng) {
    const double u = std::clamp(uniform01(rng), 1e-12, 1.0 - 1e-12);
    return -std::log(-std::log(u));
}

Vector one_hot(int k, int index) {
    Vector v = Vector::Zero(k);
    v(index) = 1.0;
    return v;
}

GumbelSample gumbel_softmax_with_noise(const Vector& logits, const Vector& noise, double tau,
                                       bool hard) {
    if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: tau must be positive");
    if (noise.size() != logits.size()) throw ShapeError("gumbel_softmax: noise length mismatch");
    GumbelSample s;
    s.noise = noise;
    s.soft = softmax((logits + noise) / tau);
    if (hard) {
        Eigen::Index arg;
        s.soft.maxCoeff(&arg);
        s.weights = one_hot(static_cast<int>(logits.size()), static_cast<int>(arg));
    } else {
        s.weights = s.soft;
    }
    return s;
}

GumbelSample gumbel_softmax(const Vector& logits, double tau, bool hard, Rng& rng) {
    if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: tau must be positive");
    Vector noise(logits.size());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = gumbel_noise(rng);
    return gumbel_softmax_with_noise(logits, noise, tau, hard);
}

double categorical_entropy(const Vector& w) {
    return -(w.array() * (w.array() + kLogEps).log()).sum();
}

}  // namespace flux
