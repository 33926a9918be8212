#pragma once

// Shared helpers for the unit tests: seeded generators and a central
// finite-difference oracle.

#include <algorithm>
#include <cmath>
#include <functional>

#include "flux/common.hpp"
#include "flux/nn.hpp"

namespace flux::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * standard_normal(rng);
    return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
    return random_matrix(n, 1, rng, scale).col(0);
}

inline Vector random_simplex(int k, Rng& rng) {
    Vector w(k);
    for (int j = 0; j < k; ++j) w(j) = -std::log(std::max(uniform01(rng), 1e-300));
    return w / w.sum();
}

inline std::vector<int> random_labels(int n, int k, Rng& rng) {
    std::vector<int> out(n);
    for (auto& x : out) x = uniform_index(rng, k);
    return out;
}

// Central differences of a scalar function over every entry of `x`.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, Vector x, double h = 1e-6) {
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x(i);
        x(i) = orig + h;
        const double up = f(x);
        x(i) = orig - h;
        const double down = f(x);
        x(i) = orig;
        g(i) = (up - down) / (2.0 * h);
    }
    return g;
}

inline double rel_error(const Vector& a, const Vector& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-10});
    return (a - b).norm() / scale;
}

// Smallest |pre-activation| over hidden layers; ReLU finite differences are
// only meaningful away from the kink.
inline double kink_margin(const Mlp& net, const Matrix& x) {
    Mlp::Cache cache;
    net.forward(x, cache);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < cache.pre.size(); ++l) m = std::min(m, cache.pre[l].cwiseAbs().minCoeff());
    return m;
}

}  // namespace flux::test
