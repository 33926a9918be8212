#include "flux/transport.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>

namespace flux {

void MarginalSequence::validate() const {
    const int T = size();
    if (T < 2) throw DataError("marginal sequence needs at least 2 marginals");
    if (static_cast<int>(times.size()) != T) throw DataError("marginal sequence: times/marginals size mismatch");
    const auto d = marginals.front().cols();
    for (int k = 0; k < T; ++k) {
        if (marginals[k].rows() == 0) throw DataError("marginal " + std::to_string(k) + " is empty");
        if (marginals[k].cols() != d) throw DataError("marginal " + std::to_string(k) + " has inconsistent dim");
        if (k > 0 && !(times[k] > times[k - 1])) throw DataError("marginal times must be strictly increasing");
    }
    auto check = [&](const std::vector<std::vector<int>>& ann, const char* what) {
        if (ann.empty()) return;
        if (static_cast<int>(ann.size()) != T) throw DataError(std::string("marginal sequence: ") + what + " count mismatch");
        for (int k = 0; k < T; ++k)
            if (static_cast<Eigen::Index>(ann[k].size()) != marginals[k].rows())
                throw DataError(std::string("marginal sequence: ") + what + " size mismatch in marginal " + std::to_string(k));
    };
    check(segments, "segment");
    check(labels, "label");
}

Matrix MarginalSequence::pooled() const {
    std::vector<int> all(size());
    std::iota(all.begin(), all.end(), 0);
    return pooled(all);
}

Matrix MarginalSequence::pooled(const std::vector<int>& which) const {
    Eigen::Index rows = 0;
    for (int k : which) {
        if (marginals.at(k).rows() == 0) throw DataError("pooled: marginal " + std::to_string(k) + " is empty");
        rows += marginals[k].rows();
    }
    Matrix out(rows, dim());
    Eigen::Index r = 0;
    for (int k : which) {
        out.middleRows(r, marginals[k].rows()) = marginals[k];
        r += marginals[k].rows();
    }
    return out;
}

std::vector<double> uniform_times(int T) {
    std::vector<double> t(T);
    for (int k = 0; k < T; ++k) t[k] = T == 1 ? 0.0 : static_cast<double>(k) / (T - 1);
    return t;
}

std::string to_string(CouplingKind k) {
    switch (k) {
        case CouplingKind::random_perm: return "random_perm";
        case CouplingKind::index_aligned: return "index_aligned";
        case CouplingKind::sinkhorn_ot: return "sinkhorn_ot";
    }
    return "?";
}

CouplingKind coupling_from_string(const std::string& s) {
    if (s == "random_perm") return CouplingKind::random_perm;
    if (s == "index_aligned") return CouplingKind::index_aligned;
    if (s == "sinkhorn_ot") return CouplingKind::sinkhorn_ot;
    throw ParameterError("unknown coupling kind '" + s + "'");
}

Matrix squared_euclidean_cost(const Matrix& a, const Matrix& b) {
    Matrix c = -2.0 * a * b.transpose();
    c.colwise() += a.rowwise().squaredNorm();
    c.rowwise() += b.rowwise().squaredNorm().transpose();
    return c.cwiseMax(0.0);
}

double median_of(const Matrix& m) {
    std::vector<double> v(m.data(), m.data() + m.size());
    if (v.empty()) return 0.0;
    auto mid = v.begin() + static_cast<long>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

SinkhornResult sinkhorn_plan(const Matrix& cost, double epsilon, int max_iter, double tol) {
    if (!cost.allFinite()) throw ParameterError("sinkhorn_plan: cost must be finite");
    if (!(epsilon > 0.0)) throw ParameterError("sinkhorn_plan: epsilon must be positive");
    const auto n = cost.rows();
    const auto m = cost.cols();
    const double log_a = -std::log(static_cast<double>(n));
    const double log_b = -std::log(static_cast<double>(m));
    Vector f = Vector::Zero(n), g = Vector::Zero(m);

    auto row_lse = [&](Eigen::Index i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < m; ++j) mx = std::max(mx, (g(j) - cost(i, j)) / epsilon);
        double s = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) s += std::exp((g(j) - cost(i, j)) / epsilon - mx);
        return mx + std::log(s);
    };
    auto col_lse = [&](Eigen::Index j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, (f(i) - cost(i, j)) / epsilon);
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) s += std::exp((f(i) - cost(i, j)) / epsilon - mx);
        return mx + std::log(s);
    };

    SinkhornResult res;
    auto warn = [&] {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true))
            std::cerr << "warning: sinkhorn did not converge within " << max_iter
                      << " iterations (marginal error " << res.marginal_error << "); using last iterate\n";
    };
    // Scaling iterations on a kernel that absorbs the potentials whenever the
    // scalings drift far from 1. Falls back to log-domain updates if a kernel
    // row or column underflows entirely.
    {
        const double a = std::exp(log_a), b = std::exp(log_b);
        auto kernel = [&] {
            Matrix k(n, m);
            for (Eigen::Index j = 0; j < m; ++j)
                for (Eigen::Index i = 0; i < n; ++i) k(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / epsilon);
            return k;
        };
        Matrix K = kernel();
        Vector u = Vector::Ones(n), v = Vector::Ones(m);
        bool ok = true;
        for (int it = 1; it <= max_iter && ok; ++it) {
            const Vector kv = K * v;
            if (!(kv.minCoeff() > 0.0)) { ok = false; break; }
            u = (a / kv.array()).matrix();
            const Vector ktu = K.transpose() * u;
            if (!(ktu.minCoeff() > 0.0)) { ok = false; break; }
            v = (b / ktu.array()).matrix();
            res.iterations = it;
            const double drift = std::max(u.array().log().abs().maxCoeff(), v.array().log().abs().maxCoeff());
            if (drift > kSinkhornAbsorb) {
                f += epsilon * u.array().log().matrix();
                g += epsilon * v.array().log().matrix();
                K = kernel();
                u.setOnes();
                v.setOnes();
            }
            if (it % 10 != 0 && it != max_iter) continue;
            res.marginal_error = ((u.array() * (K * v).array()) - a).abs().maxCoeff();
            if (res.marginal_error < tol) {
                res.converged = true;
                break;
            }
        }
        if (ok) {
            res.plan = u.asDiagonal() * K * v.asDiagonal();
            if (!res.converged) warn();
            return res;
        }
        f.setZero();
        g.setZero();
        res = SinkhornResult{};
    }
    auto build_plan = [&] {
        Matrix p(n, m);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < m; ++j) p(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / epsilon);
        return p;
    };
    for (int it = 1; it <= max_iter; ++it) {
        for (Eigen::Index i = 0; i < n; ++i) f(i) = epsilon * (log_a - row_lse(i));
        for (Eigen::Index j = 0; j < m; ++j) g(j) = epsilon * (log_b - col_lse(j));
        res.iterations = it;
        if (it % 10 != 0 && it != max_iter) continue;
        // columns are exact after the g update; check the rows
        double err = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) err = std::max(err, std::abs(std::exp(f(i) / epsilon + row_lse(i)) - std::exp(log_a)));
        res.marginal_error = err;
        if (err < tol) {
            res.converged = true;
            break;
        }
    }
    res.plan = build_plan();
    if (!res.converged) warn();
    return res;
}

namespace {

std::vector<int> shuffled_cycle(int size, int n, Rng& rng) {
    std::vector<int> out;
    out.reserve(n);
    std::vector<int> perm(size);
    while (static_cast<int>(out.size()) < n) {
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int v : perm) {
            if (static_cast<int>(out.size()) == n) break;
            out.push_back(v);
        }
    }
    return out;
}

}  // namespace

std::vector<IndexPair> couple(const Coupling& cfg, const Matrix& a, const Matrix& b, int n_pairs, Rng& rng) {
    if (a.rows() == 0 || b.rows() == 0) throw DataError("couple: empty sample set");
    const int na = static_cast<int>(a.rows());
    const int nb = static_cast<int>(b.rows());
    std::vector<IndexPair> pairs;
    pairs.reserve(n_pairs);
    switch (cfg.kind) {
        case CouplingKind::index_aligned:
            for (int i = 0; i < n_pairs; ++i) pairs.emplace_back(i % na, i % nb);
            break;
        case CouplingKind::random_perm: {
            const auto ia = shuffled_cycle(na, n_pairs, rng);
            const auto ib = shuffled_cycle(nb, n_pairs, rng);
            for (int i = 0; i < n_pairs; ++i) pairs.emplace_back(ia[i], ib[i]);
            break;
        }
        case CouplingKind::sinkhorn_ot: {
            constexpr int kChunk = 256;
            while (static_cast<int>(pairs.size()) < n_pairs) {
                const int want = std::min(kChunk, n_pairs - static_cast<int>(pairs.size()));
                const auto ia = shuffled_cycle(na, std::min(want, na), rng);
                const auto ib = shuffled_cycle(nb, std::min(want, nb), rng);
                Matrix sa(ia.size(), a.cols()), sb(ib.size(), b.cols());
                for (std::size_t i = 0; i < ia.size(); ++i) sa.row(i) = a.row(ia[i]);
                for (std::size_t j = 0; j < ib.size(); ++j) sb.row(j) = b.row(ib[j]);
                const Matrix cost = squared_euclidean_cost(sa, sb);
                double eps = cfg.epsilon;
                if (eps <= 0.0) {
                    eps = cfg.epsilon_scale * median_of(cost);
                    if (!(eps > 0.0)) eps = 1e-12;
                }
                const auto sk = sinkhorn_plan(cost, eps, cfg.max_sinkhorn_iter, 1e-9);
                for (int r = 0; r < want; ++r) {
                    const int row = r % static_cast<int>(ia.size());
                    const double total = sk.plan.row(row).sum();
                    double u = uniform01(rng) * total;
                    int col = static_cast<int>(ib.size()) - 1;
                    for (int j = 0; j < static_cast<int>(ib.size()); ++j) {
                        u -= sk.plan(row, j);
                        if (u < 0.0) {
                            col = j;
                            break;
                        }
                    }
                    pairs.emplace_back(ia[row], ib[col]);
                }
            }
            break;
        }
    }
    return pairs;
}

std::vector<double> time_grid(double t_start, double t_end, int n_steps) {
    if (n_steps < 1) throw ParameterError("euler_integrate: n_steps must be >= 1");
    if (!(t_start < t_end)) throw ParameterError("euler_integrate: t_start must be < t_end");
    std::vector<double> grid(n_steps + 1);
    for (int i = 0; i <= n_steps; ++i) grid[i] = t_start + (t_end - t_start) * (static_cast<double>(i) / n_steps);
    grid.back() = t_end;
    return grid;
}

Matrix finite_rows(const Matrix& m) {
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        if (m.row(i).allFinite()) keep.push_back(i);
    Matrix out(static_cast<Eigen::Index>(keep.size()), m.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) out.row(i) = m.row(keep[i]);
    return out;
}

namespace {

// One explicit Euler step over alive rows.
void euler_step(const VelocityField& field, double t, double dt, Matrix& x, const Matrix& source,
                std::vector<bool>& diverged, int& n_diverged) {
    if (n_diverged == 0) {
        const Matrix v = field.velocity(t, x, source);
        x += dt * v;
    } else {
        std::vector<Eigen::Index> alive;
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            if (!diverged[i]) alive.push_back(i);
        if (alive.empty()) return;
        Matrix xa(static_cast<Eigen::Index>(alive.size()), x.cols()), sa(xa.rows(), x.cols());
        for (std::size_t i = 0; i < alive.size(); ++i) {
            xa.row(i) = x.row(alive[i]);
            sa.row(i) = source.row(alive[i]);
        }
        const Matrix v = field.velocity(t, xa, sa);
        for (std::size_t i = 0; i < alive.size(); ++i) x.row(alive[i]) += dt * v.row(i);
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (!diverged[i] && !x.row(i).allFinite()) {
            diverged[i] = true;
            ++n_diverged;
        }
    }
}

}  // namespace

Trajectory euler_integrate_grid(const VelocityField& field, const Matrix& x0, const std::vector<double>& grid,
                                bool record) {
    if (grid.size() < 2) throw ParameterError("euler_integrate: grid needs at least two knots");
    Trajectory tr;
    tr.diverged.assign(x0.rows(), false);
    for (Eigen::Index i = 0; i < x0.rows(); ++i)
        if (!x0.row(i).allFinite()) {
            tr.diverged[i] = true;
            ++tr.n_diverged;
        }
    Matrix x = x0;
    const Matrix source = x0;
    if (record) tr.states.push_back(x);
    for (std::size_t s = 0; s + 1 < grid.size(); ++s) {
        euler_step(field, grid[s], grid[s + 1] - grid[s], x, source, tr.diverged, tr.n_diverged);
        if (record) tr.states.push_back(x);
    }
    tr.endpoint = std::move(x);
    return tr;
}

Trajectory euler_integrate(const VelocityField& field, const Matrix& x0, double t_start, double t_end,
                           int n_steps, bool record) {
    return euler_integrate_grid(field, x0, time_grid(t_start, t_end, n_steps), record);
}

Pushforward pushforward_chain(const VelocityField& field, const Matrix& x0, const std::vector<double>& times,
                              int n_steps_per_segment) {
    if (times.empty()) throw ParameterError("pushforward_chain: no times");
    Pushforward out;
    Matrix x = x0;
    std::vector<bool> diverged(x0.rows(), false);
    int n_div = 0;
    for (Eigen::Index i = 0; i < x0.rows(); ++i)
        if (!x0.row(i).allFinite()) {
            diverged[i] = true;
            ++n_div;
        }
    auto alive_rows = [&] {
        std::vector<Eigen::Index> keep;
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            if (!diverged[i]) keep.push_back(i);
        Matrix m(static_cast<Eigen::Index>(keep.size()), x.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) m.row(i) = x.row(keep[i]);
        return m;
    };
    out.sets.push_back(alive_rows());
    out.n_diverged.push_back(n_div);
    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
        const auto grid = time_grid(times[k], times[k + 1], n_steps_per_segment);
        const Matrix source = x;
        for (std::size_t s = 0; s + 1 < grid.size(); ++s)
            euler_step(field, grid[s], grid[s + 1] - grid[s], x, source, diverged, n_div);
        out.sets.push_back(alive_rows());
        out.n_diverged.push_back(n_div);
    }
    return out;
}

}  // namespace flux
