#include "flux/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <queue>
#include <sstream>

namespace flux {

// ---------------------------------------------------------------- Lorenz

Eigen::Vector3d lorenz_derivative(const Eigen::Vector3d& s, const LorenzParams& p) {
    return {p.sigma * (s.y() - s.x()), s.x() * (p.rho - s.z()) - s.y(), s.x() * s.y() - p.beta * s.z()};
}

Eigen::Vector3d lorenz_step(const Eigen::Vector3d& s, const LorenzParams& p, double dt) {
    return s + dt * lorenz_derivative(s, p);
}

Matrix lorenz_rollout(const Eigen::Vector3d& x0, const LorenzParams& p, double dt, int burn_in, int steps) {
    Eigen::Vector3d s = x0;
    for (int i = 0; i < burn_in; ++i) s = lorenz_step(s, p, dt);
    Matrix out(steps, 3);
    for (int i = 0; i < steps; ++i) {
        out.row(i) = s.transpose();
        s = lorenz_step(s, p, dt);
    }
    return out;
}

MarginalSequence generate_lorenz(const LorenzConfig& cfg, Rng& rng) {
    if (cfg.samples_per_marginal < 1 || cfg.window < 1 || cfg.marginals_per_regime < 1)
        throw ParameterError("generate_lorenz: sizes must be positive");
    const int L = cfg.window;
    const int per = cfg.marginals_per_regime;
    const int n_traj = cfg.n_trajectories > 0 ? cfg.n_trajectories : cfg.samples_per_marginal;
    const int n = cfg.samples_per_marginal;
    const std::uint64_t master = rng();

    // Longest window end; rollouts are sized to cover it.
    const int last_start = std::max(0, cfg.start_offset + (per - 1) * (L + cfg.gap) + cfg.jitter);
    const int steps = last_start + L;

    MarginalSequence seq;
    seq.marginals.assign(2 * per, Matrix(n, 3 * L));
    seq.labels.assign(2 * per, std::vector<int>(n));
    seq.times = uniform_times(2 * per);
    for (int r = 0; r < 2; ++r) {
        const LorenzParams& p = cfg.regimes[r];
        std::vector<Matrix> rollouts(n_traj);
        for (int i = 0; i < n_traj; ++i) {
            Rng tr(derive_seed(master, static_cast<std::uint64_t>(r) * 1000003ull + i));
            // Some far-out regime-1 starts blow up under explicit Euler; redraw
            // them from the same stream.
            for (int attempt = 0;; ++attempt) {
                if (attempt == 100) throw NumericError("generate_lorenz: rollout diverged");
                Eigen::Vector3d x0;
                if (r == 0) {
                    for (int c = 0; c < 3; ++c) x0(c) = cfg.init0_std * standard_normal(tr);
                } else {
                    for (int c = 0; c < 3; ++c) {
                        const double sign = uniform01(tr) < 0.5 ? -1.0 : 1.0;
                        x0(c) = sign * cfg.init1_base(c) + cfg.init1_std * standard_normal(tr);
                    }
                }
                rollouts[i] = lorenz_rollout(x0, p, cfg.dt, r == 0 ? cfg.burn_in_regime0 : 0, steps);
                if (rollouts[i].allFinite() && rollouts[i].cwiseAbs().maxCoeff() < 1e4) break;
            }
        }
        Rng jr(derive_seed(master, 7919ull + r));
        for (int j = 0; j < n; ++j) {
            const int xi = std::uniform_int_distribution<int>(-cfg.jitter, cfg.jitter)(jr);
            const Matrix& roll = rollouts[j % n_traj];
            for (int l = 0; l < per; ++l) {
                const int a = std::max(0, cfg.start_offset + l * (L + cfg.gap) + xi);
                const int k = r * per + l;
                for (int c = 0; c < 3; ++c)
                    for (int s = 0; s < L; ++s) seq.marginals[k](j, c * L + s) = roll(a + s, c);
                seq.labels[k][j] = r;
            }
        }
    }
    for (const auto& m : seq.marginals)
        if (!m.allFinite()) throw NumericError("generate_lorenz: rollout diverged");
    return seq;
}

// ---------------------------------------------------------------- meshes

Mesh parse_obj(const std::string& text) {
    Mesh mesh;
    std::vector<Eigen::Vector3d> verts;
    std::vector<std::vector<long>> polys;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Eigen::Vector3d v;
            if (!(ls >> v.x() >> v.y() >> v.z())) throw ParseError("obj line " + std::to_string(lineno) + ": bad vertex");
            verts.push_back(v);
        } else if (tag == "f") {
            std::vector<long> idx;
            std::string tok;
            while (ls >> tok) {
                const auto slash = tok.find('/');
                const std::string head = tok.substr(0, slash);
                long v = 0;
                const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), v);
                if (ec != std::errc() || ptr != head.data() + head.size() || v == 0)
                    throw ParseError("obj line " + std::to_string(lineno) + ": bad face index '" + tok + "'");
                idx.push_back(v);
            }
            if (idx.size() < 3) throw ParseError("obj line " + std::to_string(lineno) + ": face needs 3 vertices");
            polys.push_back(std::move(idx));
        }
    }
    const long nv = static_cast<long>(verts.size());
    mesh.vertices.resize(nv, 3);
    for (long i = 0; i < nv; ++i) mesh.vertices.row(i) = verts[i].transpose();
    for (const auto& poly : polys) {
        std::vector<int> idx;
        for (long v : poly) {
            const long r = v > 0 ? v - 1 : nv + v;
            if (r < 0 || r >= nv) throw ParseError("obj: vertex index " + std::to_string(v) + " out of range");
            idx.push_back(static_cast<int>(r));
        }
        for (std::size_t i = 1; i + 1 < idx.size(); ++i) mesh.faces.push_back({idx[0], idx[i], idx[i + 1]});
    }
    return mesh;
}

Mesh load_obj(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open mesh file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_obj(ss.str());
}

void write_obj(const std::filesystem::path& path, const Mesh& mesh) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    char buf[128];
    for (int i = 0; i < mesh.num_vertices(); ++i) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", mesh.vertices(i, 0), mesh.vertices(i, 1),
                      mesh.vertices(i, 2));
        f << buf;
    }
    for (const auto& t : mesh.faces) f << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

Mesh make_ellipsoid(const Eigen::Vector3d& radii, int n_lat, int n_lon) {
    if (n_lat < 2 || n_lon < 3) throw ParameterError("make_ellipsoid: resolution too low");
    Mesh m;
    const double pi = std::numbers::pi;
    const int rings = n_lat - 1;
    m.vertices.resize(2 + rings * n_lon, 3);
    m.vertices.row(0) << 0.0, 0.0, radii.z();
    for (int i = 1; i <= rings; ++i) {
        const double th = pi * i / n_lat;
        for (int j = 0; j < n_lon; ++j) {
            const double ph = 2.0 * pi * j / n_lon;
            m.vertices.row(1 + (i - 1) * n_lon + j) << radii.x() * std::sin(th) * std::cos(ph),
                radii.y() * std::sin(th) * std::sin(ph), radii.z() * std::cos(th);
        }
    }
    const int south = 1 + rings * n_lon;
    m.vertices.row(south) << 0.0, 0.0, -radii.z();
    auto ring = [&](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
    for (int j = 0; j < n_lon; ++j) m.faces.push_back({0, ring(1, j), ring(1, j + 1)});
    for (int i = 1; i < rings; ++i)
        for (int j = 0; j < n_lon; ++j) {
            m.faces.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
            m.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
        }
    for (int j = 0; j < n_lon; ++j) m.faces.push_back({south, ring(rings, j + 1), ring(rings, j)});
    return m;
}

Mesh make_torus(double major, double minor, int n_major, int n_minor) {
    if (n_major < 3 || n_minor < 3) throw ParameterError("make_torus: resolution too low");
    Mesh m;
    const double pi = std::numbers::pi;
    m.vertices.resize(n_major * n_minor, 3);
    auto id = [&](int i, int j) { return (i % n_major) * n_minor + (j % n_minor); };
    for (int i = 0; i < n_major; ++i)
        for (int j = 0; j < n_minor; ++j) {
            const double u = 2.0 * pi * i / n_major, v = 2.0 * pi * j / n_minor;
            m.vertices.row(id(i, j)) << (major + minor * std::cos(v)) * std::cos(u),
                (major + minor * std::cos(v)) * std::sin(u), minor * std::sin(v);
        }
    for (int i = 0; i < n_major; ++i)
        for (int j = 0; j < n_minor; ++j) {
            m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
            m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
        }
    return m;
}

Vector face_areas(const Mesh& mesh) {
    Vector a(mesh.num_faces());
    for (int f = 0; f < mesh.num_faces(); ++f) {
        const Eigen::Vector3d p0 = mesh.vertices.row(mesh.faces[f][0]);
        const Eigen::Vector3d p1 = mesh.vertices.row(mesh.faces[f][1]);
        const Eigen::Vector3d p2 = mesh.vertices.row(mesh.faces[f][2]);
        a(f) = 0.5 * (p1 - p0).cross(p2 - p0).norm();
    }
    return a;
}

namespace {

std::vector<std::vector<std::pair<int, double>>> edge_graph(const Mesh& mesh) {
    std::vector<std::vector<std::pair<int, double>>> adj(mesh.num_vertices());
    auto add = [&](int a, int b) {
        for (const auto& e : adj[a])
            if (e.first == b) return;
        const double w = (mesh.vertices.row(a) - mesh.vertices.row(b)).norm();
        adj[a].emplace_back(b, w);
        adj[b].emplace_back(a, w);
    };
    for (const auto& t : mesh.faces) {
        add(t[0], t[1]);
        add(t[1], t[2]);
        add(t[2], t[0]);
    }
    return adj;
}

void dijkstra(const Mesh& mesh, int source, Vector& dist, std::vector<int>& prev) {
    if (source < 0 || source >= mesh.num_vertices()) throw ParameterError("geodesic: source vertex out of range");
    const auto adj = edge_graph(mesh);
    dist = Vector::Constant(mesh.num_vertices(), std::numeric_limits<double>::infinity());
    prev.assign(mesh.num_vertices(), -1);
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist(source) = 0.0;
    pq.emplace(0.0, source);
    while (!pq.empty()) {
        const auto [d, u] = pq.top();
        pq.pop();
        if (d > dist(u)) continue;
        for (const auto& [v, w] : adj[u])
            if (d + w < dist(v)) {
                dist(v) = d + w;
                prev[v] = u;
                pq.emplace(dist(v), v);
            }
    }
}

int argmax_finite(const Vector& v) {
    int best = -1;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (std::isfinite(v(i)) && (best < 0 || v(i) > v(best))) best = static_cast<int>(i);
    return best;
}

}  // namespace

Vector mesh_geodesic_distances(const Mesh& mesh, int source) {
    Vector dist;
    std::vector<int> prev;
    dijkstra(mesh, source, dist, prev);
    return dist;
}

std::vector<int> mesh_shortest_path(const Mesh& mesh, int source, int target) {
    Vector dist;
    std::vector<int> prev;
    dijkstra(mesh, source, dist, prev);
    if (!std::isfinite(dist(target))) throw DataError("mesh: target vertex unreachable");
    std::vector<int> path;
    for (int v = target; v != -1; v = prev[v]) path.push_back(v);
    std::reverse(path.begin(), path.end());
    return path;
}

Vector face_probabilities(const Mesh& mesh, const Vector& geo, double falloff) {
    const Vector area = face_areas(mesh);
    Vector p(mesh.num_faces());
    for (int f = 0; f < mesh.num_faces(); ++f) {
        const auto& t = mesh.faces[f];
        const Eigen::Vector3d c =
            (mesh.vertices.row(t[0]) + mesh.vertices.row(t[1]) + mesh.vertices.row(t[2])).transpose() / 3.0;
        int nearest = t[0];
        double best = std::numeric_limits<double>::infinity();
        for (int v : t) {
            const double dd = (mesh.vertices.row(v).transpose() - c).squaredNorm();
            if (dd < best) {
                best = dd;
                nearest = v;
            }
        }
        const double d = geo(nearest);
        const double w = std::isfinite(falloff) ? std::exp(-0.5 * (d / falloff) * (d / falloff)) : 1.0;
        p(f) = std::isfinite(d) ? area(f) * w : 0.0;
    }
    const double s = p.sum();
    if (!(s > 0.0)) throw DataError("mesh: face distribution has zero mass");
    return p / s;
}

Eigen::Vector3d sample_on_face(const Mesh& mesh, int face, Rng& rng) {
    double u = uniform01(rng), v = uniform01(rng);
    if (u + v > 1.0) {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    const auto& t = mesh.faces[face];
    const Eigen::Vector3d a = mesh.vertices.row(t[0]), b = mesh.vertices.row(t[1]), c = mesh.vertices.row(t[2]);
    return (1.0 - u - v) * a + u * b + v * c;
}

MeshMarginals sample_mesh_marginals(const Mesh& mesh, const MeshBenchConfig& cfg, Rng& rng) {
    if (mesh.num_faces() == 0) throw DataError("mesh has no faces");
    if (cfg.progress.size() < 2) throw ParameterError("mesh benchmark needs at least two waypoints");
    MeshMarginals out;
    // Geodesics from the centroid start at the vertex nearest to it.
    const Eigen::RowVector3d centroid = mesh.vertices.colwise().mean();
    Eigen::Index hub = 0;
    (mesh.vertices.rowwise() - centroid).rowwise().squaredNorm().minCoeff(&hub);
    out.start = argmax_finite(mesh_geodesic_distances(mesh, static_cast<int>(hub)));
    out.end = argmax_finite(mesh_geodesic_distances(mesh, out.start));
    const auto path = mesh_shortest_path(mesh, out.start, out.end);
    std::vector<double> cum{0.0};
    for (std::size_t i = 1; i < path.size(); ++i)
        cum.push_back(cum.back() + (mesh.vertices.row(path[i]) - mesh.vertices.row(path[i - 1])).norm());
    out.path_length = cum.back();
    out.falloff = cfg.falloff * out.path_length / cfg.reference_path_length;

    const int K = static_cast<int>(cfg.progress.size());
    out.seq.times = uniform_times(K);
    for (int k = 0; k < K; ++k) {
        const double target = cfg.progress[k] * out.path_length;
        std::size_t best = 0;
        for (std::size_t i = 1; i < path.size(); ++i)
            if (std::abs(cum[i] - target) < std::abs(cum[best] - target)) best = i;
        out.waypoints.push_back(path[best]);
        const Vector probs = face_probabilities(mesh, mesh_geodesic_distances(mesh, path[best]), out.falloff);
        std::discrete_distribution<int> pick(probs.data(), probs.data() + probs.size());
        Matrix pts(cfg.samples_per_marginal, 3);
        for (int i = 0; i < cfg.samples_per_marginal; ++i) pts.row(i) = sample_on_face(mesh, pick(rng), rng).transpose();
        out.seq.marginals.push_back(std::move(pts));
    }
    return out;
}

Matrix embedding_matrix(int D, std::uint64_t seed) {
    if (D < 3) throw ParameterError("orthonormal_embed: D must be >= 3");
    Rng rng(seed);
    Matrix g(D, 3);
    for (Eigen::Index j = 0; j < 3; ++j)
        for (Eigen::Index i = 0; i < D; ++i) g(i, j) = standard_normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ() * Matrix::Identity(D, 3);
    return q.transpose();
}

Embedding orthonormal_embed(const Matrix& points3, int D, std::uint64_t seed) {
    if (points3.cols() != 3) throw ShapeError("orthonormal_embed: points must be 3D");
    Embedding e;
    e.A = embedding_matrix(D, seed);
    e.points = points3 * e.A;
    return e;
}

Matrix project_back(const Matrix& points, const Matrix& A) {
    if (points.cols() != A.cols()) throw ShapeError("project_back: dimension mismatch");
    const Matrix pinv = A.completeOrthogonalDecomposition().pseudoInverse();
    return points * pinv;
}

double point_triangle_distance(const Eigen::Vector3d& p, const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                               const Eigen::Vector3d& c) {
    // Closest point by Voronoi-region classification.
    const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return ap.norm();
    const Eigen::Vector3d bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return bp.norm();
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return (p - (a + (d1 / (d1 - d3)) * ab)).norm();
    const Eigen::Vector3d cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return cp.norm();
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return (p - (a + (d2 / (d2 - d6)) * ac)).norm();
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
        return (p - (b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b))).norm();
    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return (p - (a + ab * v + ac * w)).norm();
}

double point_mesh_distance(const Eigen::Vector3d& p, const Mesh& mesh) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : mesh.faces)
        best = std::min(best, point_triangle_distance(p, mesh.vertices.row(t[0]), mesh.vertices.row(t[1]),
                                                      mesh.vertices.row(t[2])));
    return best;
}

double surface_deviation(const Matrix& points, const Mesh& mesh) {
    if (points.cols() != 3) throw ShapeError("surface_deviation: points must be 3D");
    if (points.rows() == 0) return 0.0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) total += point_mesh_distance(points.row(i).transpose(), mesh);
    return total / static_cast<double>(points.rows());
}

// ---------------------------------------------------------------- CSV

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_double(const std::string& s, int line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError("csv line " + std::to_string(line) + ": bad number '" + s + "'");
    return v;
}

int parse_int(const std::string& s, int line) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError("csv line " + std::to_string(line) + ": bad integer '" + s + "'");
    return v;
}

}  // namespace

std::string marginals_to_csv(const MarginalSequence& seq) {
    seq.validate();
    std::string out = "k,segment,label";
    for (int j = 0; j < seq.dim(); ++j) out += ",f" + std::to_string(j);
    out += '\n';
    for (int k = 0; k < seq.size(); ++k)
        for (Eigen::Index i = 0; i < seq.marginals[k].rows(); ++i) {
            out += std::to_string(k);
            out += ',' + (seq.has_segments() ? std::to_string(seq.segments[k][i]) : std::string("-"));
            out += ',' + (seq.has_labels() ? std::to_string(seq.labels[k][i]) : std::string("-"));
            for (Eigen::Index j = 0; j < seq.marginals[k].cols(); ++j) out += ',' + fmt(seq.marginals[k](i, j));
            out += '\n';
        }
    return out;
}

void write_marginals(const std::filesystem::path& path, const MarginalSequence& seq) {
    const auto text = marginals_to_csv(seq);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
}

MarginalSequence marginals_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw DataError("csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split(line, ',');
    if (header.size() < 4 || header[0] != "k" || header[1] != "segment" || header[2] != "label")
        throw ParseError("csv: header must start with k,segment,label,f0");
    const int d = static_cast<int>(header.size()) - 3;

    struct Row {
        int k;
        int seg, label;
        bool has_seg, has_label;
        std::vector<double> f;
    };
    std::vector<Row> rows;
    int lineno = 1;
    int max_k = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (static_cast<int>(cells.size()) != d + 3)
            throw DataError("csv line " + std::to_string(lineno) + ": expected " + std::to_string(d + 3) + " fields");
        Row r;
        r.k = parse_int(cells[0], lineno);
        if (r.k < 0) throw DataError("csv line " + std::to_string(lineno) + ": negative marginal index");
        r.has_seg = cells[1] != "-";
        r.seg = r.has_seg ? parse_int(cells[1], lineno) : 0;
        r.has_label = cells[2] != "-";
        r.label = r.has_label ? parse_int(cells[2], lineno) : 0;
        for (int j = 0; j < d; ++j) r.f.push_back(parse_double(cells[3 + j], lineno));
        max_k = std::max(max_k, r.k);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw DataError("csv: no samples");
    const bool any_seg = std::any_of(rows.begin(), rows.end(), [](const Row& r) { return r.has_seg; });
    const bool all_seg = std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.has_seg; });
    const bool any_label = std::any_of(rows.begin(), rows.end(), [](const Row& r) { return r.has_label; });
    const bool all_label = std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.has_label; });
    if (any_seg != all_seg) throw DataError("csv: segment column partially filled");
    if (any_label != all_label) throw DataError("csv: label column partially filled");

    const int T = max_k + 1;
    std::vector<int> counts(T, 0);
    for (const auto& r : rows) ++counts[r.k];
    MarginalSequence seq;
    seq.times = uniform_times(T);
    for (int k = 0; k < T; ++k) {
        if (counts[k] == 0) throw DataError("csv: marginal " + std::to_string(k) + " has no samples");
        seq.marginals.emplace_back(counts[k], d);
    }
    if (all_seg) seq.segments.resize(T);
    if (all_label) seq.labels.resize(T);
    std::vector<int> fill(T, 0);
    for (const auto& r : rows) {
        const int i = fill[r.k]++;
        for (int j = 0; j < d; ++j) seq.marginals[r.k](i, j) = r.f[j];
        if (all_seg) seq.segments[r.k].push_back(r.seg);
        if (all_label) seq.labels[r.k].push_back(r.label);
    }
    seq.validate();
    return seq;
}

MarginalSequence read_marginals(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return marginals_from_csv(ss.str());
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) f << (j ? "," : "") << fmt(m(i, j));
        f << '\n';
    }
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> r;
        for (const auto& c : split(line, ',')) r.push_back(parse_double(c, lineno));
        if (!rows.empty() && r.size() != rows.front().size()) throw DataError("matrix csv: ragged rows");
        rows.push_back(std::move(r));
    }
    Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
}

}  // namespace flux
