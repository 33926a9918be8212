#pragma once

// Synthetic benchmarks (regime-switching Lorenz windows, mesh-geodesic
// marginals with orthonormal embedding) and the marginal CSV format.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "flux/common.hpp"
#include "flux/transport.hpp"

namespace flux {

// ---- Lorenz ----

struct LorenzParams {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
};

Eigen::Vector3d lorenz_derivative(const Eigen::Vector3d& s, const LorenzParams& p);
// One explicit Euler step.
Eigen::Vector3d lorenz_step(const Eigen::Vector3d& s, const LorenzParams& p, double dt);

struct LorenzConfig {
    std::array<LorenzParams, 2> regimes{LorenzParams{10.0, 28.0, 8.0 / 3.0}, LorenzParams{10.0, 12.0, 8.0 / 3.0}};
    double dt = 0.01;
    int window = 20;
    int gap = 150;
    int jitter = 15;  // xi ~ Uniform{-jitter..jitter}
    int burn_in_regime0 = 500;
    int start_offset = 100;
    int marginals_per_regime = 4;
    int samples_per_marginal = 512;
    int n_trajectories = 0;  // 0 = samples_per_marginal
    double init0_std = 5.0;
    Eigen::Vector3d init1_base{20.0, 22.0, 30.0};
    double init1_std = 6.0;
};

// Raw rollout of `steps` recorded states (rows) after the regime's burn-in.
Matrix lorenz_rollout(const Eigen::Vector3d& x0, const LorenzParams& p, double dt, int burn_in, int steps);

// 8 marginals of flattened 3 x window trajectory windows, [x.., y.., z..] per
// row, with regime labels. Bit-reproducible for a fixed rng state.
MarginalSequence generate_lorenz(const LorenzConfig& cfg, Rng& rng);

// ---- Meshes ----

struct Mesh {
    Matrix vertices;                     // n x 3
    std::vector<std::array<int, 3>> faces;

    int num_vertices() const { return static_cast<int>(vertices.rows()); }
    int num_faces() const { return static_cast<int>(faces.size()); }
};

// v/f records only; polygons are fan-triangulated. Throws ParseError on
// malformed records or out-of-range indices.
Mesh load_obj(const std::filesystem::path& path);
Mesh parse_obj(const std::string& text);
void write_obj(const std::filesystem::path& path, const Mesh& mesh);

// Closed triangulated ellipsoid with the given semi-axes.
Mesh make_ellipsoid(const Eigen::Vector3d& radii, int n_lat, int n_lon);
Mesh make_torus(double major, double minor, int n_major, int n_minor);

Vector face_areas(const Mesh& mesh);

// Dijkstra over the edge graph with Euclidean edge lengths.
Vector mesh_geodesic_distances(const Mesh& mesh, int source);
// Vertex sequence of one shortest edge path from source to target.
std::vector<int> mesh_shortest_path(const Mesh& mesh, int source, int target);

struct MeshBenchConfig {
    std::vector<double> progress{0.00, 0.14, 0.29, 0.43, 0.57, 0.71, 0.86, 1.00};
    // Gaussian falloff in mesh units for a path of reference_path_length; it is
    // rescaled by path_length / reference_path_length.
    double falloff = 30.0;
    double reference_path_length = 818.0;
    int samples_per_marginal = 1000;
    std::vector<int> held_out{1, 6};
};

struct MeshMarginals {
    MarginalSequence seq;          // 3D points
    std::vector<int> waypoints;    // vertex per marginal
    int start = 0, end = 0;
    double path_length = 0.0;
    double falloff = 0.0;          // effective b
};

// Face probabilities for a waypoint: area(f) exp(-0.5 (d(f)/b)^2), normalized.
// d(f) is the geodesic distance of the face vertex nearest the face centroid.
Vector face_probabilities(const Mesh& mesh, const Vector& geodesic_from_waypoint, double falloff);
// Uniform point on triangle f.
Eigen::Vector3d sample_on_face(const Mesh& mesh, int face, Rng& rng);
MeshMarginals sample_mesh_marginals(const Mesh& mesh, const MeshBenchConfig& cfg, Rng& rng);

struct Embedding {
    Matrix points;  // n x D
    Matrix A;       // 3 x D, orthonormal rows
};
// A = first three columns of Q (QR of a seeded D x 3 Gaussian), transposed.
Matrix embedding_matrix(int D, std::uint64_t seed);
Embedding orthonormal_embed(const Matrix& points3, int D, std::uint64_t seed);
// x A^+ (pseudoinverse).
Matrix project_back(const Matrix& points, const Matrix& A);

double point_triangle_distance(const Eigen::Vector3d& p, const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                               const Eigen::Vector3d& c);
double point_mesh_distance(const Eigen::Vector3d& p, const Mesh& mesh);
// Mean unsigned distance of the rows of `points` to the surface.
double surface_deviation(const Matrix& points, const Mesh& mesh);

// ---- Marginal CSV ----
// Header `k,segment,label,f0..f{d-1}`; '-' marks an absent segment or label.
void write_marginals(const std::filesystem::path& path, const MarginalSequence& seq);
std::string marginals_to_csv(const MarginalSequence& seq);
MarginalSequence read_marginals(const std::filesystem::path& path);
MarginalSequence marginals_from_csv(const std::string& text);

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace flux
