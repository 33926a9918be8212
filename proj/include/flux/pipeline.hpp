#pragma once

// Three-stage orchestration (geometry -> bend -> velocity), baseline variants,
// run persistence and result aggregation.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "flux/bend.hpp"
#include "flux/datasets.hpp"
#include "flux/eval.hpp"
#include "flux/geometry.hpp"
#include "flux/velocity.hpp"

namespace flux {

enum class Variant {
    flux,
    flux_no_geometry,
    vanilla_cfm,
    independent_cfm,
    euclid_multimarginal,
    gaussian,
    linear,
    static_ot,
    kmeans,
    gmm,
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
const std::vector<Variant>& all_variants();

// ---- configuration tree ----

// Full default tree for a dataset kind ("lorenz", "mesh" or "file").
nlohmann::json default_config(const std::string& dataset = "lorenz");

// Sets `dotted` (e.g. "velocity.experts") from a textual value. The path must
// already exist; the value is parsed as JSON when possible, else as a string.
void apply_override(nlohmann::json& tree, const std::string& dotted, const std::string& value);
// Recursively merges `patch` into `tree`; unknown keys throw ParameterError.
// Touched leaf paths are appended to `touched`.
void merge_config(nlohmann::json& tree, const nlohmann::json& patch, std::set<std::string>* touched = nullptr,
                  const std::string& prefix = "");

struct ExperimentConfig {
    nlohmann::json tree;
    std::set<std::string> touched;  // user-set leaf paths

    Variant variant() const;
    std::vector<std::uint64_t> seeds() const;
};

// Defaults for the dataset named in `file_tree` (if any), then the file, then
// `key=value` overrides. Throws on unknown keys or variant-inconsistent fields.
ExperimentConfig make_config(const nlohmann::json& file_tree, const std::vector<std::string>& overrides);
void validate_config(const ExperimentConfig& cfg);

GeometryTrainConfig geometry_config(const nlohmann::json& tree);
BendTrainConfig bend_config(const nlohmann::json& tree);
VelocityTrainConfig velocity_config(const nlohmann::json& tree, Variant v);
LorenzConfig lorenz_config(const nlohmann::json& tree);
MeshBenchConfig mesh_config(const nlohmann::json& tree);

// Hash of the canonical config dump plus seed (hex, 16 chars).
std::string run_hash(const nlohmann::json& tree, std::uint64_t seed);

// ---- data ----

struct PreparedData {
    MarginalSequence seq;         // model space (embedded, possibly standardized)
    std::vector<int> retained;    // marginals visible to training
    std::vector<int> held_out;
    std::optional<Mesh> mesh;
    Matrix embedding;             // 3 x D for the mesh benchmark
    std::vector<Matrix> points3;  // original 3D marginals for the mesh benchmark
    Vector shift, scale;          // standardization (identity when disabled)
};

// Loads or generates the dataset of `tree` for `seed`.
PreparedData prepare_data(const nlohmann::json& tree, std::uint64_t seed);

// Copy of `seq` in which every marginal outside `retained` is emptied, so any
// read of a held-out marginal by a training stage fails loudly.
MarginalSequence training_view(const MarginalSequence& seq, const std::vector<int>& retained);

// ---- runs ----

struct RunRecord {
    std::string config_hash;
    std::string variant;
    std::uint64_t seed = 0;
    std::string status = "ok";
    std::map<std::string, std::string> checkpoints;  // stage -> sha256
    std::map<std::string, std::string> parents;      // stage -> hash of the checkpoint it depends on
    std::map<std::string, double> seconds;           // stage -> wall clock
    std::map<std::string, std::vector<int>> stage_inputs;  // stage -> marginals read
    EvalReport report;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;  // persist runs/<hash>/ below this
    bool force = false;
    std::function<void(const std::string&)> log;   // JSON lines
};

// Runs one seed. Stage failures are captured in RunRecord::status.
RunRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts = {});

// Evaluates trained velocity models; `spans` gives the retained interval each
// model covers (one model spanning everything for the shared-ODE variants).
EvalReport evaluate_models(const PreparedData& data, const std::vector<MixtureVelocityModel>& models,
                           const std::vector<std::pair<int, int>>& spans, const nlohmann::json& tree);
// Re-evaluates a persisted runs/<hash>/ directory from its config and
// velocity checkpoints.
EvalReport evaluate_run(const std::filesystem::path& run_dir);

// ---- aggregation ----

struct MatrixRow {
    std::string variant;
    std::uint64_t seed = 0;
    EvalReport report;
    std::string status;
};

struct MatrixTable {
    std::vector<MatrixRow> rows;
    // variant -> metric -> (mean, std)
    std::map<std::string, std::map<std::string, std::pair<double, double>>> summary;
};

// Every (config, seed) pair; parallel up to FLUX_LAB_THREADS workers.
MatrixTable run_matrix(const std::vector<ExperimentConfig>& configs, const RunOptions& opts = {});
void summarize(MatrixTable& t);
int worker_threads();

// Columns: method, 1-hop WD, 2-hop WD, full-chain WD, ARI, NMI; rows sorted by
// variant then seed.
std::string table_csv(const MatrixTable& t);
std::string table_markdown(const MatrixTable& t);
std::vector<std::string> table_columns();

// ---- mesh dimension sweep ----

struct DimSweepRow {
    int dim = 3;
    std::string variant;
    std::uint64_t seed = 0;
    EvalReport report;
    std::string status;
};

std::vector<DimSweepRow> dim_sweep(const ExperimentConfig& mesh_cfg, const std::vector<int>& dims,
                                   const std::vector<Variant>& variants, const RunOptions& opts = {});
std::string dim_sweep_csv(const std::vector<DimSweepRow>& rows);

}  // namespace flux
