#include "flux/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace flux {

using nlohmann::json;

// ---------------------------------------------------------------- variants

namespace {

const std::vector<std::pair<Variant, std::string>>& variant_names() {
    static const std::vector<std::pair<Variant, std::string>> names{
        {Variant::flux, "flux"},
        {Variant::flux_no_geometry, "flux_no_geometry"},
        {Variant::vanilla_cfm, "vanilla_cfm"},
        {Variant::independent_cfm, "independent_cfm"},
        {Variant::euclid_multimarginal, "euclid_multimarginal"},
        {Variant::gaussian, "gaussian"},
        {Variant::linear, "linear"},
        {Variant::static_ot, "static_ot"},
        {Variant::kmeans, "kmeans"},
        {Variant::gmm, "gmm"},
    };
    return names;
}

bool uses_geometry(Variant v) { return v == Variant::flux; }
bool uses_velocity(Variant v) {
    return v == Variant::flux || v == Variant::flux_no_geometry || v == Variant::vanilla_cfm ||
           v == Variant::independent_cfm || v == Variant::euclid_multimarginal;
}

}  // namespace

std::string to_string(Variant v) {
    for (const auto& [k, s] : variant_names())
        if (k == v) return s;
    return "?";
}

Variant variant_from_string(const std::string& s) {
    for (const auto& [k, n] : variant_names())
        if (n == s) return k;
    throw ParameterError("unknown variant '" + s + "'");
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v = [] {
        std::vector<Variant> out;
        for (const auto& [k, s] : variant_names()) out.push_back(k);
        return out;
    }();
    return v;
}

// ---------------------------------------------------------------- config tree

json default_config(const std::string& dataset) {
    if (dataset != "lorenz" && dataset != "mesh" && dataset != "file")
        throw ParameterError("unknown dataset kind '" + dataset + "'");
    const GeometryTrainConfig g;
    const BendTrainConfig b;
    const PenaltyWeights p;
    const GumbelSchedule gs;
    json t;
    t["variant"] = "flux";
    t["seeds"] = {0};
    t["dataset"] = {
        {"kind", dataset},
        {"path", ""},
        {"standardize", dataset != "mesh"},
        {"held_out", dataset == "mesh" ? json::array({1, 6}) : json::array()},
        {"lorenz",
         {{"samples_per_marginal", 512},
          {"n_trajectories", 0},
          {"window", 20},
          {"gap", 150},
          {"jitter", 15},
          {"burn_in", 500},
          {"start_offset", 100},
          {"dt", 0.01}}},
        {"mesh",
         {{"dim", 3},
          {"samples_per_marginal", 1000},
          {"falloff", 30.0},
          {"reference_path_length", 818.0},
          {"embed_seed", 7},
          {"resolution", 24}}},
    };
    t["geometry"] = {{"epochs", g.epochs},
                     {"batch_size", g.batch_size},
                     {"lr", g.lr},
                     {"weight_decay", g.weight_decay},
                     {"negative_ratio", g.negative_ratio},
                     {"chord_fraction", g.chord_fraction},
                     {"early_stop_patience", g.early_stop_patience},
                     {"num_centers", dataset == "mesh" ? 100 : g.num_centers},
                     {"feature_dim", g.feature_dim},
                     {"hidden", g.hidden},
                     {"eps", g.eps},
                     {"alpha", g.alpha},
                     {"deep_kernel_min_dim", g.deep_kernel_min_dim},
                     {"bandwidth_scale", g.bandwidth_scale},
                     {"kmeans_iters", g.kmeans_iters}};
    t["bend"] = {{"epochs", b.epochs},
                 {"batch_size", b.batch_size},
                 {"pairs_per_epoch", b.pairs_per_epoch},
                 {"lr", b.lr},
                 {"weight_decay", b.weight_decay},
                 {"n_energy_points", b.n_energy_points},
                 {"hidden", b.hidden},
                 {"coupling", "random_perm"},
                 {"zero_output", false}};
    t["velocity"] = {{"experts", 2},
                     {"hidden", 8},
                     {"single_hidden", 64},
                     {"layers", 2},
                     {"router_hidden", 32},
                     {"router_activation", "tanh"},
                     {"time_embedding_dim", 16},
                     {"source_conditioning", true},
                     {"epochs", 180},
                     {"batch_size", 32},
                     {"lr", 1e-4},
                     {"weight_decay", 1e-5},
                     {"early_stop_patience", 30},
                     {"val_fraction", 0.2},
                     {"tau_init", gs.tau_init},
                     {"tau_min", gs.tau_min},
                     {"tau_decay", gs.tau_decay},
                     {"soft_epochs", gs.soft_epochs},
                     {"coupling", dataset == "mesh" ? "sinkhorn_ot" : "index_aligned"}};
    t["penalties"] = {{"div", p.div},         {"con", p.con},          {"sp", p.sp},
                      {"lb_start", p.lb_start}, {"lb_end", p.lb_end},  {"z", p.z},
                      {"conf", p.conf},       {"clust", p.clust},      {"seg_con", p.seg_con},
                      {"seg_sharp", p.seg_sharp}, {"tv", p.tv},        {"contig", p.contig},
                      {"vel", p.vel},         {"l2", p.l2}};
    t["eval"] = {{"n_projections", 128}, {"projection_seeds", 5}, {"n_steps", 100}, {"seed", 20240601}};
    return t;
}

namespace {

const char* type_class(const json& j) {
    if (j.is_number()) return "number";
    if (j.is_boolean()) return "boolean";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

}  // namespace

void merge_config(json& tree, const json& patch, std::set<std::string>* touched, const std::string& prefix) {
    if (!patch.is_object()) throw ParameterError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!tree.contains(key)) throw ParameterError("config: unknown key '" + path + "'");
        json& slot = tree[key];
        if (slot.is_object()) {
            merge_config(slot, value, touched, path);
            continue;
        }
        if (std::string(type_class(slot)) != type_class(value))
            throw ParameterError("config: '" + path + "' expects a " + type_class(slot) + ", got " + type_class(value));
        slot = value;
        if (touched) touched->insert(path);
    }
}

void apply_override(json& tree, const std::string& dotted, const std::string& value) {
    std::vector<std::string> parts;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ParameterError("override: empty key");
    json* node = &tree;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i])) throw ParameterError("override: unknown key '" + dotted + "'");
        node = &(*node)[parts[i]];
    }
    if (node->is_object()) throw ParameterError("override: '" + dotted + "' is a section, not a value");
    json parsed;
    if (node->is_string()) {
        parsed = value;
    } else {
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            throw ParameterError("override: cannot parse value '" + value + "' for '" + dotted + "'");
        }
        if (std::string(type_class(*node)) != type_class(parsed))
            throw ParameterError("override: '" + dotted + "' expects a " + type_class(*node));
    }
    *node = parsed;
}

Variant ExperimentConfig::variant() const { return variant_from_string(tree.at("variant").get<std::string>()); }

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
    std::vector<std::uint64_t> out;
    for (const auto& s : tree.at("seeds")) {
        if (!s.is_number_integer() || s.get<long long>() < 0) throw ParameterError("config: seeds must be non-negative integers");
        out.push_back(s.get<std::uint64_t>());
    }
    return out;
}

void validate_config(const ExperimentConfig& cfg) {
    const Variant v = cfg.variant();
    for (const auto& path : cfg.touched) {
        const bool geo = path.rfind("geometry.", 0) == 0 || path.rfind("bend.", 0) == 0;
        if (geo && !uses_geometry(v))
            throw ParameterError("config: variant " + to_string(v) + " has no geometry stages but '" + path + "' is set");
    }
    const auto& t = cfg.tree;
    if (t.at("velocity").at("experts").get<int>() < 1) throw ParameterError("config: velocity.experts must be >= 1");
    if (t.at("geometry").at("epochs").get<int>() < 1) throw ParameterError("config: geometry.epochs must be >= 1");
    if (t.at("bend").at("n_energy_points").get<int>() < 2) throw ParameterError("config: bend.n_energy_points must be >= 2");
    if (cfg.seeds().empty()) throw ParameterError("config: seeds must not be empty");
    coupling_from_string(t.at("velocity").at("coupling").get<std::string>());
    coupling_from_string(t.at("bend").at("coupling").get<std::string>());
    activation_from_string(t.at("velocity").at("router_activation").get<std::string>());
}

ExperimentConfig make_config(const json& file_tree, const std::vector<std::string>& overrides) {
    std::string kind = "lorenz";
    if (file_tree.is_object() && file_tree.contains("dataset") && file_tree["dataset"].contains("kind"))
        kind = file_tree["dataset"]["kind"].get<std::string>();
    for (const auto& o : overrides)
        if (o.rfind("dataset.kind=", 0) == 0) kind = o.substr(std::string("dataset.kind=").size());
    ExperimentConfig cfg;
    cfg.tree = default_config(kind);
    if (!file_tree.is_null()) merge_config(cfg.tree, file_tree, &cfg.touched);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ParameterError("override '" + o + "' is not key=value");
        const std::string key = o.substr(0, eq);
        apply_override(cfg.tree, key, o.substr(eq + 1));
        cfg.touched.insert(key);
    }
    validate_config(cfg);
    return cfg;
}

GeometryTrainConfig geometry_config(const json& t) {
    const auto& g = t.at("geometry");
    GeometryTrainConfig c;
    c.epochs = g.at("epochs");
    c.batch_size = g.at("batch_size");
    c.lr = g.at("lr");
    c.weight_decay = g.at("weight_decay");
    c.negative_ratio = g.at("negative_ratio");
    c.chord_fraction = g.at("chord_fraction");
    c.early_stop_patience = g.at("early_stop_patience");
    c.num_centers = g.at("num_centers");
    c.feature_dim = g.at("feature_dim");
    c.hidden = g.at("hidden");
    c.eps = g.at("eps");
    c.alpha = g.at("alpha");
    c.deep_kernel_min_dim = g.at("deep_kernel_min_dim");
    c.bandwidth_scale = g.at("bandwidth_scale");
    c.kmeans_iters = g.at("kmeans_iters");
    return c;
}

BendTrainConfig bend_config(const json& t) {
    const auto& b = t.at("bend");
    BendTrainConfig c;
    c.epochs = b.at("epochs");
    c.batch_size = b.at("batch_size");
    c.pairs_per_epoch = b.at("pairs_per_epoch");
    c.lr = b.at("lr");
    c.weight_decay = b.at("weight_decay");
    c.n_energy_points = b.at("n_energy_points");
    c.hidden = b.at("hidden");
    return c;
}

VelocityTrainConfig velocity_config(const json& t, Variant v) {
    const auto& j = t.at("velocity");
    const auto& p = t.at("penalties");
    VelocityTrainConfig c;
    const bool moe = v == Variant::flux || v == Variant::flux_no_geometry;
    c.shape.experts = moe ? j.at("experts").get<int>() : 1;
    c.shape.hidden = moe ? j.at("hidden").get<int>() : j.at("single_hidden").get<int>();
    c.shape.layers = j.at("layers");
    c.shape.router_hidden = j.at("router_hidden");
    c.shape.router_activation = activation_from_string(j.at("router_activation"));
    c.shape.time_embedding.dim = j.at("time_embedding_dim");
    c.shape.gumbel = {j.at("tau_init"), j.at("tau_min"), j.at("tau_decay"), j.at("soft_epochs")};
    c.shape.source_conditioning =
        j.at("source_conditioning").get<bool>() && v != Variant::vanilla_cfm && v != Variant::independent_cfm;
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.early_stop_patience = j.at("early_stop_patience");
    c.val_fraction = j.at("val_fraction");
    c.coupling.kind = coupling_from_string(j.at("coupling"));
    c.euclidean = v != Variant::flux;
    c.weights.div = p.at("div");
    c.weights.con = p.at("con");
    c.weights.sp = p.at("sp");
    c.weights.lb_start = p.at("lb_start");
    c.weights.lb_end = p.at("lb_end");
    c.weights.z = p.at("z");
    c.weights.conf = p.at("conf");
    c.weights.clust = p.at("clust");
    c.weights.seg_con = p.at("seg_con");
    c.weights.seg_sharp = p.at("seg_sharp");
    c.weights.tv = p.at("tv");
    c.weights.contig = p.at("contig");
    c.weights.vel = p.at("vel");
    c.weights.l2 = p.at("l2");
    return c;
}

LorenzConfig lorenz_config(const json& t) {
    const auto& l = t.at("dataset").at("lorenz");
    LorenzConfig c;
    c.samples_per_marginal = l.at("samples_per_marginal");
    c.n_trajectories = l.at("n_trajectories");
    c.window = l.at("window");
    c.gap = l.at("gap");
    c.jitter = l.at("jitter");
    c.burn_in_regime0 = l.at("burn_in");
    c.start_offset = l.at("start_offset");
    c.dt = l.at("dt");
    return c;
}

MeshBenchConfig mesh_config(const json& t) {
    const auto& m = t.at("dataset").at("mesh");
    MeshBenchConfig c;
    c.samples_per_marginal = m.at("samples_per_marginal");
    c.falloff = m.at("falloff");
    c.reference_path_length = m.at("reference_path_length");
    c.held_out = t.at("dataset").at("held_out").get<std::vector<int>>();
    return c;
}

std::string run_hash(const json& tree, std::uint64_t seed) {
    return sha256_hex(tree.dump() + "#seed=" + std::to_string(seed)).substr(0, 16);
}

// ---------------------------------------------------------------- data

Mesh default_mesh(int resolution) { return make_ellipsoid({1.6, 1.0, 0.8}, resolution, 2 * resolution); }

PreparedData prepare_data(const json& tree, std::uint64_t seed) {
    const auto& ds = tree.at("dataset");
    const std::string kind = ds.at("kind");
    PreparedData out;
    Rng rng(derive_seed(seed, 0));
    if (kind == "lorenz") {
        out.seq = generate_lorenz(lorenz_config(tree), rng);
    } else if (kind == "mesh") {
        const std::string path = ds.at("path");
        out.mesh = path.empty() ? default_mesh(ds.at("mesh").at("resolution")) : load_obj(path);
        const auto mm = sample_mesh_marginals(*out.mesh, mesh_config(tree), rng);
        const int D = ds.at("mesh").at("dim");
        out.embedding = embedding_matrix(D, ds.at("mesh").at("embed_seed").get<std::uint64_t>());
        out.seq.times = mm.seq.times;
        for (const auto& m : mm.seq.marginals) {
            out.points3.push_back(m);
            out.seq.marginals.push_back(m * out.embedding);
        }
    } else {
        const std::string path = ds.at("path");
        if (path.empty()) throw DataError("dataset.path is required for file datasets");
        out.seq = read_marginals(path);
    }
    out.seq.validate();
    const int T = out.seq.size();
    out.held_out = ds.at("held_out").get<std::vector<int>>();
    for (int k : out.held_out)
        if (k < 0 || k >= T) throw DataError("held-out marginal " + std::to_string(k) + " out of range");
    for (int k = 0; k < T; ++k)
        if (std::find(out.held_out.begin(), out.held_out.end(), k) == out.held_out.end()) out.retained.push_back(k);
    if (out.retained.size() < 2) throw DataError("fewer than two retained marginals");

    const int d = out.seq.dim();
    out.shift = Vector::Zero(d);
    out.scale = Vector::Ones(d);
    if (ds.at("standardize").get<bool>()) {
        const Matrix pooled = out.seq.pooled(out.retained);
        out.shift = pooled.colwise().mean().transpose();
        const Matrix c = pooled.rowwise() - out.shift.transpose();
        for (int j = 0; j < d; ++j) {
            const double sd = std::sqrt(c.col(j).squaredNorm() / static_cast<double>(pooled.rows()));
            out.scale(j) = sd > 0.0 ? sd : 1.0;
        }
        for (auto& m : out.seq.marginals)
            m = ((m.rowwise() - out.shift.transpose()).array().rowwise() / out.scale.transpose().array()).matrix();
    }
    return out;
}

MarginalSequence training_view(const MarginalSequence& seq, const std::vector<int>& retained) {
    MarginalSequence view = seq;
    for (int k = 0; k < seq.size(); ++k)
        if (std::find(retained.begin(), retained.end(), k) == retained.end()) {
            view.marginals[k] = Matrix(0, seq.dim());
            if (view.has_segments()) view.segments[k].clear();
            if (view.has_labels()) view.labels[k].clear();
        }
    return view;
}

// ---------------------------------------------------------------- records

json to_json(const RunRecord& r) {
    json j;
    j["config_hash"] = r.config_hash;
    j["variant"] = r.variant;
    j["seed"] = r.seed;
    j["status"] = r.status;
    j["checkpoints"] = r.checkpoints;
    j["parents"] = r.parents;
    j["seconds"] = r.seconds;
    j["stage_inputs"] = r.stage_inputs;
    j["report"] = to_json(r.report);
    return j;
}

RunRecord record_from_json(const json& j) {
    RunRecord r;
    r.config_hash = j.at("config_hash");
    r.variant = j.at("variant");
    r.seed = j.at("seed");
    r.status = j.at("status");
    r.checkpoints = j.value("checkpoints", std::map<std::string, std::string>{});
    r.parents = j.value("parents", std::map<std::string, std::string>{});
    r.seconds = j.value("seconds", std::map<std::string, double>{});
    r.stage_inputs = j.value("stage_inputs", std::map<std::string, std::vector<int>>{});
    r.report = report_from_json(j.at("report"));
    return r;
}

// ---------------------------------------------------------------- evaluation helpers

namespace {

void fill_wd(EvalReport& r, const WdSuite& s) {
    r.wd1 = s.wd1.mean;
    r.wd1_std = s.wd1.std;
    if (s.wd2) {
        r.wd2 = s.wd2->mean;
        r.wd2_std = s.wd2->std;
    }
    if (s.wd_fc) {
        r.wd_fc = s.wd_fc->mean;
        r.wd_fc_std = s.wd_fc->std;
    }
    r.one_hop = s.one_hop;
}

std::vector<int> segment_ids(const MarginalSequence& seq, int k) {
    if (seq.has_segments()) return seq.segments[k];
    return std::vector<int>(seq.marginals[k].rows(), k);
}

void fill_regime(EvalReport& r, const MarginalSequence& seq, const std::vector<int>& assign,
                 const std::vector<int>& segs, const std::vector<int>& truth, int n_experts) {
    const auto pred = segment_majority(assign, segs);
    const auto gold = segment_majority(truth, segs);
    r.seg_ari = ari(gold.labels, pred.labels);
    r.seg_nmi = nmi(gold.labels, pred.labels);
    r.switch_rate = switch_rate(pred);
    r.segment_labels_true = gold.labels;
    r.segment_labels_pred = pred.labels;
    std::vector<int> counts(std::max(n_experts, 1 + *std::max_element(assign.begin(), assign.end())), 0);
    for (int a : assign) ++counts[a];
    r.majority_expert_fraction =
        static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(assign.size());
    (void)seq;
}

// Routes every marginal at its own time with the marginal as source.
void regime_from_field(EvalReport& r, const MarginalSequence& seq, const MixtureField& field, int K) {
    if (!seq.has_labels()) return;
    std::vector<int> assign, segs, truth;
    double entropy = 0.0;
    Eigen::Index n = 0;
    for (int k = 0; k < seq.size(); ++k) {
        const Matrix& x = seq.marginals[k];
        const auto a = field.assignments(seq.times[k], x, x);
        assign.insert(assign.end(), a.begin(), a.end());
        const auto s = segment_ids(seq, k);
        segs.insert(segs.end(), s.begin(), s.end());
        truth.insert(truth.end(), seq.labels[k].begin(), seq.labels[k].end());
        entropy += gating_entropy(field.probabilities(seq.times[k], x, x)) * static_cast<double>(x.rows());
        n += x.rows();
    }
    fill_regime(r, seq, assign, segs, truth, K);
    r.gating_entropy = entropy / static_cast<double>(n);
}

void regime_from_labels(EvalReport& r, const MarginalSequence& seq, const std::vector<int>& labels, int K) {
    if (!seq.has_labels()) return;
    std::vector<int> segs, truth;
    for (int k = 0; k < seq.size(); ++k) {
        const auto s = segment_ids(seq, k);
        segs.insert(segs.end(), s.begin(), s.end());
        truth.insert(truth.end(), seq.labels[k].begin(), seq.labels[k].end());
    }
    fill_regime(r, seq, labels, segs, truth, K);
}

// Mesh metrics: chain from the first marginal, back-projected to 3D.
void mesh_metrics(EvalReport& r, const PreparedData& data, const FieldTransport& transport) {
    const auto chain = transport.chain(data.seq.marginals[0], 0);
    const int T = data.seq.size();
    r.per_marginal_wd.assign(T, 0.0);
    double dev = 0.0;
    for (int k = 0; k < T; ++k) {
        Matrix x = chain.sets[k];
        x = ((x.array().rowwise() * data.scale.transpose().array()).rowwise() + data.shift.transpose().array()).matrix();
        const Matrix p3 = project_back(x, data.embedding);
        r.per_marginal_wd[k] = coordinate_w1(p3, data.points3[k]);
        dev += surface_deviation(p3, *data.mesh);
    }
    r.surface_dev = dev / T;
    auto mean_over = [&](const std::vector<int>& ks) {
        double s = 0.0;
        for (int k : ks) s += r.per_marginal_wd[k];
        return ks.empty() ? 0.0 : s / static_cast<double>(ks.size());
    };
    std::vector<int> train, all(T);
    std::iota(all.begin(), all.end(), 0);
    for (int k : data.retained)
        if (k != 0) train.push_back(k);
    r.held_out_wd = mean_over(data.held_out);
    r.train_wd = mean_over(train);
    r.all_wd = mean_over(all);
}

class RunLog {
public:
    RunLog(const RunOptions& o, std::ofstream* file) : opts_(o), file_(file) {}
    void write(const json& j) {
        const std::string line = j.dump();
        if (file_) *file_ << line << '\n';
        if (opts_.log) opts_.log(line);
    }

private:
    const RunOptions& opts_;
    std::ofstream* file_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---------------------------------------------------------------- run_experiment

EvalReport evaluate_models(const PreparedData& data, const std::vector<MixtureVelocityModel>& models,
                           const std::vector<std::pair<int, int>>& spans, const json& tree) {
    if (models.empty() || models.size() != spans.size()) throw ParameterError("evaluate_models: models/spans mismatch");
    const auto& ev = tree.at("eval");
    const int n_steps = ev.at("n_steps");
    EvalReport report;
    std::vector<MixtureField> fields;
    fields.reserve(models.size());
    for (const auto& m : models) fields.emplace_back(m);
    std::optional<FieldTransport> transport;
    if (fields.size() == 1) {
        transport.emplace(fields[0], data.seq.times, n_steps);
    } else {
        std::vector<const VelocityField*> per;
        for (int k = 0; k + 1 < data.seq.size(); ++k) {
            std::size_t m = 0;
            while (m + 1 < spans.size() && k >= spans[m].second) ++m;
            per.push_back(&fields[m]);
        }
        transport.emplace(per, data.seq.times, n_steps);
    }
    fill_wd(report, wd_suite(*transport, data.seq, ev.at("n_projections"), ev.at("seed").get<std::uint64_t>(),
                             ev.at("projection_seeds")));
    if (fields.size() == 1) regime_from_field(report, data.seq, fields[0], models[0].num_experts());
    if (data.mesh) mesh_metrics(report, data, *transport);
    report.n_diverged = transport->diverged();
    return report;
}

EvalReport evaluate_run(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "config.json");
    if (!in) throw DataError("no config.json in " + run_dir.string());
    const json tree = json::parse(in);
    const std::uint64_t seed = tree.at("seeds").at(0);
    const PreparedData data = prepare_data(tree, seed);
    std::vector<MixtureVelocityModel> models;
    std::vector<std::pair<int, int>> spans;
    const auto dir = run_dir / "checkpoints";
    if (std::filesystem::exists(dir / "velocity.ckpt")) {
        models.push_back(velocity_from_checkpoint(Checkpoint::load(dir / "velocity.ckpt")));
        spans.emplace_back(data.retained.front(), data.retained.back());
    } else {
        for (std::size_t s = 0; s + 1 < data.retained.size(); ++s) {
            const auto path = dir / ("velocity" + std::to_string(s) + ".ckpt");
            if (!std::filesystem::exists(path)) throw DataError("missing checkpoint " + path.string());
            models.push_back(velocity_from_checkpoint(Checkpoint::load(path)));
            spans.emplace_back(data.retained[s], data.retained[s + 1]);
        }
    }
    return evaluate_models(data, models, spans, tree);
}


RunRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts) {
    validate_config(cfg);
    const Variant variant = cfg.variant();
    const json& tree = cfg.tree;
    RunRecord rec;
    rec.config_hash = run_hash(tree, seed);
    rec.variant = to_string(variant);
    rec.seed = seed;

    std::optional<std::filesystem::path> dir;
    std::ofstream logfile;
    if (opts.out_dir) {
        dir = *opts.out_dir / "runs" / rec.config_hash;
        if (std::filesystem::exists(*dir / "report.json") && !opts.force)
            throw Error("run " + rec.config_hash + " already exists in " + dir->string() + " (use --force to overwrite)");
        std::filesystem::create_directories(*dir / "checkpoints");
        json c = tree;
        c["seeds"] = {seed};
        std::ofstream(*dir / "config.json") << c.dump(2) << '\n';
        logfile.open(*dir / "log.jsonl", std::ios::trunc);
    }
    RunLog log(opts, dir ? &logfile : nullptr);
    auto save_ckpt = [&](const std::string& stage, const Checkpoint& c) {
        rec.checkpoints[stage] = dir ? c.save(*dir / "checkpoints" / (stage + ".ckpt")) : c.hash();
    };

    std::string stage = "data";
    try {
        auto t0 = std::chrono::steady_clock::now();
        const PreparedData data = prepare_data(tree, seed);
        rec.seconds["data"] = seconds_since(t0);
        const MarginalSequence view = training_view(data.seq, data.retained);
        const auto& ev = tree.at("eval");
        const int n_proj = ev.at("n_projections");
        const int n_seeds = ev.at("projection_seeds");
        const std::uint64_t eval_seed = ev.at("seed");
        const int K = tree.at("velocity").at("experts");

        EvalReport report;
        if (uses_velocity(variant)) {
            std::optional<MetricModel> metric;
            std::optional<BendModel> bend;
            if (uses_geometry(variant)) {
                stage = "geometry";
                t0 = std::chrono::steady_clock::now();
                Rng grng(derive_seed(seed, 1));
                GeometryTrainReport grep;
                rec.stage_inputs["geometry"] = data.retained;
                metric = train_geometry(view.pooled(data.retained), geometry_config(tree), grng, &grep);
                save_ckpt("metric", metric_checkpoint(*metric));
                rec.seconds["geometry"] = seconds_since(t0);
                log.write({{"event", "stage"}, {"stage", "geometry"}, {"backend", metric_kind(*metric)},
                           {"train_loss", grep.train_loss}, {"val_loss", grep.val_loss}});

                stage = "bend";
                t0 = std::chrono::steady_clock::now();
                Rng brng(derive_seed(seed, 2));
                BendTrainReport brep;
                rec.stage_inputs["bend"] = data.retained;
                if (tree.at("bend").at("zero_output").get<bool>()) {
                    bend = make_bend(data.seq.dim(), tree.at("bend").at("hidden"), brng);
                    bend->net.params().setZero();
                    bend->metric_hash = metric_checkpoint(*metric).hash();
                } else {
                    Coupling bc;
                    bc.kind = coupling_from_string(tree.at("bend").at("coupling"));
                    bend = train_bend(view, data.retained, *metric, bc, bend_config(tree), brng, &brep);
                }
                save_ckpt("bend", bend_checkpoint(*bend));
                rec.parents["bend"] = bend->metric_hash;
                rec.seconds["bend"] = seconds_since(t0);
                log.write({{"event", "stage"}, {"stage", "bend"}, {"initial_loss", brep.initial_loss},
                           {"loss", brep.loss}, {"skipped_batches", brep.skipped_batches}});
            }

            stage = "velocity";
            t0 = std::chrono::steady_clock::now();
            const VelocityTrainConfig vcfg = velocity_config(tree, variant);
            rec.stage_inputs["velocity"] = data.retained;
            auto epoch_log = [&](const VelocityEpochLog& e) {
                json j = to_json(e);
                j["event"] = "epoch";
                log.write(j);
            };
            std::vector<MixtureVelocityModel> models;
            std::vector<std::pair<int, int>> spans;  // retained interval per model
            if (variant == Variant::independent_cfm) {
                for (std::size_t s = 0; s + 1 < data.retained.size(); ++s) {
                    Rng vrng(derive_seed(seed, 3 + s));
                    const std::vector<int> which{data.retained[s], data.retained[s + 1]};
                    models.push_back(train_velocity(view, which, nullptr, vcfg, vrng, nullptr, epoch_log));
                    spans.emplace_back(which[0], which[1]);
                }
            } else {
                Rng vrng(derive_seed(seed, 3));
                VelocityTrainReport vrep;
                models.push_back(train_velocity(view, data.retained, bend ? &*bend : nullptr, vcfg, vrng, &vrep, epoch_log));
                spans.emplace_back(data.retained.front(), data.retained.back());
                log.write({{"event", "stage"}, {"stage", "velocity"}, {"best_epoch", vrep.best_epoch},
                           {"best_val_fm", vrep.best_val_fm}, {"skipped_batches", vrep.skipped_batches}});
            }
            for (std::size_t i = 0; i < models.size(); ++i) {
                Checkpoint c = velocity_checkpoint(models[i]);
                if (bend) c.meta()["bend_hash"] = rec.checkpoints.at("bend");
                if (metric) c.meta()["metric_hash"] = rec.checkpoints.at("metric");
                const std::string name = models.size() == 1 ? "velocity" : "velocity" + std::to_string(i);
                save_ckpt(name, c);
                if (bend) rec.parents[name] = rec.checkpoints.at("bend");
            }
            rec.seconds["velocity"] = seconds_since(t0);

            stage = "eval";
            t0 = std::chrono::steady_clock::now();
            report = evaluate_models(data, models, spans, tree);
            rec.seconds["eval"] = seconds_since(t0);
        } else {
            stage = "eval";
            t0 = std::chrono::steady_clock::now();
            Rng brng(derive_seed(seed, 4));
            switch (variant) {
                case Variant::gaussian:
                    fill_wd(report, wd_suite(GaussianTransport(data.seq, derive_seed(seed, 5)), data.seq, n_proj, eval_seed, n_seeds));
                    break;
                case Variant::linear:
                    fill_wd(report, wd_suite(LinearTransport(data.seq, derive_seed(seed, 5)), data.seq, n_proj, eval_seed, n_seeds));
                    break;
                case Variant::static_ot:
                    fill_wd(report, wd_suite(StaticOtTransport(data.seq, derive_seed(seed, 5)), data.seq, n_proj, eval_seed, n_seeds));
                    break;
                case Variant::kmeans:
                    regime_from_labels(report, data.seq, kmeans_labels(data.seq.pooled(), K, 100, brng), K);
                    break;
                case Variant::gmm:
                    regime_from_labels(report, data.seq, gmm_em(data.seq.pooled(), K, 200, brng).labels, K);
                    break;
                default: break;
            }
            rec.seconds["eval"] = seconds_since(t0);
        }
        rec.report = report;
    } catch (const Error& e) {
        rec.status = "failed at " + stage + ": " + e.what();
        log.write({{"event", "failure"}, {"stage", stage}, {"message", e.what()}});
    }
    log.write({{"event", "done"}, {"status", rec.status}, {"report", to_json(rec.report)}});
    if (dir) std::ofstream(*dir / "report.json") << to_json(rec).dump(2) << '\n';
    return rec;
}

// ---------------------------------------------------------------- aggregation

int worker_threads() {
    if (const char* env = std::getenv("FLUX_LAB_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

namespace {

std::map<std::string, std::optional<double>> table_metrics(const EvalReport& r) {
    return {{"1-hop WD", r.wd1}, {"2-hop WD", r.wd2}, {"full-chain WD", r.wd_fc}, {"ARI", r.seg_ari}, {"NMI", r.seg_nmi}};
}

std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", *v);
    return buf;
}

std::vector<MatrixRow> sorted_rows(const MatrixTable& t) {
    auto rows = t.rows;
    std::stable_sort(rows.begin(), rows.end(), [](const MatrixRow& a, const MatrixRow& b) {
        return a.variant != b.variant ? a.variant < b.variant : a.seed < b.seed;
    });
    return rows;
}

}  // namespace

void summarize(MatrixTable& t) {
    t.summary.clear();
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (const auto& row : t.rows)
        for (const auto& [name, v] : table_metrics(row.report))
            if (v) values[row.variant][name].push_back(*v);
    for (const auto& [variant, metrics] : values)
        for (const auto& [name, v] : metrics) {
            const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            t.summary[variant][name] = {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
        }
}

MatrixTable run_matrix(const std::vector<ExperimentConfig>& configs, const RunOptions& opts) {
    struct Job {
        const ExperimentConfig* cfg;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& c : configs)
        for (auto s : c.seeds()) jobs.push_back({&c, s});
    MatrixTable table;
    table.rows.resize(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    RunOptions local = opts;
    if (opts.log)
        local.log = [&](const std::string& line) {
            std::lock_guard<std::mutex> lock(log_mutex);
            opts.log(line);
        };
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            MatrixRow row;
            row.variant = to_string(jobs[i].cfg->variant());
            row.seed = jobs[i].seed;
            try {
                const auto rec = run_experiment(*jobs[i].cfg, jobs[i].seed, local);
                row.report = rec.report;
                row.status = rec.status;
            } catch (const Error& e) {
                row.status = e.what();
            }
            table.rows[i] = std::move(row);
        }
    };
    const int n_threads = std::min<int>(worker_threads(), static_cast<int>(std::max<std::size_t>(1, jobs.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    summarize(table);
    return table;
}

std::vector<std::string> table_columns() { return {"method", "1-hop WD", "2-hop WD", "full-chain WD", "ARI", "NMI"}; }

std::string table_csv(const MatrixTable& t) {
    std::string out;
    const auto cols = table_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
    out += '\n';
    for (const auto& row : sorted_rows(t)) {
        const auto m = table_metrics(row.report);
        out += row.variant;
        for (std::size_t i = 1; i < cols.size(); ++i) out += "," + cell(m.at(cols[i]));
        out += '\n';
    }
    return out;
}

std::string table_markdown(const MatrixTable& t) {
    const auto cols = table_columns();
    std::string out = "|";
    for (const auto& c : cols) out += " " + c + " |";
    out += "\n|";
    for (std::size_t i = 0; i < cols.size(); ++i) out += "---|";
    out += '\n';
    for (const auto& row : sorted_rows(t)) {
        const auto m = table_metrics(row.report);
        out += "| " + row.variant + " |";
        for (std::size_t i = 1; i < cols.size(); ++i) out += " " + cell(m.at(cols[i])) + " |";
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------- dim sweep

std::vector<DimSweepRow> dim_sweep(const ExperimentConfig& mesh_cfg, const std::vector<int>& dims,
                                   const std::vector<Variant>& variants, const RunOptions& opts) {
    if (mesh_cfg.tree.at("dataset").at("kind") != "mesh") throw ParameterError("dim_sweep needs a mesh dataset");
    std::vector<DimSweepRow> rows;
    for (int D : dims)
        for (Variant v : variants)
            for (auto seed : mesh_cfg.seeds()) {
                ExperimentConfig c = mesh_cfg;
                c.tree["dataset"]["mesh"]["dim"] = D;
                c.tree["variant"] = to_string(v);
                if (!uses_geometry(v))
                    for (auto it = c.touched.begin(); it != c.touched.end();)
                        it = (it->rfind("geometry.", 0) == 0 || it->rfind("bend.", 0) == 0) ? c.touched.erase(it) : std::next(it);
                DimSweepRow row;
                row.dim = D;
                row.variant = to_string(v);
                row.seed = seed;
                const auto rec = run_experiment(c, seed, opts);
                row.report = rec.report;
                row.status = rec.status;
                rows.push_back(std::move(row));
            }
    return rows;
}

std::string dim_sweep_csv(const std::vector<DimSweepRow>& rows) {
    std::string out = "dim,method,seed,held_out_wd,train_wd,all_wd,surface_dev,status\n";
    for (const auto& r : rows)
        out += std::to_string(r.dim) + "," + r.variant + "," + std::to_string(r.seed) + "," + cell(r.report.held_out_wd) +
               "," + cell(r.report.train_wd) + "," + cell(r.report.all_wd) + "," + cell(r.report.surface_dev) + "," +
               r.status + "\n";
    return out;
}

}  // namespace flux
