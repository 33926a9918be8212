// flux_lab: dataset generation, training, evaluation and sweeps.
//
// Exit codes: 0 success, 1 a requested run failed, 2 bad input (config,
// override, missing file).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "flux/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    bool force = false;
};

void add_common(CLI::App* app, Common& c, bool with_force = true) {
    app->add_option("--config", c.config, "JSON config or manifest file");
    app->add_option("--set", c.overrides, "Dotted override key=value (repeatable)")->take_all();
    app->add_option("--out", c.out, "Output directory");
    app->add_option("--seed", c.seed, "Seed (replaces the configured seed list)");
    if (with_force) app->add_flag("--force", c.force, "Overwrite existing runs");
}

json read_json(const std::string& path) {
    if (path.empty()) return json();
    std::ifstream in(path);
    if (!in) throw flux::DataError("cannot open config file '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw flux::ParseError("invalid JSON in '" + path + "': " + e.what());
    }
}

flux::ExperimentConfig build_config(json file_tree, const Common& c, std::vector<std::string> extra = {}) {
    std::vector<std::string> overrides = std::move(extra);
    overrides.insert(overrides.end(), c.overrides.begin(), c.overrides.end());
    if (c.seed) overrides.push_back("seeds=[" + std::to_string(*c.seed) + "]");
    return flux::make_config(file_tree, overrides);
}

void check_mesh_path(const json& tree) {
    if (tree.at("dataset").at("kind") != "mesh") return;
    const std::string path = tree.at("dataset").at("path");
    if (!path.empty() && !fs::exists(path)) throw flux::DataError("mesh file not found: " + path);
}

flux::RunOptions run_options(const Common& c, bool verbose) {
    flux::RunOptions o;
    o.out_dir = fs::path(c.out);
    o.force = c.force;
    if (verbose)
        o.log = [](const std::string& line) {
            if (line.find("\"epoch\"") == std::string::npos) std::cerr << line << '\n';
        };
    return o;
}

int cmd_generate(const Common& c, const std::string& dataset, int dim) {
    std::vector<std::string> extra{"dataset.kind=" + dataset, "dataset.standardize=false"};
    if (dataset == "mesh") extra.push_back("dataset.mesh.dim=" + std::to_string(dim));
    const auto cfg = build_config(read_json(c.config), c, extra);
    check_mesh_path(cfg.tree);
    const std::uint64_t seed = cfg.seeds().front();
    const auto data = flux::prepare_data(cfg.tree, seed);
    fs::create_directories(c.out);
    const fs::path out(c.out);
    if (dataset == "mesh") {
        for (int k = 0; k < data.seq.size(); ++k)
            flux::write_matrix_csv(out / ("marginal_" + std::to_string(k) + ".csv"), data.seq.marginals[k]);
        flux::write_matrix_csv(out / "embedding.csv", data.embedding);
        std::cout << "wrote " << data.seq.size() << " marginals (D=" << data.seq.dim() << ") and embedding.csv to "
                  << out.string() << '\n';
    } else {
        flux::write_marginals(out / "marginals.csv", data.seq);
        std::cout << "wrote " << (out / "marginals.csv").string() << '\n';
    }
    return 0;
}

int cmd_train(const Common& c, bool verbose) {
    const auto cfg = build_config(read_json(c.config), c);
    check_mesh_path(cfg.tree);
    int code = 0;
    for (auto seed : cfg.seeds()) {
        const auto rec = flux::run_experiment(cfg, seed, run_options(c, verbose));
        std::cout << rec.config_hash << ' ' << rec.variant << " seed=" << seed << ' ' << rec.status << '\n';
        if (rec.status != "ok") code = 1;
    }
    return code;
}

int cmd_eval(const std::string& run_dir) {
    const auto report = flux::evaluate_run(run_dir);
    std::cout << flux::to_json(report).dump(2) << '\n';
    return 0;
}

std::vector<flux::ExperimentConfig> manifest_configs(const json& manifest, const Common& c,
                                                    std::vector<std::string> variants) {
    json base = manifest.is_object() && manifest.contains("config") ? manifest["config"] : json();
    if (variants.empty() && manifest.is_object() && manifest.contains("variants"))
        variants = manifest["variants"].get<std::vector<std::string>>();
    if (variants.empty()) variants = {"flux", "flux_no_geometry", "vanilla_cfm", "independent_cfm",
                                      "euclid_multimarginal", "gaussian", "linear", "static_ot"};
    std::vector<flux::ExperimentConfig> out;
    for (const auto& v : variants) {
        std::vector<std::string> overrides{"variant=" + v};
        const bool geo = v == "flux";
        for (const auto& o : c.overrides)
            if (geo || (o.rfind("geometry.", 0) != 0 && o.rfind("bend.", 0) != 0)) overrides.push_back(o);
        if (c.seed) overrides.push_back("seeds=[" + std::to_string(*c.seed) + "]");
        json tree = base;
        if (tree.is_object() && !geo) {
            tree.erase("geometry");
            tree.erase("bend");
        }
        out.push_back(flux::make_config(tree, overrides));
    }
    return out;
}

void write_table(const fs::path& out, const flux::MatrixTable& t) {
    fs::create_directories(out);
    std::ofstream(out / "matrix.csv") << flux::table_csv(t);
    json summary = json::object();
    for (const auto& [variant, metrics] : t.summary)
        for (const auto& [name, ms] : metrics) summary[variant][name] = {{"mean", ms.first}, {"std", ms.second}};
    std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
    std::cout << flux::table_markdown(t);
}

int cmd_matrix(const Common& c, const std::vector<std::string>& variants, bool verbose) {
    const auto configs = manifest_configs(read_json(c.config), c, variants);
    for (const auto& cfg : configs) check_mesh_path(cfg.tree);
    const auto table = flux::run_matrix(configs, run_options(c, verbose));
    write_table(c.out, table);
    for (const auto& r : table.rows)
        if (r.status != "ok") return 1;
    return 0;
}

int cmd_dimsweep(const Common& c, const std::vector<int>& dims, const std::vector<std::string>& variants, bool verbose) {
    json tree = read_json(c.config);
    if (tree.is_object() && tree.contains("dataset") && tree["dataset"].contains("kind") && tree["dataset"]["kind"] != "mesh")
        throw flux::ParameterError("dimsweep needs a mesh dataset");
    const auto cfg = build_config(tree, c, {"dataset.kind=mesh"});
    check_mesh_path(cfg.tree);
    std::vector<flux::Variant> vs;
    for (const auto& v : variants) vs.push_back(flux::variant_from_string(v));
    const auto rows = flux::dim_sweep(cfg, dims, vs, run_options(c, verbose));
    fs::create_directories(c.out);
    const std::string csv = flux::dim_sweep_csv(rows);
    std::ofstream(fs::path(c.out) / "dimsweep.csv") << csv;
    std::cout << csv;
    for (const auto& r : rows)
        if (r.status != "ok") return 1;
    return 0;
}

int cmd_report(const std::string& out, const std::string& format) {
    flux::MatrixTable t;
    const fs::path runs = fs::path(out) / "runs";
    if (fs::exists(runs))
        for (const auto& entry : fs::directory_iterator(runs)) {
            const auto path = entry.path() / "report.json";
            if (!fs::exists(path)) continue;
            std::ifstream in(path);
            const auto rec = flux::record_from_json(json::parse(in));
            t.rows.push_back({rec.variant, rec.seed, rec.report, rec.status});
        }
    flux::summarize(t);
    std::cout << (format == "csv" ? flux::table_csv(t) : flux::table_markdown(t));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flux_lab: geometry-aware longitudinal flow matching with regime discovery"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Stream stage log lines to stderr");

    Common gen_c, train_c, matrix_c, sweep_c;
    std::string dataset = "lorenz";
    int dim = 3;
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset as CSV");
    add_common(gen, gen_c, false);
    gen->add_option("--dataset", dataset, "lorenz or mesh")->check(CLI::IsMember({"lorenz", "mesh"}));
    gen->add_option("--dim", dim, "Ambient dimension for the mesh benchmark")->check(CLI::PositiveNumber);
    std::string mesh_path;
    gen->add_option("--mesh", mesh_path, "OBJ mesh path");

    auto* train = app.add_subcommand("train", "Run every stage of one experiment and evaluate it");
    add_common(train, train_c);

    std::string run_dir;
    auto* ev = app.add_subcommand("eval", "Re-evaluate a persisted run from its checkpoints");
    ev->add_option("run", run_dir, "runs/<hash> directory")->required();

    std::vector<std::string> matrix_variants;
    auto* matrix = app.add_subcommand("matrix", "Run every (variant, seed) of a manifest");
    add_common(matrix, matrix_c);
    matrix->add_option("--variants", matrix_variants, "Variants to run (default: manifest or all)")->delimiter(',');

    std::vector<int> dims{3, 20};
    std::vector<std::string> sweep_variants{"flux", "euclid_multimarginal"};
    auto* sweep = app.add_subcommand("dimsweep", "Mesh benchmark across ambient dimensions");
    add_common(sweep, sweep_c);
    sweep->add_option("--dims", dims, "Ambient dimensions")->delimiter(',');
    sweep->add_option("--variants", sweep_variants, "Variants")->delimiter(',');

    std::string report_out = ".", format = "markdown";
    auto* report = app.add_subcommand("report", "Summary table over runs/ below --out");
    report->add_option("--out", report_out, "Directory containing runs/");
    report->add_option("--format", format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) {
            if (!mesh_path.empty()) gen_c.overrides.push_back("dataset.path=" + mesh_path);
            return cmd_generate(gen_c, dataset, dim);
        }
        if (*train) return cmd_train(train_c, verbose);
        if (*ev) return cmd_eval(run_dir);
        if (*matrix) return cmd_matrix(matrix_c, matrix_variants, verbose);
        if (*sweep) return cmd_dimsweep(sweep_c, dims, sweep_variants, verbose);
        if (*report) return cmd_report(report_out, format);
    } catch (const flux::ParameterError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const flux::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const flux::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
