#include "doctest.h"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out, err;
    double seconds = 0.0;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("flux_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Result run(const std::string& args) {
    const auto dir = fs::temp_directory_path();
    const auto out = dir / "flux_cli_stdout.txt", err = dir / "flux_cli_stderr.txt";
    const std::string cmd = std::string(FLUX_LAB_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
    const auto t0 = std::chrono::steady_clock::now();
    const int status = std::system(cmd.c_str());
    Result r;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

const std::string kSmallLorenz = " --set dataset.lorenz.samples_per_marginal=16";

}  // namespace

TEST_CASE("generate is byte-reproducible for a fixed seed") {
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    REQUIRE(run("generate --dataset lorenz --seed 7 --out " + a.string() + kSmallLorenz).code == 0);
    REQUIRE(run("generate --dataset lorenz --seed 7 --out " + b.string() + kSmallLorenz).code == 0);
    const std::string csv = slurp(a / "marginals.csv");
    CHECK_FALSE(csv.empty());
    CHECK(csv == slurp(b / "marginals.csv"));
    const auto c = scratch("gen_c");
    REQUIRE(run("generate --dataset lorenz --seed 8 --out " + c.string() + kSmallLorenz).code == 0);
    CHECK(csv != slurp(c / "marginals.csv"));
}

TEST_CASE("generate mesh writes eight marginals and the embedding") {
    const auto d = scratch("mesh");
    const auto r = run("generate --dataset mesh --dim 20 --out " + d.string() +
                       " --set dataset.mesh.samples_per_marginal=10 --set dataset.mesh.resolution=8");
    REQUIRE(r.code == 0);
    for (int k = 0; k < 8; ++k) CHECK(fs::exists(d / ("marginal_" + std::to_string(k) + ".csv")));
    CHECK_FALSE(fs::exists(d / "marginal_8.csv"));
    REQUIRE(fs::exists(d / "embedding.csv"));
    std::istringstream emb(slurp(d / "embedding.csv"));
    std::string line;
    int rows = 0;
    while (std::getline(emb, line))
        if (!line.empty() && line[0] != '#') ++rows;
    CHECK(rows == 3);
}

TEST_CASE("missing inputs exit with code 2 and a message") {
    const auto d = scratch("missing");
    const auto r = run("generate --dataset mesh --mesh /nonexistent/bunny.obj --out " + d.string());
    CHECK(r.code == 2);
    CHECK(r.err.find("/nonexistent/bunny.obj") != std::string::npos);

    const auto bad_key = run("train --set velocity.expertz=3 --out " + d.string());
    CHECK(bad_key.code == 2);
    CHECK(bad_key.err.find("expertz") != std::string::npos);

    CHECK(run("train --config /nonexistent/cfg.json --out " + d.string()).code == 2);
}

TEST_CASE("gaussian training is fast, logs JSON lines and refuses to overwrite") {
    const auto d = scratch("train");
    const auto first = run("train --set variant=gaussian --seed 0 --out " + d.string());
    REQUIRE(first.code == 0);
    CHECK(first.seconds < 1.0);
    const std::string hash = first.out.substr(0, first.out.find(' '));
    const auto run_dir = d / "runs" / hash;
    REQUIRE(fs::exists(run_dir / "log.jsonl"));
    std::istringstream log(slurp(run_dir / "log.jsonl"));
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        CHECK_NOTHROW((void)json::parse(line));
        ++lines;
    }
    CHECK(lines >= 1);

    const auto again = run("train --set variant=gaussian --seed 0 --out " + d.string());
    CHECK(again.code != 0);
    CHECK(again.err.find("--force") != std::string::npos);
    CHECK(run("train --set variant=gaussian --seed 0 --force --out " + d.string()).code == 0);
}

TEST_CASE("eval re-evaluates a persisted run") {
    const auto d = scratch("eval");
    const auto t = run("train --set variant=vanilla_cfm --set velocity.epochs=2 --set eval.n_projections=8 --seed 1 --out " +
                       d.string() + kSmallLorenz);
    REQUIRE(t.code == 0);
    const std::string hash = t.out.substr(0, t.out.find(' '));
    const auto run_dir = d / "runs" / hash;
    const auto e = run("eval " + run_dir.string());
    REQUIRE(e.code == 0);
    const json stored = json::parse(slurp(run_dir / "report.json")).at("report");
    CHECK(json::parse(e.out) == stored);
}

TEST_CASE("report: empty runs directory and the column set") {
    const auto d = scratch("report");
    const auto md = run("report --out " + d.string());
    CHECK(md.code == 0);
    CHECK(md.out == "| method | 1-hop WD | 2-hop WD | full-chain WD | ARI | NMI |\n|---|---|---|---|---|---|\n");
    const auto csv = run("report --format csv --out " + d.string());
    CHECK(csv.code == 0);
    CHECK(csv.out == "method,1-hop WD,2-hop WD,full-chain WD,ARI,NMI\n");

    REQUIRE(run("train --set variant=gaussian --set seeds=[3,2] --out " + d.string()).code == 0);
    const auto filled = run("report --format csv --out " + d.string());
    std::istringstream rows(filled.out);
    std::string header, r1, r2;
    std::getline(rows, header);
    std::getline(rows, r1);
    std::getline(rows, r2);
    CHECK(header == "method,1-hop WD,2-hop WD,full-chain WD,ARI,NMI");
    CHECK(r1.rfind("gaussian,", 0) == 0);
    CHECK(r2.rfind("gaussian,", 0) == 0);
}
