#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "twisted_psido/scenario.hpp"

using namespace tpsido;
namespace fs = std::filesystem;

namespace {

struct Run {
    int status;
    std::string out;
};

// stdout and stderr together
Run run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + TWISTED_PSIDO_CLI + std::string(" ") + args + " 2>&1";
    Run r{0, ""};
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    std::size_t k;
    while ((k = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, k);
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string config(const std::string& name) { return std::string(TWISTED_PSIDO_CONFIGS) + "/" + name + ".json"; }

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / "twisted_psido_cli_test" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string minimal = R"({"version": 1, "backend": {"kind": "scalar", "n": 1},
  "symbols": {"f": {"order": 2, "components": ["xi1^2"]}}})";

}  // namespace

TEST_CASE("minimal config parses", "[cli]") {
    auto cfg = parse_config(minimal);
    CHECK(cfg.version == 1);
    CHECK(cfg.backend->dim() == 1);
    CHECK(cfg.symbol("f", "/").symbol.order == 2.0);
    CHECK(cfg.m == 2.0);
}

TEST_CASE("config errors carry a location", "[cli]") {
    auto where = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const ConfigError& e) {
            return e.location();
        }
        return std::string("no error");
    };
    CHECK(where(R"({"version": 1, "backend": {"kind": "scalar", "n": 2}, "twist": [[0, 1], [1, 0]]})") == "/twist/0/1");
    CHECK(where(R"({"version": 2, "backend": {"kind": "scalar", "n": 1}})") == "/version");
    CHECK(where(R"({"version": 1, "backend": {"kind": "scalar", "n": 1}, "bogus": 3})") == "/bogus");
    CHECK(where("{\"version\": 1,\n  \"backend\": }") == "line 2, column 14");
    CHECK(where(R"({"version": 1, "backend": {"kind": "scalar", "n": 1},
      "symbols": {"f": {"order": 2, "components": ["xi1^2 +"]}}})")
              .rfind("/symbols/f/components/0", 0) == 0);
}

TEST_CASE("expressions round-trip through the printer", "[cli]") {
    auto b = Backend::scalar(1);
    for (std::string src : {"inv(xi1^2 - mu^2)", "absxi^-1", "xi1^3 + 2*xi1*mu - 0.5"}) {
        const Expr e = parse_expr(src, b);
        const Expr again = parse_expr(expr_to_string(e), b);
        for (double x : {0.7, -1.9})
            for (cplx mu : {cplx(0.3, 1.1), cplx(-2.0, 0.4)}) {
                const std::vector<double> xs{x};
                CHECK(alg_norm(Program(e)(xs, mu) - Program(again)(xs, mu)) <= 1e-14);
            }
    }
}

TEST_CASE("free trace expansion through the binary", "[cli]") {
    const auto dir = scratch("free");
    auto r = run_cli("trace-expansion --config " + config("free_laplacian") + " --out " + dir.string());
    REQUIRE(r.status == 0);
    const auto csv = slurp(dir / "trace_expansion.csv");
    CHECK(csv.rfind("kind,index,mu_exponent,mu_real,mu_imag,lambda_exponent,lambda_real,lambda_imag,exact,provenance\n",
                    0) == 0);
    CHECK(csv.find("\npower,0,-1,0,0.5,-0.5,0.5,") != std::string::npos);
    const auto j = json::parse(slurp(dir / "trace_expansion.json"));
    CHECK(j.at("expansion").at("lambda_variable") == "-lambda");
}

TEST_CASE("verify on the twisted composition scenario", "[cli]") {
    auto r = run_cli("verify --config " + config("twisted_compose") + " --out " + scratch("verify").string());
    CHECK(r.status == 0);
    CHECK(r.out.find("j ≤ 1 twist-independence: pass") != std::string::npos);
    CHECK(r.out.find("parametrix identity: pass") != std::string::npos);
    CHECK(r.out.find(": fail") == std::string::npos);
}

TEST_CASE("schur command on the exponential kernel", "[cli]") {
    const auto dir = scratch("schur");
    auto r = run_cli("schur --config " + config("schur_exponential") + " --out " + dir.string() + " --threads 4");
    REQUIRE(r.status == 0);
    const auto j = json::parse(slurp(dir / "schur.json"));
    CHECK(std::abs(j.at("bound").get<double>() - 8.0) <= 1e-3);
    CHECK(std::abs(j.at("measured").get<double>() - 2.0) <= 0.02);
    CHECK(j.at("dominance") == true);
    CHECK(r.out.find("dominance: pass") != std::string::npos);
}

TEST_CASE("outputs are identical across runs and thread counts", "[cli]") {
    const auto a = scratch("det_a"), b = scratch("det_b");
    for (auto [dir, t] : {std::pair{a, 1}, std::pair{b, 3}}) {
        REQUIRE(run_cli("trace-expansion --config " + config("shifted_matrix") + " --out " + dir.string() +
                        " --threads " + std::to_string(t))
                    .status == 0);
        REQUIRE(run_cli("compose --config " + config("twisted_compose") + " --out " + dir.string() + " --threads " +
                        std::to_string(t))
                    .status == 0);
    }
    for (const char* f : {"trace_expansion.csv", "trace_expansion.json", "fit.csv", "fit_lines.csv", "compose.json"}) {
        INFO(f);
        CHECK(slurp(a / f) == slurp(b / f));
        CHECK(!slurp(a / f).empty());
    }
}

TEST_CASE("failures produce JSON and a nonzero exit", "[cli]") {
    const auto dir = scratch("fail");
    const auto bad = dir / "bad.json";
    std::ofstream(bad) << R"({"version": 1, "backend": {"kind": "scalar", "n": 2}, "twist": [[0, 1], [1, 0]]})";
    auto r = run_cli("compose --config " + bad.string() + " --out " + dir.string());
    CHECK(r.status == 2);
    const auto j = json::parse(r.out);
    CHECK(j.at("status") == "failed");
    CHECK(j.at("error") == "config");
    CHECK(j.at("location") == "/twist/0/1");

    // a section the command needs is missing
    auto m = run_cli("schur --config " + config("free_laplacian") + " --out " + dir.string());
    CHECK(m.status == 2);
    CHECK(json::parse(m.out).at("error") == "config");

    std::ofstream(dir / "v2.json") << R"({"version": 2, "backend": {"kind": "scalar", "n": 1}})";
    auto v = run_cli("verify --config " + (dir / "v2.json").string());
    CHECK(v.status == 2);
    CHECK(json::parse(v.out).at("location") == "/version");
}

TEST_CASE("output directory from the environment", "[cli]") {
    const auto env = scratch("env"), flag = scratch("flag");
    auto r = run_cli("adjoint --config " + config("twisted_compose"), "TWISTED_PSIDO_OUT=" + env.string());
    REQUIRE(r.status == 0);
    CHECK(fs::exists(env / "adjoint.json"));
    // --out wins over the environment
    REQUIRE(run_cli("adjoint --config " + config("twisted_compose") + " --out " + flag.string(),
                    "TWISTED_PSIDO_OUT=" + env.string())
                .status == 0);
    CHECK(fs::exists(flag / "adjoint.json"));
}
