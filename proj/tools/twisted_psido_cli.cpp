#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "twisted_psido/scenario.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Twisted pseudodifferential calculus: composition, parametrices, resolvent trace expansions, Schur bounds"};
    std::string command, config, out;
    int threads = 1;
    std::uint64_t seed = 1;
    app.add_option("command", command, "compose | adjoint | parametrix | trace-expansion | schur | verify")
        ->required()
        ->check(CLI::IsMember({"compose", "adjoint", "parametrix", "trace-expansion", "schur", "verify"}));
    app.add_option("--config", config, "scenario document (JSON)")->required();
    app.add_option("--out", out, "output directory (default: $TWISTED_PSIDO_OUT, then the config, then ./twisted_psido_out)");
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--seed", seed, "seed for randomized checks");
    CLI11_PARSE(app, argc, argv);

    try {
        tpsido::set_threads(threads);
        const auto cfg = tpsido::load_config(config);
        std::filesystem::path dir = "twisted_psido_out";
        if (cfg.output_dir) dir = *cfg.output_dir;
        if (const char* env = std::getenv("TWISTED_PSIDO_OUT"); env && *env) dir = env;
        if (!out.empty()) dir = out;

        const auto res = tpsido::run_scenario(cfg, command, dir, seed);
        for (const auto& l : res.lines) std::cout << l << '\n';
        for (const auto& p : res.written) std::cout << "wrote " << p.string() << '\n';
        return res.status;
    } catch (const std::exception& e) {
        std::cerr << tpsido::failure_json(e).dump() << '\n';
        return 2;
    }
}
