#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "stein_delta/cli.hpp"

int main(int argc, char** argv) {
    namespace cli = stein_delta::cli;
    CLI::App app{"Explicit delta-method approximation bounds and Monte Carlo checks"};
    app.require_subcommand(0);

    cli::Options opt;
    std::string config;
    std::uint64_t seed = 0;
    app.add_option("command", opt.command, "bound | verify | rate | example | stein-check | moments")
        ->required()
        ->check(CLI::IsMember(cli::commands()));
    app.add_option("--config", config, "JSON configuration document")->required();
    auto* seed_opt = app.add_option("--seed", seed, "override the configuration seed");
    app.add_option("--threads", opt.threads, "worker threads")->check(CLI::Range(1, 1024));
    app.add_option("--out", opt.out_dir, "output directory");
    app.add_option("--format", opt.format, "json | csv")->check(CLI::IsMember({"json", "csv"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kExitConfig;
    }
    if (seed_opt->count() > 0) opt.seed = seed;
    return cli::run_file(opt, config, std::cout, std::cerr);
}
