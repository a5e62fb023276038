// ckba: run the basis-adaptation experiment stage by stage.
//
//   ckba <stage> --config run.json [--workdir DIR]
//   ckba all --config run.json
//   ckba check --config run.json
//
// Exit codes: 0 success, 1 invalid input or stale artifacts, 2 numerical failure.
// CKBA_THREADS sets the worker count.

#include <chrono>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "ckba/config.hpp"
#include "ckba/error.hpp"
#include "ckba/parallel.hpp"
#include "ckba/pipeline.hpp"

namespace pl = ckba::pipeline;

int main(int argc, char** argv) {
    CLI::App app{"Basis-adaptation surrogates and inversion on a synthetic Darcy aquifer"};
    app.set_version_flag("--version", std::string(CKBA_VERSION));
    app.require_subcommand(1);

    std::string config_path, workdir;
    bool quiet = false;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config,-c", config_path, "experiment configuration (JSON)")->required();
        sub->add_option("--workdir,-w", workdir, "run directory (default: output_dir from the config)");
        sub->add_flag("--quiet,-q", quiet, "no progress output");
    };

    std::vector<CLI::App*> stage_cmds;
    for (pl::Stage s : pl::kAllStages) {
        auto* sub = app.add_subcommand(std::string(pl::to_string(s)), "run the " + std::string(pl::to_string(s)) + " stage");
        add_common(sub);
        stage_cmds.push_back(sub);
    }
    auto* all = app.add_subcommand("all", "run every stage in order");
    add_common(all);
    auto* check = app.add_subcommand("check", "validate the configuration and print its hash");
    check->add_option("--config,-c", config_path, "experiment configuration (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    const pl::Logger log = [&](const std::string& msg) {
        if (!quiet) std::cerr << "[ckba] " << msg << std::endl;
    };

    try {
        const auto config = pl::load_config(config_path);
        if (check->parsed()) {
            config.validate();
            std::cout << config.hash() << "\n";
            return 0;
        }
        const std::filesystem::path root = workdir.empty() ? std::filesystem::path(config.output_dir) : std::filesystem::path(workdir);
        log("threads: " + std::to_string(ckba::thread_count()) + ", run directory " + root.string());
        if (all->parsed()) {
            pl::run_all(config, root, log);
            return 0;
        }
        for (std::size_t i = 0; i < stage_cmds.size(); ++i)
            if (stage_cmds[i]->parsed()) pl::run_stage(config, pl::kAllStages[i], root, log);
        return 0;
    } catch (const ckba::ValidationError& e) {
        std::cerr << "ckba: error: " << e.what() << "\n";
        return 1;
    } catch (const ckba::NumericalError& e) {
        std::cerr << "ckba: numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "ckba: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ckba: numerical failure: " << e.what() << "\n";
        return 2;
    }
}
