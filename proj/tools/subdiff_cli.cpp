#include <CLI11.hpp>
#include <iostream>

#include "subdiff/experiment.hpp"

using namespace subdiff;

namespace {

struct Options {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int parallel = 1;
};

int run(ExperimentKind kind, const Options& opt) {
    ExperimentConfig cfg;
    try {
        cfg = load_config(opt.config_path);
        if (cfg.experiment != kind)
            throw ConfigError("config experiment does not match the chosen subcommand");
        if (opt.seed_set) cfg.seed = opt.seed;
        if (opt.parallel < 1) throw ConfigError("--parallel must be >= 1");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    try {
        int code = run_experiment(cfg, opt.out_dir, opt.parallel);
        if (code == 0)
            std::cout << "all checks passed; results in " << opt.out_dir << "\n";
        else
            std::cerr << "check failures; see " << opt.out_dir << "/report.json\n";
        return code;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion-on-subspaces experiment harness"};
    app.require_subcommand(1);

    Options opt;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "experiment config JSON")->required();
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--seed", opt.seed, "override the config seed")
            ->each([&](const std::string&) { opt.seed_set = true; });
        sub->add_option("--parallel", opt.parallel, "worker threads for sweep points");
    };

    auto* validate = app.add_subcommand("validate", "oracle and lemma validation suite");
    auto* sweep_n = app.add_subcommand("sweep-n", "subspace recovery vs sample size");
    auto* sweep_t0 = app.add_subcommand("sweep-t0", "early-stopping tradeoff sweep");
    auto* sweep_grid = app.add_subcommand("sweep-grid", "constructive approximation sweep");
    for (auto* sub : {validate, sweep_n, sweep_t0, sweep_grid}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    if (app.got_subcommand(validate)) return run(ExperimentKind::validate, opt);
    if (app.got_subcommand(sweep_n)) return run(ExperimentKind::sweep_n, opt);
    if (app.got_subcommand(sweep_t0)) return run(ExperimentKind::sweep_t0, opt);
    return run(ExperimentKind::sweep_grid, opt);
}
