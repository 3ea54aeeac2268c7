// SPDX-License-Identifier: Apache-2.0
//
// mixlab command-line entry point.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"
#include "mixlab/registry.hpp"

#ifndef MIXLAB_DATA_DIR
#define MIXLAB_DATA_DIR "data"
#endif

namespace {

std::string fixture(const std::string& name) { return std::string(MIXLAB_DATA_DIR) + "/fixtures/" + name; }

}  // namespace

int main(int argc, char** argv) {
    using namespace mixlab::cli;
    CLI::App app{"mixlab: mixture-of-vision-experts toolkit"};
    app.require_subcommand(1);

    std::string config;
    std::uint64_t seed = 0;
    std::string out_dir;

    ReproAvgOptions repro;
    repro.metrics = fixture("metrics.csv");
    auto* c_repro = app.add_subcommand("repro-avg", "Recompute the Avg column of score tables");
    c_repro->add_option("fixtures", repro.fixtures, "Score table CSV files (default: bundled tables)");
    c_repro->add_option("--metrics", repro.metrics, "Metric maxima CSV")->capture_default_str();
    c_repro->add_option("--tolerance", repro.tolerance, "Largest accepted |recomputed - reported|")
        ->capture_default_str();
    c_repro->add_option("--out", out_dir, "Directory for repro_avg.csv");
    c_repro->add_option("--config", config, "Unused; accepted for a uniform interface");
    c_repro->add_option("--seed", seed, "Unused; accepted for a uniform interface");

    SelectOptions sel;
    sel.fixture = fixture("table5.csv");
    sel.metrics = fixture("metrics.csv");
    sel.encoders = fixture("encoders.csv");
    auto* c_select = app.add_subcommand("select", "Greedy encoder selection over a score table");
    c_select->add_option("fixture", sel.fixture, "Score table CSV")->capture_default_str();
    c_select->add_option("--metrics", sel.metrics, "Metric maxima CSV")->capture_default_str();
    c_select->add_option("--encoders", sel.encoders, "Encoder label to name CSV")->capture_default_str();
    c_select->add_option("--base", sel.base, "Starting combination, e.g. A+B (default: first row)");
    c_select->add_option("--pool", sel.pool, "Candidate encoder labels (default: all outside the base)");
    c_select->add_option("--out", out_dir, "Directory for selection.csv");
    c_select->add_option("--config", config, "Unused; accepted for a uniform interface");
    c_select->add_option("--seed", seed, "Unused; accepted for a uniform interface");

    TrainOptions train;
    auto* c_train = app.add_subcommand("train", "Run a stage plan from a config file and evaluate");
    c_train->add_option("--config", train.config, "Run configuration file")->required();
    auto* seed_opt = c_train->add_option("--seed", seed, "Override the config seed");
    c_train->add_option("--out", train.out_dir, "Override the config output directory");

    GradcheckOptions gc;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of registered backward passes");
    c_grad->add_option("ops", gc.ops, "Ops to check (default: all)");
    c_grad->add_option("--seeds", gc.seeds, "Seeds per op")->capture_default_str();
    c_grad->add_option("--threshold", gc.threshold, "Largest accepted relative error")->capture_default_str();
    c_grad->add_option("--list", "List registered ops and exit")->expected(0);
    c_grad->add_option("--out", out_dir, "Directory for gradcheck.csv");
    c_grad->add_option("--config", config, "Unused; accepted for a uniform interface");
    auto* grad_seed = c_grad->add_option("--seed", seed, "Check a single seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitInvalid;
    }

    if (*c_repro) {
        if (repro.fixtures.empty())
            for (const char* t : {"table1.csv", "table3.csv", "table4.csv", "table5.csv"})
                repro.fixtures.push_back(fixture(t));
        repro.out_dir = out_dir;
        return cmd_repro_avg(repro, std::cout, std::cerr);
    }
    if (*c_select) {
        sel.out_dir = out_dir;
        return cmd_select(sel, std::cout, std::cerr);
    }
    if (*c_train) {
        if (*seed_opt) train.seed = seed;
        return cmd_train(train, std::cout, std::cerr);
    }
    const auto registry = mixlab::default_grad_registry();
    if (c_grad->count("--list")) {
        for (const auto& op : registry.ops()) std::cout << op << "\n";
        return kExitOk;
    }
    if (*grad_seed) gc.seeds = {seed};
    gc.out_dir = out_dir;
    return cmd_gradcheck(registry, gc, std::cout, std::cerr);
}
