// SPDX-License-Identifier: Apache-2.0
//
// One training experiment end to end: seeded data, model assembly, stage
// plan execution with per-stage audit, and held-out evaluation.

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <vector>

#include "mixlab/config.hpp"
#include "mixlab/model.hpp"
#include "mixlab/synthbench.hpp"
#include "mixlab/trainer.hpp"

namespace mixlab {

inline std::uint64_t model_seed(const RunConfig& c) { return derive_seed(c.seed, 0x6d6f64656cULL); }
inline std::uint64_t plan_seed(const RunConfig& c) { return derive_seed(c.seed, 0x706c616eULL); }

struct ExperimentResult {
    StagePlan plan;
    PlanResult trained;
    EvalResult eval;
    double seconds = 0.0;
};

/// Groups a stage changed although they were outside its mask.
inline std::vector<std::string> mask_violations(const StageRecord& r) {
    std::vector<std::string> out;
    for (const auto& id : r.diff.changed)
        if (!r.stage.trainable_mask.count(id)) out.push_back(id);
    return out;
}

inline ExperimentResult run_experiment(const RunConfig& c,
                                       const std::function<void(const StageRecord&)>& on_stage = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentResult r;
    const ModelAssembly initial = build_assembly(c.model, model_seed(c));
    r.plan = make_stage_plan(c.pre_align, initial, c.budgets);
    const auto train = gen_dataset(train_data_seed(c), c.train_size);
    r.trained = run_plan(initial, r.plan, train, plan_seed(c), c.budgets.batch, on_stage);
    const auto held_out = gen_dataset(eval_data_seed(c), c.eval_size);
    r.eval = evaluate(r.trained.assembly, held_out);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace mixlab
