// SPDX-License-Identifier: Apache-2.0
//
// Stage plans (two-stage baseline and three-stage pre-alignment), an Adam
// optimizer over named parameter groups, minibatch training, and a bitwise
// parameter snapshot audit.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/model.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/synthbench.hpp"

namespace mixlab {

enum class DataSource { pairs, sft };

inline const char* to_string(DataSource d) { return d == DataSource::pairs ? "pairs" : "sft"; }

struct Stage {
    std::string name;
    DataSource source = DataSource::sft;
    int steps = 1;
    double learning_rate = 1e-3;
    std::set<std::string> trainable_mask;
    Route route;  // solo route for pre-alignment stage-1 runs
};

struct StagePlan {
    std::vector<Stage> stages;
};

struct Budgets {
    int pairs_steps = 500;
    double pairs_lr = 1e-3;
    int sft_steps = 2000;
    double sft_lr = 2e-5;
    int prealign_steps = 500;
    double prealign_lr = 2e-5;
    int batch = 32;

    std::vector<std::string> violations() const {
        std::vector<std::string> v;
        if (pairs_steps < 1 || sft_steps < 1 || prealign_steps < 1) v.emplace_back("stage steps must be >= 1");
        if (!(pairs_lr > 0) || !(sft_lr > 0) || !(prealign_lr > 0)) v.emplace_back("learning rates must be positive");
        if (batch < 1) v.emplace_back("batch must be >= 1");
        return v;
    }
};

namespace detail {

inline bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

inline bool expert_group_frozen(const ModelAssembly& a, const std::string& id) {
    for (const auto& e : a.experts)
        if (e.frozen && has_prefix(id, "expert." + e.spec.name + ".")) return true;
    return false;
}

template <class Pred>
std::set<std::string> select_groups(const ModelAssembly& a, Pred pred) {
    std::set<std::string> out;
    for (const auto& id : a.group_ids())
        if (pred(id) && !expert_group_frozen(a, id)) out.insert(id);
    return out;
}

}  // namespace detail

/// Explicit group-id masks for either recipe. Frozen experts never appear in
/// any mask.
inline StagePlan make_stage_plan(bool pre_align, const ModelAssembly& a, const Budgets& b) {
    if (const auto v = b.violations(); !v.empty()) throw ValidationError("invalid budgets: " + v.front());
    StagePlan plan;
    const auto all = detail::select_groups(a, [](const std::string&) { return true; });
    if (!pre_align) {
        plan.stages.push_back({"align", DataSource::pairs, b.pairs_steps, b.pairs_lr,
                               detail::select_groups(a, [](const std::string& id) {
                                   return detail::has_prefix(id, "projector.");
                               }),
                               Route::full()});
        plan.stages.push_back({"finetune", DataSource::sft, b.sft_steps, b.sft_lr, all, Route::full()});
        return plan;
    }
    if (a.expert_projectors.size() != a.experts.size())
        throw ValidationError("pre-alignment needs one projector per expert (set expert_projectors)");
    for (std::size_t e = 0; e < a.experts.size(); ++e) {
        const std::string& n = a.experts[e].spec.name;
        plan.stages.push_back({"prealign." + n, DataSource::sft, b.prealign_steps, b.prealign_lr,
                               detail::select_groups(a, [&](const std::string& id) {
                                   return detail::has_prefix(id, "expert." + n + ".") ||
                                          detail::has_prefix(id, "projector." + n + ".");
                               }),
                               Route::solo(e)});
    }
    // Joint projector stage: whatever maps the fused stream, i.e. the fused
    // projector and injection adapters, or the per-expert projectors under SA.
    const bool sa = !a.fused_projector;
    plan.stages.push_back({"joint_projector", DataSource::pairs, b.pairs_steps, b.pairs_lr,
                           detail::select_groups(a, [&](const std::string& id) {
                               if (sa) return detail::has_prefix(id, "projector.");
                               return detail::has_prefix(id, "projector.fused.") ||
                                      detail::has_prefix(id, "projector.inject.");
                           }),
                           Route::full()});
    plan.stages.push_back({"finetune", DataSource::sft, b.sft_steps, b.sft_lr, all, Route::full()});
    return plan;
}

// ---------------------------------------------------------------- optimizer

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    Matrix m, v;
};

struct AdamState {
    AdamHyper hyper;
    int t = 0;
    std::map<std::string, AdamMoments> moments;
};

/// One bias-corrected Adam update of a single group; `t` is the 1-based step.
inline void adam_update(Matrix& p, const Matrix& g, AdamMoments& s, int t, double lr, const AdamHyper& h = {}) {
    if (!p.same_shape(g))
        throw InvalidArgument("update_params: gradient shape " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                              " != parameter shape " + std::to_string(p.rows) + "x" + std::to_string(p.cols));
    if (s.m.size() == 0) s = {zeros_like(p), zeros_like(p)};
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        s.m.data[i] = h.beta1 * s.m.data[i] + (1.0 - h.beta1) * g.data[i];
        s.v.data[i] = h.beta2 * s.v.data[i] + (1.0 - h.beta2) * g.data[i] * g.data[i];
        const double mh = s.m.data[i] / c1;
        const double vh = s.v.data[i] / c2;
        p.data[i] -= lr * mh / (std::sqrt(vh) + h.eps);
    }
}

/// Applies one optimizer step to every group of `a` in `mask`.
inline void update_params(ModelAssembly& a, const ModelAssembly& grads, AdamState& state, double lr,
                          const std::set<std::string>& mask) {
    std::map<std::string, const Matrix*> g;
    grads.for_each_group([&](const std::string& id, const Matrix& m) { g[id] = &m; });
    ++state.t;
    a.for_each_group([&](const std::string& id, Matrix& p) {
        if (!mask.count(id)) return;
        const auto it = g.find(id);
        if (it == g.end()) throw InvalidArgument("update_params: no gradient for group " + id);
        adam_update(p, *it->second, state.moments[id], state.t, lr, state.hyper);
    });
}

// ---------------------------------------------------------------- training

struct StageResult {
    ModelAssembly assembly;
    std::vector<double> losses;
};

/// Which experts receive gradients: those with at least one group in the mask.
inline std::vector<bool> experts_in_mask(const ModelAssembly& a, const std::set<std::string>& mask) {
    std::vector<bool> need(a.experts.size(), false);
    for (std::size_t e = 0; e < a.experts.size(); ++e) {
        const std::string p = "expert." + a.experts[e].spec.name + ".";
        for (const auto& id : mask)
            if (detail::has_prefix(id, p)) need[e] = true;
    }
    return need;
}

/// Runs `stage.steps` Adam updates on the mean loss of seeded minibatches of
/// `batch` samples drawn with replacement. When batch >= data.size() every
/// step uses the whole dataset in order.
inline StageResult run_stage(const ModelAssembly& assembly, const Stage& stage, std::span<const Sample> data,
                             std::uint64_t seed, int batch = 32) {
    if (data.empty()) throw InvalidArgument("run_stage: empty dataset");
    if (stage.steps < 1) throw ValidationError("run_stage: steps must be >= 1");
    if (batch < 1) throw ValidationError("run_stage: batch must be >= 1");
    const auto ids = assembly.group_ids();
    const std::set<std::string> known(ids.begin(), ids.end());
    for (const auto& id : stage.trainable_mask)
        if (!known.count(id)) throw ValidationError("stage " + stage.name + ": unknown parameter group " + id);

    StageResult r{assembly, {}};
    r.losses.reserve(static_cast<std::size_t>(stage.steps));
    const auto needs = experts_in_mask(assembly, stage.trainable_mask);
    const bool full = static_cast<std::size_t>(batch) >= data.size();
    const std::size_t bs = full ? data.size() : static_cast<std::size_t>(batch);
    Rng rng(seed);
    AdamState opt;
    std::vector<std::size_t> idx(bs);
    for (int step = 0; step < stage.steps; ++step) {
        for (std::size_t k = 0; k < bs; ++k) idx[k] = full ? k : static_cast<std::size_t>(rng.below(data.size()));
        ModelAssembly grads = zeros_like(r.assembly);
        double total = 0.0;
        for (std::size_t k : idx) {
            const auto& s = data[k];
            total += sample_loss(r.assembly, s.image, static_cast<int>(s.task), s.answer, stage.route, &grads, needs);
        }
        const double mean = total / static_cast<double>(bs);
        if (!std::isfinite(mean)) throw TrainingDiverged(stage.name, step);
        r.losses.push_back(mean);
        const double inv = 1.0 / static_cast<double>(bs);
        grads.for_each_group([&](const std::string&, Matrix& m) {
            for (double& v : m.data) v *= inv;
        });
        update_params(r.assembly, grads, opt, stage.learning_rate, stage.trainable_mask);
    }
    return r;
}

/// Color-task samples only: the caption-style data of alignment stages.
inline std::vector<Sample> pairs_subset(std::span<const Sample> data) {
    std::vector<Sample> out;
    for (const auto& s : data)
        if (s.task == Task::color) out.push_back(s);
    return out;
}

// ---------------------------------------------------------------- audit

struct SnapshotDiff {
    std::set<std::string> changed;
    std::map<std::string, double> max_abs_change;
};

/// Exact bitwise comparison of every parameter group.
inline SnapshotDiff snapshot_diff(const ModelAssembly& before, const ModelAssembly& after) {
    std::vector<std::pair<std::string, const Matrix*>> lhs, rhs;
    before.for_each_group([&](const std::string& id, const Matrix& m) { lhs.emplace_back(id, &m); });
    after.for_each_group([&](const std::string& id, const Matrix& m) { rhs.emplace_back(id, &m); });
    if (lhs.size() != rhs.size()) throw InvalidArgument("snapshot_diff: assemblies have different wiring");
    SnapshotDiff d;
    for (std::size_t k = 0; k < lhs.size(); ++k) {
        const auto& [id, a] = lhs[k];
        const Matrix* b = rhs[k].second;
        if (id != rhs[k].first || !a->same_shape(*b))
            throw InvalidArgument("snapshot_diff: group mismatch at " + id + " vs " + rhs[k].first);
        double mx = 0.0;
        bool diff = false;
        for (std::size_t i = 0; i < a->data.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(a->data[i]) != std::bit_cast<std::uint64_t>(b->data[i])) diff = true;
            mx = std::max(mx, std::abs(a->data[i] - b->data[i]));
        }
        d.max_abs_change[id] = mx;
        if (diff) d.changed.insert(id);
    }
    return d;
}

// ---------------------------------------------------------------- plans

struct StageRecord {
    Stage stage;
    std::vector<double> losses;
    SnapshotDiff diff;
};

struct PlanResult {
    ModelAssembly assembly;
    std::vector<StageRecord> records;
};

/// Executes every stage in order, auditing each against its mask. Stage k
/// draws minibatches from derive_seed(seed, k). Pre-alignment stage-1 runs
/// touch disjoint groups, so running them sequentially on one assembly is
/// equivalent to running them independently and merging. `on_stage`, when
/// set, sees each record as soon as its stage finishes.
inline PlanResult run_plan(const ModelAssembly& assembly, const StagePlan& plan, std::span<const Sample> sft,
                           std::uint64_t seed, int batch = 32,
                           const std::function<void(const StageRecord&)>& on_stage = {}) {
    const auto pairs = pairs_subset(sft);
    PlanResult out{assembly, {}};
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
        const Stage& st = plan.stages[k];
        std::span<const Sample> data = st.source == DataSource::pairs ? std::span<const Sample>(pairs) : sft;
        auto r = run_stage(out.assembly, st, data, derive_seed(seed, k), batch);
        StageRecord rec{st, std::move(r.losses), snapshot_diff(out.assembly, r.assembly)};
        out.assembly = std::move(r.assembly);
        if (on_stage) on_stage(rec);
        out.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace mixlab
