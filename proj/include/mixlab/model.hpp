// SPDX-License-Identifier: Apache-2.0
//
// Full model: experts -> token normalization -> fusion -> projector -> LM stub,
// with a single forward/backward entry point used by training, evaluation and
// the end-to-end gradient checks.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/experts.hpp"
#include "mixlab/fusion.hpp"
#include "mixlab/lmstub.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab {

/// One expert as wired into a model.
struct ExpertSlot {
    ExpertSpec spec;
    /// Resolution each (tile) input is encoded at; 0 means native. For
    /// patch-linear experts a different value interpolates the position grid.
    int input_resolution = 0;
    int tiles = 1;
};

struct ModelConfig {
    std::vector<ExpertSlot> experts;
    FusionConfig fusion;
    int token_count = 64;
    int lm_dim = 32;
    int projector_hidden = 32;
    int vocab = 16;
    int n_tasks = 3;
    /// Give every expert its own projector (needed by pre-alignment and SA).
    bool expert_projectors = false;
};

struct ModelAssembly {
    std::vector<ExpertState> experts;
    std::vector<int> tiles;
    int token_count = 64;
    std::vector<ProjectorParams> expert_projectors;  // empty, or one per expert
    std::optional<ProjectorParams> fused_projector;  // absent for SA
    FusionConfig fusion;
    LMStubParams lm;

    /// Visits every parameter group with its fully qualified id:
    /// expert.<name>.*, projector.<name>.*, projector.fused.*,
    /// projector.inject.<name>.*, lm.*
    template <class F>
    void for_each_group(F&& f) { visit(*this, f); }
    template <class F>
    void for_each_group(F&& f) const { visit(*this, f); }

    std::vector<std::string> group_ids() const {
        std::vector<std::string> ids;
        for_each_group([&](const std::string& id, const Matrix&) { ids.push_back(id); });
        return ids;
    }

    /// Side of the base token grid.
    int token_side() const { return square_side(token_count); }

private:
    template <class Self, class F>
    static void visit(Self& self, F& f) {
        for (auto& e : self.experts) {
            const std::string p = "expert." + e.spec.name + ".";
            e.params.for_each_group([&](const std::string& id, auto& m) { f(p + id, m); });
        }
        for (std::size_t e = 0; e < self.expert_projectors.size(); ++e) {
            const std::string p = "projector." + self.experts[e].spec.name + ".";
            self.expert_projectors[e].for_each_group([&](const std::string& id, auto& m) { f(p + id, m); });
        }
        if (self.fused_projector)
            self.fused_projector->for_each_group([&](const std::string& id, auto& m) { f("projector.fused." + id, m); });
        for (std::size_t k = 0; k < self.fusion.params.size(); ++k) {
            const std::string p = "projector.inject." + self.experts[k + 1].spec.name + ".";
            mixlab::for_each_group(self.fusion.params[k], [&](const std::string& id, auto& m) { f(p + id, m); });
        }
        self.lm.for_each_group([&](const std::string& id, auto& m) { f("lm." + id, m); });
    }
};

/// Structural copy with every parameter zeroed; used as a gradient buffer.
inline ModelAssembly zeros_like(const ModelAssembly& a) {
    ModelAssembly z = a;
    z.for_each_group([](const std::string&, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
    return z;
}

/// Per-expert token dim after post-processing.
inline int stream_dim(const ExpertSpec& spec) {
    const int f = spec.post_process.kind == PostProcess::Kind::pixel_unshuffle ? spec.post_process.factor : 1;
    return spec.embed_dim * f * f;
}

/// Side of an injected expert's post-processed grid, given its encoder grid side.
inline int injected_side(const ExpertSpec& spec, int encoder_side, int token_side, int window) {
    switch (spec.post_process.kind) {
        case PostProcess::Kind::none: return encoder_side;
        case PostProcess::Kind::resize: return window * token_side;
        case PostProcess::Kind::pixel_unshuffle: return encoder_side / spec.post_process.factor;
    }
    return encoder_side;
}

/// Checks the wiring invariants that can be decided from configuration alone.
inline std::vector<std::string> wiring_violations(const ModelConfig& cfg) {
    std::vector<std::string> v;
    if (cfg.experts.empty()) v.emplace_back("at least one expert is required");
    std::set<std::string> names;
    for (const auto& slot : cfg.experts) {
        if (!names.insert(slot.spec.name).second) v.push_back("duplicate expert name '" + slot.spec.name + "'");
        for (const auto& s : slot.spec.violations()) v.push_back("expert " + slot.spec.name + ": " + s);
        if (slot.tiles < 1) v.push_back("expert " + slot.spec.name + ": tiles must be positive");
        if (slot.input_resolution < 0) v.push_back("expert " + slot.spec.name + ": input_resolution must be >= 0");
        const int res = slot.input_resolution ? slot.input_resolution : slot.spec.native_resolution;
        if (slot.spec.patch_or_stride > 0 && res % slot.spec.patch_or_stride != 0)
            v.push_back("expert " + slot.spec.name + ": input resolution " + std::to_string(res) +
                        " not divisible by patch/stride " + std::to_string(slot.spec.patch_or_stride));
        if (slot.spec.arch == Arch::conv_stack && slot.input_resolution && slot.input_resolution != slot.spec.native_resolution)
            v.push_back("expert " + slot.spec.name + ": conv-stack experts only accept their native resolution");
    }
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(std::max(cfg.token_count, 1)))));
    if (cfg.token_count < 1 || g * g != cfg.token_count)
        v.push_back("token_count " + std::to_string(cfg.token_count) + " is not a perfect square");
    if (cfg.lm_dim < 1 || cfg.projector_hidden < 1 || cfg.vocab < 1 || cfg.n_tasks < 1)
        v.emplace_back("lm_dim, projector_hidden, vocab and n_tasks must be positive");
    if (cfg.fusion.window < 1) v.emplace_back("fusion window must be positive");
    if (cfg.fusion.n_points < 1) v.emplace_back("fusion n_points must be positive");
    if (cfg.fusion.hidden < 1) v.emplace_back("fusion hidden must be positive");
    if (is_injection(cfg.fusion.strategy) && cfg.experts.size() < 2)
        v.push_back(std::string("fusion ") + to_string(cfg.fusion.strategy) + " needs at least two experts");
    if (!v.empty()) return v;

    for (std::size_t e = 0; e < cfg.experts.size(); ++e) {
        const auto& slot = cfg.experts[e];
        const int res = slot.input_resolution ? slot.input_resolution : slot.spec.native_resolution;
        const int side = slot.tiles * (res / slot.spec.patch_or_stride);
        if (slot.spec.post_process.kind == PostProcess::Kind::pixel_unshuffle && side % slot.spec.post_process.factor)
            v.push_back("expert " + slot.spec.name + ": grid side " + std::to_string(side) +
                        " not divisible by unshuffle factor " + std::to_string(slot.spec.post_process.factor));
        if (e == 0 || !is_injection(cfg.fusion.strategy)) continue;
        const int hi = injected_side(slot.spec, side, g, cfg.fusion.window);
        if (cfg.fusion.strategy == Strategy::MG && hi != cfg.fusion.window * g)
            v.push_back("fusion MG: expert " + slot.spec.name + " grid side " + std::to_string(hi) + " != window " +
                        std::to_string(cfg.fusion.window) + " x token grid side " + std::to_string(g));
        if (cfg.fusion.strategy == Strategy::LH && hi % g != 0)
            v.push_back("fusion LH: expert " + slot.spec.name + " grid side " + std::to_string(hi) +
                        " is not a multiple of token grid side " + std::to_string(g));
    }
    return v;
}

inline ModelAssembly build_assembly(const ModelConfig& cfg, std::uint64_t seed) {
    if (const auto v = wiring_violations(cfg); !v.empty()) {
        std::string msg = "invalid model wiring:";
        for (const auto& s : v) msg += " " + s + ";";
        throw ValidationError(msg);
    }
    ModelAssembly a;
    a.token_count = cfg.token_count;
    a.fusion = cfg.fusion;
    a.fusion.params.clear();
    for (std::size_t e = 0; e < cfg.experts.size(); ++e) {
        const auto& slot = cfg.experts[e];
        ExpertState st = build_expert(slot.spec, derive_seed(seed, 100 + e));
        if (slot.input_resolution && slot.input_resolution != slot.spec.native_resolution)
            st = interpolate_pos_embed(st, slot.input_resolution / slot.spec.patch_or_stride);
        a.experts.push_back(std::move(st));
        a.tiles.push_back(slot.tiles);
    }
    Rng rng(derive_seed(seed, 1));
    const bool sa = cfg.fusion.strategy == Strategy::SA;
    if (cfg.expert_projectors || sa)
        for (const auto& slot : cfg.experts)
            a.expert_projectors.push_back(make_projector(stream_dim(slot.spec), cfg.projector_hidden, cfg.lm_dim, rng));
    if (!sa) {
        int in = stream_dim(cfg.experts[0].spec);
        if (cfg.fusion.strategy == Strategy::CC) {
            in = 0;
            for (const auto& slot : cfg.experts) in += stream_dim(slot.spec);
        }
        a.fused_projector = make_projector(in, cfg.projector_hidden, cfg.lm_dim, rng);
    }
    if (is_injection(cfg.fusion.strategy))
        for (std::size_t e = 1; e < cfg.experts.size(); ++e)
            a.fusion.params.push_back(
                make_injection_params(cfg.fusion, stream_dim(cfg.experts[0].spec), stream_dim(cfg.experts[e].spec), rng));
    Rng lm_rng(derive_seed(seed, 2));
    a.lm = make_lm(cfg.n_tasks, cfg.lm_dim, cfg.vocab, lm_rng);
    return a;
}

/// Which sub-network a forward pass runs: the fused model, or a single expert
/// through its own projector (pre-alignment).
struct Route {
    std::optional<std::size_t> solo_expert;

    static Route full() { return {}; }
    static Route solo(std::size_t e) { return {e}; }
};

struct ExpertTrace {
    Image input;
    std::vector<EncodeCache> caches;  // one per tile
    FeatureMap encoded;
    FusionInput stream;
};

struct ForwardTrace {
    std::vector<std::size_t> active;  // expert indices in fusion order
    std::vector<ExpertTrace> experts;
    std::vector<FusionInput> fusion_inputs;
    FusionTrace fusion;
    TokenSequence fused;
    TokenSequence visual;
    std::vector<double> logits;
};

namespace detail {

inline bool uses_injection_map(const ModelAssembly& a, const Route& route, std::size_t pos) {
    return !route.solo_expert && is_injection(a.fusion.strategy) && pos > 0;
}

}  // namespace detail

/// Runs the model on one image. `trace` (optional) keeps what backward needs.
inline std::vector<double> forward(const ModelAssembly& a, const Image& image, int task, const Route& route,
                                   ForwardTrace* trace = nullptr) {
    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    tr = ForwardTrace{};
    if (route.solo_expert) {
        if (*route.solo_expert >= a.experts.size()) throw LookupError("solo route: expert index out of range");
        if (a.expert_projectors.empty()) throw ValidationError("solo route requires per-expert projectors");
        tr.active = {*route.solo_expert};
    } else {
        for (std::size_t e = 0; e < a.experts.size(); ++e) tr.active.push_back(e);
    }
    const int g = a.token_side();
    for (std::size_t pos = 0; pos < tr.active.size(); ++pos) {
        const std::size_t e = tr.active[pos];
        const auto& ex = a.experts[e];
        const int t = a.tiles[e];
        ExpertTrace et;
        et.input = resample(image, ex.accepted_resolution() * t);
        if (t == 1) {
            et.caches.resize(1);
            et.encoded = encode(ex, et.input, &et.caches[0]);
        } else {
            const auto tiles = split_tiles(et.input, t);
            et.caches.resize(tiles.size());
            std::vector<FeatureMap> grids;
            for (std::size_t k = 0; k < tiles.size(); ++k) grids.push_back(encode(ex, tiles[k], &et.caches[k]));
            et.encoded = merge_tiles(grids, t);
        }
        if (detail::uses_injection_map(a, route, pos))
            et.stream.map = apply_post_process(et.encoded, ex.spec.post_process, a.fusion.window * g);
        else
            et.stream.tokens = normalize_tokens(et.encoded, a.token_count, ex.spec.post_process);
        tr.experts.push_back(std::move(et));
    }

    if (route.solo_expert) {
        tr.fused = tr.experts[0].stream.tokens;
        tr.visual = project(tr.fused, a.expert_projectors[*route.solo_expert]);
    } else if (a.fusion.strategy == Strategy::SA) {
        for (std::size_t pos = 0; pos < tr.active.size(); ++pos)
            tr.fusion_inputs.push_back({project(tr.experts[pos].stream.tokens, a.expert_projectors[tr.active[pos]]), {}});
        tr.fused = fuse(a.fusion, tr.fusion_inputs, &tr.fusion);
        tr.visual = tr.fused;
    } else {
        for (const auto& et : tr.experts) tr.fusion_inputs.push_back(et.stream);
        tr.fused = fuse(a.fusion, tr.fusion_inputs, &tr.fusion);
        tr.visual = project(tr.fused, *a.fused_projector);
    }
    tr.logits = lm_forward(tr.visual, task, a.lm);
    return tr.logits;
}

/// Backpropagates `grad_logits` through a recorded forward pass, accumulating
/// into `grads` (a zeros_like buffer of `a`). Experts whose flag in
/// `expert_needs_grad` is false are skipped; an empty vector means all.
inline void backward(const ModelAssembly& a, const ForwardTrace& tr, int task, const Route& route,
                     std::span<const double> grad_logits, ModelAssembly& grads,
                     const std::vector<bool>& expert_needs_grad = {}) {
    const TokenSequence dvisual = lm_backward(tr.visual, task, a.lm, grad_logits, grads.lm);
    std::vector<TokenSequence> dtokens(tr.active.size());
    std::vector<FeatureMap> dmaps(tr.active.size());
    if (route.solo_expert) {
        dtokens[0] = project_backward(tr.fused, a.expert_projectors[*route.solo_expert], dvisual,
                                      grads.expert_projectors[*route.solo_expert]);
    } else {
        TokenSequence dfused = dvisual;
        if (a.fused_projector) dfused = project_backward(tr.fused, *a.fused_projector, dvisual, *grads.fused_projector);
        auto fg = fuse_backward(a.fusion, tr.fusion_inputs, tr.fusion, dfused);
        for (std::size_t k = 0; k < fg.params.size(); ++k) accumulate(grads.fusion.params[k], fg.params[k]);
        for (std::size_t pos = 0; pos < tr.active.size(); ++pos) {
            const std::size_t e = tr.active[pos];
            if (a.fusion.strategy == Strategy::SA)
                dtokens[pos] = project_backward(tr.experts[pos].stream.tokens, a.expert_projectors[e], fg.tokens[pos],
                                                grads.expert_projectors[e]);
            else if (detail::uses_injection_map(a, route, pos))
                dmaps[pos] = std::move(fg.maps[pos]);
            else
                dtokens[pos] = std::move(fg.tokens[pos]);
        }
    }

    for (std::size_t pos = 0; pos < tr.active.size(); ++pos) {
        const std::size_t e = tr.active[pos];
        if (!expert_needs_grad.empty() && !expert_needs_grad[e]) continue;
        const auto& ex = a.experts[e];
        const auto& et = tr.experts[pos];
        const FeatureMap& enc = et.encoded;
        FeatureMap denc;
        if (detail::uses_injection_map(a, route, pos))
            denc = apply_post_process_backward(enc.height, enc.width, ex.spec.post_process, dmaps[pos]);
        else
            denc = normalize_tokens_backward(enc.height, enc.width, enc.channels, a.token_count, ex.spec.post_process,
                                             dtokens[pos]);
        const int t = a.tiles[e];
        if (t == 1) {
            encode_backward(ex, et.caches[0], denc, grads.experts[e].params);
        } else {
            const auto parts = split_map_tiles(denc, t);
            for (std::size_t k = 0; k < parts.size(); ++k)
                encode_backward(ex, et.caches[k], parts[k], grads.experts[e].params);
        }
    }
}

/// Loss of one labelled image; accumulates gradients when `grads` is given.
inline double sample_loss(const ModelAssembly& a, const Image& image, int task, int answer, const Route& route,
                          ModelAssembly* grads = nullptr, const std::vector<bool>& expert_needs_grad = {}) {
    ForwardTrace tr;
    const auto logits = forward(a, image, task, route, grads ? &tr : nullptr);
    const double l = loss(logits, answer);
    if (grads) {
        const auto gl = loss_grad(logits, answer);
        backward(a, tr, task, route, gl, *grads, expert_needs_grad);
    }
    return l;
}

}  // namespace mixlab
