// SPDX-License-Identifier: Apache-2.0
//
// Built-in gradient-check problems for every differentiable op, from single
// kernels up to whole-model chains for each fusion strategy.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mixlab/experts.hpp"
#include "mixlab/fusion.hpp"
#include "mixlab/gradcheck.hpp"
#include "mixlab/lmstub.hpp"
#include "mixlab/model.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab {

namespace gradops {

/// Random objective weights for an output of `n` entries.
inline std::vector<double> probe(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    fill_uniform(w, rng);
    return w;
}

inline GradProblem linear(std::uint64_t seed) {
    struct S {
        Matrix w{4, 5};
        std::vector<double> x = std::vector<double>(5), probe;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->w.data, rng);
    fill_uniform(s->x, rng);
    s->probe = probe(rng, 4);
    GradProblem p;
    p.state = s;
    p.tensors = {{"w", s->w.data}, {"x", s->x}};
    p.value = [s] {
        std::vector<double> y(4);
        gemv_acc(s->w, s->x, y);
        return weighted_sum(y, s->probe);
    };
    p.gradient = [s] {
        Matrix gw(4, 5);
        ger_acc(gw, s->probe, s->x);
        std::vector<double> gx(5);
        gemv_t_acc(s->w, s->probe, gx);
        return std::vector<std::vector<double>>{gw.data, gx};
    };
    return p;
}

inline GradProblem resize(std::uint64_t seed) {
    struct S {
        FeatureMap map{3, 6, 2};
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->map.data, rng);
    s->probe = probe(rng, 5 * 4 * 2);
    GradProblem p;
    p.state = s;
    p.tensors = {{"map", s->map.data}};
    p.value = [s] { return weighted_sum(bilinear_resize(s->map, 5, 4).data, s->probe); };
    p.gradient = [s] {
        FeatureMap g(5, 4, 2);
        g.data = s->probe;
        return std::vector<std::vector<double>>{bilinear_resize_backward(g, 3, 6).data};
    };
    return p;
}

inline GradProblem sample(std::uint64_t seed) {
    struct S {
        FeatureMap map{4, 5, 2};
        std::vector<double> coords;
        std::vector<double> probe;
        std::vector<GridPoint> points() const {
            std::vector<GridPoint> pts;
            for (std::size_t i = 0; i + 1 < coords.size(); i += 2) pts.push_back({coords[i], coords[i + 1]});
            return pts;
        }
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->map.data, rng);
    // Fractional parts kept away from cell edges so no probe straddles a kink;
    // the last point sits outside the grid to exercise clamping.
    for (int i = 0; i < 5; ++i) {
        s->coords.push_back(static_cast<double>(rng.below(3)) + rng.uniform(0.15, 0.85));
        s->coords.push_back(static_cast<double>(rng.below(4)) + rng.uniform(0.15, 0.85));
    }
    s->coords.push_back(-1.5);
    s->coords.push_back(2.0 + rng.uniform(0.15, 0.85));
    s->probe = probe(rng, 6 * 2);
    GradProblem p;
    p.state = s;
    p.tensors = {{"map", s->map.data}, {"points", s->coords}};
    p.value = [s] { return weighted_sum(bilinear_sample(s->map, s->points()).data, s->probe); };
    p.gradient = [s] {
        const auto pts = s->points();
        Matrix g(static_cast<int>(pts.size()), 2);
        g.data = s->probe;
        FeatureMap gm(4, 5, 2);
        std::vector<GridPoint> gp(pts.size());
        bilinear_sample_backward(s->map, pts, g, gm, gp);
        std::vector<double> gc;
        for (const auto& q : gp) {
            gc.push_back(q.row);
            gc.push_back(q.col);
        }
        return std::vector<std::vector<double>>{gm.data, gc};
    };
    return p;
}

inline GradProblem shuffle(std::uint64_t seed, ShuffleDirection dir) {
    struct S {
        FeatureMap map;
        std::vector<double> probe;
        ShuffleDirection dir;
    };
    auto s = std::make_shared<S>();
    s->dir = dir;
    s->map = dir == ShuffleDirection::shuffle ? FeatureMap(2, 3, 8) : FeatureMap(4, 6, 2);
    Rng rng(seed);
    fill_uniform(s->map.data, rng);
    s->probe = probe(rng, s->map.data.size());
    GradProblem p;
    p.state = s;
    p.tensors = {{"map", s->map.data}};
    p.value = [s] { return weighted_sum(pixel_shuffle(s->map, 2, s->dir).data, s->probe); };
    p.gradient = [s] {
        FeatureMap g = pixel_shuffle(s->map, 2, s->dir);
        g.data = s->probe;
        return std::vector<std::vector<double>>{pixel_shuffle_backward(g, 2, s->dir).data};
    };
    return p;
}

inline GradProblem normalize(std::uint64_t seed, PostProcess post) {
    struct S {
        FeatureMap map{6, 6, 2};
        PostProcess post;
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    s->post = post;
    Rng rng(seed);
    fill_uniform(s->map.data, rng);
    const int out_c = post.kind == PostProcess::Kind::pixel_unshuffle ? 2 * post.factor * post.factor : 2;
    s->probe = probe(rng, static_cast<std::size_t>(16 * out_c));
    GradProblem p;
    p.state = s;
    p.tensors = {{"map", s->map.data}};
    p.value = [s] { return weighted_sum(normalize_tokens(s->map, 16, s->post).data, s->probe); };
    p.gradient = [s, out_c] {
        TokenSequence g(16, out_c);
        g.data = s->probe;
        return std::vector<std::vector<double>>{normalize_tokens_backward(6, 6, 2, 16, s->post, g).data};
    };
    return p;
}

inline GradProblem encoder(std::uint64_t seed, Arch arch) {
    struct S {
        ExpertState expert;
        Image image;
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    ExpertSpec spec;
    spec.name = "x";
    spec.arch = arch;
    spec.embed_dim = 4;
    if (arch == Arch::patch_linear) {
        spec.native_resolution = 8;
        spec.patch_or_stride = 4;
        spec.depth = 2;
    } else {
        spec.native_resolution = 16;
        spec.patch_or_stride = 4;
        spec.depth = 2;
    }
    s->expert = build_expert(spec, derive_seed(seed, 1));
    Rng rng(seed);
    // Scale parameters up so the tanh nonlinearities are exercised away from
    // their linear regime.
    s->expert.params.for_each_group([&](const std::string&, Matrix& m) {
        for (double& v : m.data) v *= 2.0;
    });
    s->image = Image(spec.native_resolution);
    for (double& v : s->image.data) v = rng.uniform();
    const int side = spec.native_resolution / spec.patch_or_stride;
    s->probe = probe(rng, static_cast<std::size_t>(side * side * spec.embed_dim));
    GradProblem p;
    p.state = s;
    s->expert.params.for_each_group(
        [&](const std::string& id, Matrix& m) { p.tensors.push_back({id, m.data}); });
    p.tensors.push_back({"image", s->image.data});
    p.value = [s] { return weighted_sum(encode(s->expert, s->image).data, s->probe); };
    p.gradient = [s] {
        EncodeCache cache;
        FeatureMap out = encode(s->expert, s->image, &cache);
        out.data = s->probe;
        ExpertParams g = zeros_like(s->expert.params);
        FeatureMap gi;
        encode_backward(s->expert, cache, out, g, &gi);
        std::vector<std::vector<double>> r;
        g.for_each_group([&](const std::string&, const Matrix& m) { r.push_back(m.data); });
        r.push_back(gi.data);
        return r;
    };
    return p;
}

inline GradProblem two_stream(std::uint64_t seed, Strategy strategy) {
    struct S {
        std::vector<TokenSequence> seqs;
        std::vector<double> probe;
        Strategy strategy;
        TokenSequence fused() const {
            return strategy == Strategy::SA ? fuse_sequence_append(seqs) : fuse_channel_concat(seqs);
        }
    };
    auto s = std::make_shared<S>();
    s->strategy = strategy;
    if (strategy == Strategy::SA)
        s->seqs = {TokenSequence(3, 4), TokenSequence(5, 4)};
    else
        s->seqs = {TokenSequence(4, 3), TokenSequence(4, 5)};
    Rng rng(seed);
    for (auto& q : s->seqs) fill_uniform(q.data, rng);
    s->probe = probe(rng, s->fused().data.size());
    GradProblem p;
    p.state = s;
    p.tensors = {{"stream0", s->seqs[0].data}, {"stream1", s->seqs[1].data}};
    p.value = [s] { return weighted_sum(s->fused().data, s->probe); };
    p.gradient = [s] {
        TokenSequence g = s->fused();
        g.data = s->probe;
        std::vector<int> sizes;
        for (const auto& q : s->seqs) sizes.push_back(s->strategy == Strategy::SA ? q.length : q.dim);
        const auto parts = s->strategy == Strategy::SA ? fuse_sequence_append_backward(sizes, g)
                                                       : fuse_channel_concat_backward(sizes, g);
        return std::vector<std::vector<double>>{parts[0].data, parts[1].data};
    };
    return p;
}

inline GradProblem injection(std::uint64_t seed, Strategy strategy) {
    struct S {
        FusionConfig cfg;
        TokenSequence lo;
        FeatureMap hi;
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    s->cfg.strategy = strategy;
    s->cfg.hidden = 5;
    s->cfg.n_points = 3;
    s->cfg.window = 2;
    const int n = strategy == Strategy::DA ? 3 : 2;
    const int d_lo = 3;
    const int d_hi = 4;
    s->lo = TokenSequence(n * n, d_lo);
    s->hi = FeatureMap(2 * n, 2 * n, d_hi);
    Rng rng(seed);
    fill_uniform(s->lo.data, rng);
    fill_uniform(s->hi.data, rng);
    s->cfg.params.push_back(make_injection_params(s->cfg, d_lo, d_hi, rng));
    for_each_group(s->cfg.params[0], [&](const std::string&, Matrix& m) {
        for (double& v : m.data) v *= 2.0;
    });
    s->probe = probe(rng, s->lo.data.size());
    GradProblem p;
    p.state = s;
    p.tensors = {{"lo", s->lo.data}, {"hi", s->hi.data}};
    for_each_group(s->cfg.params[0], [&](const std::string& id, Matrix& m) { p.tensors.push_back({id, m.data}); });
    p.value = [s] { return weighted_sum(inject(s->cfg, s->lo, s->hi, s->cfg.params[0]).data, s->probe); };
    p.gradient = [s] {
        TokenSequence g(s->lo.length, s->lo.dim);
        g.data = s->probe;
        auto r = inject_backward(s->cfg, s->lo, s->hi, s->cfg.params[0], g);
        std::vector<std::vector<double>> out{r.lo.data, r.hi.data};
        for_each_group(r.params, [&](const std::string&, const Matrix& m) { out.push_back(m.data); });
        return out;
    };
    return p;
}

inline GradProblem projector(std::uint64_t seed) {
    struct S {
        TokenSequence tokens{5, 4};
        ProjectorParams proj;
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->tokens.data, rng);
    s->proj = make_projector(4, 6, 3, rng);
    s->probe = probe(rng, 5 * 3);
    GradProblem p;
    p.state = s;
    p.tensors = {{"tokens", s->tokens.data}, {"w1", s->proj.w1.data}, {"w2", s->proj.w2.data}};
    p.value = [s] { return weighted_sum(project(s->tokens, s->proj).data, s->probe); };
    p.gradient = [s] {
        TokenSequence g(5, 3);
        g.data = s->probe;
        ProjectorParams gp = zeros_like(s->proj);
        const auto gin = project_backward(s->tokens, s->proj, g, gp);
        return std::vector<std::vector<double>>{gin.data, gp.w1.data, gp.w2.data};
    };
    return p;
}

inline GradProblem lm(std::uint64_t seed) {
    struct S {
        TokenSequence visual{5, 3};
        LMStubParams lm;
        std::vector<double> probe;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->visual.data, rng);
    s->lm = make_lm(2, 3, 4, rng);
    s->probe = probe(rng, 4);
    GradProblem p;
    p.state = s;
    p.tensors = {{"visual", s->visual.data}, {"task_embed", s->lm.task_embed.data}, {"head", s->lm.head.data}};
    p.value = [s] { return weighted_sum(lm_forward(s->visual, 1, s->lm), s->probe); };
    p.gradient = [s] {
        LMStubParams g = zeros_like(s->lm);
        const auto gv = lm_backward(s->visual, 1, s->lm, s->probe, g);
        return std::vector<std::vector<double>>{gv.data, g.task_embed.data, g.head.data};
    };
    return p;
}

inline GradProblem ce_loss(std::uint64_t seed) {
    struct S {
        std::vector<double> logits = std::vector<double>(6);
        int answer = 0;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    fill_uniform(s->logits, rng, 3.0);
    s->answer = static_cast<int>(rng.below(6));
    GradProblem p;
    p.state = s;
    p.tensors = {{"logits", s->logits}};
    p.value = [s] { return loss(s->logits, s->answer); };
    p.gradient = [s] { return std::vector<std::vector<double>>{loss_grad(s->logits, s->answer)}; };
    return p;
}

/// Small two-expert model used by the end-to-end chains.
inline ModelConfig chain_config(Strategy strategy, bool solo) {
    ExpertSpec lo;
    lo.name = "lo";
    lo.arch = Arch::patch_linear;
    lo.native_resolution = 16;
    lo.patch_or_stride = 4;
    lo.embed_dim = 4;
    lo.depth = 1;
    ExpertSpec hi;
    hi.name = "hi";
    hi.arch = Arch::conv_stack;
    hi.native_resolution = 32;
    hi.patch_or_stride = 4;
    hi.embed_dim = 3;
    hi.depth = 2;
    ModelConfig cfg;
    cfg.experts = {{lo, 0, 1}, {hi, 0, 1}};
    cfg.fusion.strategy = strategy;
    cfg.fusion.hidden = 4;
    cfg.fusion.n_points = 2;
    cfg.fusion.window = 2;
    cfg.token_count = 16;
    cfg.lm_dim = 4;
    cfg.projector_hidden = 5;
    cfg.vocab = 5;
    cfg.n_tasks = 3;
    cfg.expert_projectors = solo;
    return cfg;
}

inline GradProblem chain(std::uint64_t seed, Strategy strategy, bool solo) {
    struct S {
        ModelAssembly a;
        Image image{32};
        int task = 0;
        int answer = 0;
        Route route;
    };
    auto s = std::make_shared<S>();
    s->a = build_assembly(chain_config(strategy, solo), derive_seed(seed, 1));
    s->a.for_each_group([](const std::string&, Matrix& m) {
        for (double& v : m.data) v *= 2.0;
    });
    Rng rng(seed);
    for (double& v : s->image.data) v = rng.uniform();
    s->task = static_cast<int>(rng.below(3));
    s->answer = static_cast<int>(rng.below(5));
    s->route = solo ? Route::solo(1) : Route::full();
    GradProblem p;
    p.state = s;
    s->a.for_each_group([&](const std::string& id, Matrix& m) { p.tensors.push_back({id, m.data}); });
    p.value = [s] { return sample_loss(s->a, s->image, s->task, s->answer, s->route); };
    p.gradient = [s] {
        ModelAssembly g = zeros_like(s->a);
        sample_loss(s->a, s->image, s->task, s->answer, s->route, &g);
        std::vector<std::vector<double>> r;
        g.for_each_group([&](const std::string&, const Matrix& m) { r.push_back(m.data); });
        return r;
    };
    return p;
}

}  // namespace gradops

/// Every built-in differentiable op.
inline GradRegistry default_grad_registry() {
    GradRegistry r;
    r.add("linear", gradops::linear);
    r.add("bilinear_resize", gradops::resize);
    r.add("bilinear_sample", gradops::sample);
    r.add("pixel_shuffle", [](std::uint64_t s) { return gradops::shuffle(s, ShuffleDirection::shuffle); });
    r.add("pixel_unshuffle", [](std::uint64_t s) { return gradops::shuffle(s, ShuffleDirection::unshuffle); });
    r.add("normalize_tokens_resize",
          [](std::uint64_t s) { return gradops::normalize(s, {PostProcess::Kind::resize, 1}); });
    r.add("normalize_tokens_unshuffle",
          [](std::uint64_t s) { return gradops::normalize(s, {PostProcess::Kind::pixel_unshuffle, 2}); });
    r.add("encode_patch_linear", [](std::uint64_t s) { return gradops::encoder(s, Arch::patch_linear); });
    r.add("encode_conv_stack", [](std::uint64_t s) { return gradops::encoder(s, Arch::conv_stack); });
    r.add("fuse_sequence_append", [](std::uint64_t s) { return gradops::two_stream(s, Strategy::SA); });
    r.add("fuse_channel_concat", [](std::uint64_t s) { return gradops::two_stream(s, Strategy::CC); });
    r.add("fuse_llava_hr", [](std::uint64_t s) { return gradops::injection(s, Strategy::LH); });
    r.add("fuse_mini_gemini", [](std::uint64_t s) { return gradops::injection(s, Strategy::MG); });
    r.add("fuse_deformable", [](std::uint64_t s) { return gradops::injection(s, Strategy::DA); });
    r.add("project", gradops::projector);
    r.add("lm_forward", gradops::lm);
    r.add("loss", gradops::ce_loss);
    for (Strategy st : {Strategy::SA, Strategy::CC, Strategy::LH, Strategy::MG, Strategy::DA})
        r.add(std::string("chain_") + to_string(st), [st](std::uint64_t s) { return gradops::chain(s, st, false); });
    r.add("chain_solo", [](std::uint64_t s) { return gradops::chain(s, Strategy::CC, true); });
    return r;
}

}  // namespace mixlab
