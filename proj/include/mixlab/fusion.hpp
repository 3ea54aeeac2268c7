// SPDX-License-Identifier: Apache-2.0
//
// Five ways of merging per-expert outputs into one visual token stream:
// sequence append (SA), channel concatenation (CC), and three injection
// strategies that write high-resolution features into a low-resolution base
// stream: mixture-of-resolution adapter (LH), co-located window
// cross-attention (MG) and deformable attention (DA).

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/linalg.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab {

enum class Strategy { SA, CC, LH, MG, DA };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::SA: return "SA";
        case Strategy::CC: return "CC";
        case Strategy::LH: return "LH";
        case Strategy::MG: return "MG";
        case Strategy::DA: return "DA";
    }
    return "?";
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "SA") return Strategy::SA;
    if (s == "CC") return Strategy::CC;
    if (s == "LH") return Strategy::LH;
    if (s == "MG") return Strategy::MG;
    if (s == "DA") return Strategy::DA;
    throw InvalidArgument("unknown fusion strategy '" + s + "' (expected SA, CC, LH, MG or DA)");
}

inline bool is_injection(Strategy s) { return s == Strategy::LH || s == Strategy::MG || s == Strategy::DA; }

struct LlavaHrParams {
    Matrix w1;  // hidden x D_hi
    Matrix w2;  // D_lo x hidden
};

struct MiniGeminiParams {
    Matrix wq;  // hidden x D_lo
    Matrix wk;  // hidden x D_hi
    Matrix wv;  // hidden x D_hi
    Matrix wo;  // D_lo x hidden
};

struct DeformableParams {
    Matrix w_off;   // 2K x D_lo, rows (d_row_k, d_col_k)
    Matrix w_attn;  // K x D_lo
    Matrix wo;      // D_lo x D_hi
};

using InjectionParams = std::variant<LlavaHrParams, MiniGeminiParams, DeformableParams>;

template <class P, class F>
void for_each_group(P& params, F&& f) {
    std::visit(
        [&](auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, LlavaHrParams>) {
                f(std::string("w1"), p.w1);
                f(std::string("w2"), p.w2);
            } else if constexpr (std::is_same_v<T, MiniGeminiParams>) {
                f(std::string("wq"), p.wq);
                f(std::string("wk"), p.wk);
                f(std::string("wv"), p.wv);
                f(std::string("wo"), p.wo);
            } else {
                f(std::string("w_off"), p.w_off);
                f(std::string("w_attn"), p.w_attn);
                f(std::string("wo"), p.wo);
            }
        },
        params);
}

inline InjectionParams zeros_like(const InjectionParams& p) {
    InjectionParams z = p;
    for_each_group(z, [](const std::string&, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
    return z;
}

/// dst += src, group by group.
inline void accumulate(InjectionParams& dst, const InjectionParams& src) {
    std::vector<const Matrix*> from;
    for_each_group(src, [&](const std::string&, const Matrix& m) { from.push_back(&m); });
    std::size_t i = 0;
    for_each_group(dst, [&](const std::string&, Matrix& m) { axpy(1.0, from[i++]->data, m.data); });
}

struct FusionConfig {
    Strategy strategy = Strategy::CC;
    int window = 2;    // MG window side (hi side = window * lo side)
    int n_points = 4;  // DA sampling points per query
    int hidden = 16;   // width of the learned LH/MG sub-maps
    /// One entry per injected expert (experts 1..n-1), injection strategies only.
    std::vector<InjectionParams> params;
};

/// Seeded U[-1/sqrt(fan_in), 1/sqrt(fan_in)] init of one injection adapter.
inline InjectionParams make_injection_params(const FusionConfig& cfg, int d_lo, int d_hi, Rng& rng) {
    switch (cfg.strategy) {
        case Strategy::LH: {
            LlavaHrParams p{Matrix(cfg.hidden, d_hi), Matrix(d_lo, cfg.hidden)};
            init_uniform(p.w1, d_hi, rng);
            init_uniform(p.w2, cfg.hidden, rng);
            return p;
        }
        case Strategy::MG: {
            MiniGeminiParams p{Matrix(cfg.hidden, d_lo), Matrix(cfg.hidden, d_hi), Matrix(cfg.hidden, d_hi),
                               Matrix(d_lo, cfg.hidden)};
            init_uniform(p.wq, d_lo, rng);
            init_uniform(p.wk, d_hi, rng);
            init_uniform(p.wv, d_hi, rng);
            init_uniform(p.wo, cfg.hidden, rng);
            return p;
        }
        case Strategy::DA: {
            if (cfg.n_points < 1) throw InvalidArgument("DA requires n_points >= 1");
            DeformableParams p{Matrix(2 * cfg.n_points, d_lo), Matrix(cfg.n_points, d_lo), Matrix(d_lo, d_hi)};
            init_uniform(p.w_off, d_lo, rng);
            init_uniform(p.w_attn, d_lo, rng);
            init_uniform(p.wo, d_hi, rng);
            return p;
        }
        default: throw InvalidArgument("strategy has no injection parameters");
    }
}

// ---------------------------------------------------------------- SA / CC

inline TokenSequence fuse_sequence_append(std::span<const TokenSequence> seqs) {
    if (seqs.empty()) throw InvalidArgument("sequence append: no inputs");
    const int dim = seqs[0].dim;
    int total = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i].dim != dim)
            throw InvalidArgument("sequence append: expert " + std::to_string(i) + " has dim " +
                                  std::to_string(seqs[i].dim) + ", expected " + std::to_string(dim));
        total += seqs[i].length;
    }
    TokenSequence out(total, dim);
    auto it = out.data.begin();
    for (const auto& s : seqs) it = std::copy(s.data.begin(), s.data.end(), it);
    return out;
}

inline std::vector<TokenSequence> fuse_sequence_append_backward(std::span<const int> lengths, const TokenSequence& grad) {
    std::vector<TokenSequence> out;
    auto it = grad.data.begin();
    for (int len : lengths) {
        TokenSequence g(len, grad.dim);
        std::copy(it, it + static_cast<std::ptrdiff_t>(g.data.size()), g.data.begin());
        it += static_cast<std::ptrdiff_t>(g.data.size());
        out.push_back(std::move(g));
    }
    return out;
}

inline TokenSequence fuse_channel_concat(std::span<const TokenSequence> seqs) {
    if (seqs.empty()) throw InvalidArgument("channel concat: no inputs");
    const int len = seqs[0].length;
    int dim = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i].length != len)
            throw InvalidArgument("channel concat: expert " + std::to_string(i) + " has " +
                                  std::to_string(seqs[i].length) + " tokens, expected " + std::to_string(len));
        dim += seqs[i].dim;
    }
    TokenSequence out(len, dim);
    for (int t = 0; t < len; ++t) {
        auto dst = out.token(t).begin();
        for (const auto& s : seqs) dst = std::copy(s.token(t).begin(), s.token(t).end(), dst);
    }
    return out;
}

inline std::vector<TokenSequence> fuse_channel_concat_backward(std::span<const int> dims, const TokenSequence& grad) {
    std::vector<TokenSequence> out;
    for (int d : dims) out.emplace_back(grad.length, d);
    for (int t = 0; t < grad.length; ++t) {
        auto src = grad.token(t).begin();
        for (auto& g : out) {
            std::copy(src, src + g.dim, g.token(t).begin());
            src += g.dim;
        }
    }
    return out;
}

// ---------------------------------------------------------------- injection

/// Gradients of one injection step.
struct InjectionGrads {
    TokenSequence lo;
    FeatureMap hi;
    InjectionParams params;
};

namespace detail {

inline int window_ratio(int lo_side, const FeatureMap& hi, const char* who) {
    if (hi.height != hi.width) throw InvalidArgument(std::string(who) + ": high-res map must be square");
    if (hi.height % lo_side != 0)
        throw InvalidArgument(std::string(who) + ": high-res side " + std::to_string(hi.height) +
                              " is not an integer multiple of low-res side " + std::to_string(lo_side));
    return hi.height / lo_side;
}

}  // namespace detail

/// Average of each w x w high-res window co-located with a low-res cell.
inline FeatureMap window_average(const FeatureMap& hi, int lo_side) {
    const int w = detail::window_ratio(lo_side, hi, "window_average");
    FeatureMap out(lo_side, lo_side, hi.channels);
    const double inv = 1.0 / (w * w);
    for (int i = 0; i < lo_side; ++i)
        for (int j = 0; j < lo_side; ++j) {
            auto o = out.cell(i, j);
            for (int dy = 0; dy < w; ++dy)
                for (int dx = 0; dx < w; ++dx) axpy(inv, hi.cell(i * w + dy, j * w + dx), o);
        }
    return out;
}

/// LH: token += W2 tanh(W1 avgpool(hi window)).
inline TokenSequence fuse_llava_hr(const TokenSequence& lo, const FeatureMap& hi, const LlavaHrParams& p) {
    const FeatureMap base = as_grid(lo);
    const FeatureMap pooled = window_average(hi, base.height);
    TokenSequence out = lo;
    std::vector<double> h(p.w1.rows);
    for (int t = 0; t < lo.length; ++t) {
        std::fill(h.begin(), h.end(), 0.0);
        gemv_acc(p.w1, pooled.cell(t / base.width, t % base.width), h);
        for (double& v : h) v = std::tanh(v);
        gemv_acc(p.w2, h, out.token(t));
    }
    return out;
}

inline InjectionGrads fuse_llava_hr_backward(const TokenSequence& lo, const FeatureMap& hi, const LlavaHrParams& p,
                                             const TokenSequence& grad) {
    const int n = as_grid(lo).height;
    const int w = detail::window_ratio(n, hi, "LH");
    const FeatureMap pooled = window_average(hi, n);
    LlavaHrParams gp{zeros_like(p.w1), zeros_like(p.w2)};
    FeatureMap ghi(hi.height, hi.width, hi.channels);
    std::vector<double> h(p.w1.rows), u(p.w1.rows), dpool(hi.channels);
    const double inv = 1.0 / (w * w);
    for (int t = 0; t < lo.length; ++t) {
        const int i = t / n;
        const int j = t % n;
        const auto pool = pooled.cell(i, j);
        std::fill(h.begin(), h.end(), 0.0);
        gemv_acc(p.w1, pool, h);
        for (double& v : h) v = std::tanh(v);
        const auto g = grad.token(t);
        ger_acc(gp.w2, g, h);
        std::fill(u.begin(), u.end(), 0.0);
        gemv_t_acc(p.w2, g, u);
        for (std::size_t k = 0; k < u.size(); ++k) u[k] *= 1.0 - h[k] * h[k];
        ger_acc(gp.w1, u, pool);
        std::fill(dpool.begin(), dpool.end(), 0.0);
        gemv_t_acc(p.w1, u, dpool);
        for (int dy = 0; dy < w; ++dy)
            for (int dx = 0; dx < w; ++dx) axpy(inv, dpool, ghi.cell(i * w + dy, j * w + dx));
    }
    return {grad, std::move(ghi), std::move(gp)};
}

/// MG attention weights, one row of window^2 entries per low-res query.
inline Matrix mini_gemini_attention(const TokenSequence& lo, const FeatureMap& hi, const MiniGeminiParams& p,
                                    int window) {
    const int n = as_grid(lo).height;
    if (hi.height != window * n || hi.width != window * n)
        throw InvalidArgument("MG: high-res side " + std::to_string(hi.height) + " != window " +
                              std::to_string(window) + " x low-res side " + std::to_string(n));
    const int dk = p.wq.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix attn(lo.length, window * window);
    std::vector<double> q(dk), k(dk);
    for (int t = 0; t < lo.length; ++t) {
        const int i = t / n;
        const int j = t % n;
        std::fill(q.begin(), q.end(), 0.0);
        gemv_acc(p.wq, lo.token(t), q);
        auto row = attn.row(t);
        double mx = -INFINITY;
        for (int s = 0; s < window * window; ++s) {
            std::fill(k.begin(), k.end(), 0.0);
            gemv_acc(p.wk, hi.cell(i * window + s / window, j * window + s % window), k);
            row[s] = dot(q, k) * scale;
            mx = std::max(mx, row[s]);
        }
        double z = 0.0;
        for (double& v : row) z += (v = std::exp(v - mx));
        for (double& v : row) v /= z;
    }
    return attn;
}

/// MG: token += Wo * sum_s softmax(q Wq . Wk hi_s / sqrt(d))_s Wv hi_s over the co-located window.
inline TokenSequence fuse_mini_gemini(const TokenSequence& lo, const FeatureMap& hi, const MiniGeminiParams& p,
                                      int window) {
    const int n = as_grid(lo).height;
    const Matrix attn = mini_gemini_attention(lo, hi, p, window);
    TokenSequence out = lo;
    std::vector<double> ctx(p.wv.rows);
    for (int t = 0; t < lo.length; ++t) {
        const int i = t / n;
        const int j = t % n;
        std::fill(ctx.begin(), ctx.end(), 0.0);
        std::vector<double> v(p.wv.rows);
        for (int s = 0; s < window * window; ++s) {
            std::fill(v.begin(), v.end(), 0.0);
            gemv_acc(p.wv, hi.cell(i * window + s / window, j * window + s % window), v);
            axpy(attn(t, s), v, ctx);
        }
        gemv_acc(p.wo, ctx, out.token(t));
    }
    return out;
}

inline InjectionGrads fuse_mini_gemini_backward(const TokenSequence& lo, const FeatureMap& hi,
                                                const MiniGeminiParams& p, int window, const TokenSequence& grad) {
    const int n = as_grid(lo).height;
    const int ws = window * window;
    const int dk = p.wq.rows;
    const int dv = p.wv.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const Matrix attn = mini_gemini_attention(lo, hi, p, window);
    MiniGeminiParams gp{zeros_like(p.wq), zeros_like(p.wk), zeros_like(p.wv), zeros_like(p.wo)};
    TokenSequence glo = grad;
    FeatureMap ghi(hi.height, hi.width, hi.channels);
    Matrix keys(ws, dk), vals(ws, dv);
    std::vector<double> q(dk), ctx(dv), dctx(dv), da(ws), dq(dk), tmp(dk);
    for (int t = 0; t < lo.length; ++t) {
        const int i = t / n;
        const int j = t % n;
        auto cell = [&](int s) { return hi.cell(i * window + s / window, j * window + s % window); };
        auto gcell = [&](int s) { return ghi.cell(i * window + s / window, j * window + s % window); };
        std::fill(q.begin(), q.end(), 0.0);
        gemv_acc(p.wq, lo.token(t), q);
        std::fill(keys.data.begin(), keys.data.end(), 0.0);
        std::fill(vals.data.begin(), vals.data.end(), 0.0);
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int s = 0; s < ws; ++s) {
            gemv_acc(p.wk, cell(s), keys.row(s));
            gemv_acc(p.wv, cell(s), vals.row(s));
            axpy(attn(t, s), vals.row(s), ctx);
        }
        const auto g = grad.token(t);
        ger_acc(gp.wo, g, ctx);
        std::fill(dctx.begin(), dctx.end(), 0.0);
        gemv_t_acc(p.wo, g, dctx);
        double weighted = 0.0;
        for (int s = 0; s < ws; ++s) {
            da[s] = dot(dctx, vals.row(s));
            weighted += attn(t, s) * da[s];
        }
        std::fill(dq.begin(), dq.end(), 0.0);
        for (int s = 0; s < ws; ++s) {
            const double a = attn(t, s);
            const double dscore = a * (da[s] - weighted) * scale;
            axpy(dscore, keys.row(s), dq);
            // d key_s = dscore * q ; d val_s = a * dctx
            for (int c = 0; c < dk; ++c) tmp[c] = dscore * q[c];
            ger_acc(gp.wk, tmp, cell(s));
            gemv_t_acc(p.wk, tmp, gcell(s));
            std::vector<double> dval(dctx);
            for (double& v : dval) v *= a;
            ger_acc(gp.wv, dval, cell(s));
            gemv_t_acc(p.wv, dval, gcell(s));
        }
        ger_acc(gp.wq, dq, lo.token(t));
        gemv_t_acc(p.wq, dq, glo.token(t));
    }
    return {std::move(glo), std::move(ghi), std::move(gp)};
}

/// Centre of the high-res region co-located with low-res cell (i, j).
inline GridPoint deformable_reference(int i, int j, int lo_side, const FeatureMap& hi) {
    const double sy = static_cast<double>(hi.height) / lo_side;
    const double sx = static_cast<double>(hi.width) / lo_side;
    return {(i + 0.5) * sy - 0.5, (j + 0.5) * sx - 0.5};
}

namespace detail {

struct DeformableQuery {
    std::vector<GridPoint> points;
    std::vector<double> weights;  // softmax over points
    Matrix values;                // K x D_hi
};

inline DeformableQuery deformable_query(const TokenSequence& lo, int t, int n, const FeatureMap& hi,
                                        const DeformableParams& p) {
    const int k = p.w_attn.rows;
    DeformableQuery dq;
    std::vector<double> off(2 * k);
    gemv_acc(p.w_off, lo.token(t), off);
    const GridPoint ref = deformable_reference(t / n, t % n, n, hi);
    for (int s = 0; s < k; ++s) dq.points.push_back({ref.row + off[2 * s], ref.col + off[2 * s + 1]});
    dq.weights.assign(k, 0.0);
    gemv_acc(p.w_attn, lo.token(t), dq.weights);
    const double mx = *std::max_element(dq.weights.begin(), dq.weights.end());
    double z = 0.0;
    for (double& v : dq.weights) z += (v = std::exp(v - mx));
    for (double& v : dq.weights) v /= z;
    dq.values = bilinear_sample(hi, dq.points);
    return dq;
}

}  // namespace detail

/// DA: token += Wo * sum_k a_k hi(ref + offset_k), offsets = W_off q, a = softmax(W_attn q).
inline TokenSequence fuse_deformable(const TokenSequence& lo, const FeatureMap& hi, const DeformableParams& p) {
    const int n = as_grid(lo).height;
    TokenSequence out = lo;
    std::vector<double> mixed(hi.channels);
    for (int t = 0; t < lo.length; ++t) {
        const auto q = detail::deformable_query(lo, t, n, hi, p);
        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (std::size_t s = 0; s < q.weights.size(); ++s) axpy(q.weights[s], q.values.row(static_cast<int>(s)), mixed);
        gemv_acc(p.wo, mixed, out.token(t));
    }
    return out;
}

inline InjectionGrads fuse_deformable_backward(const TokenSequence& lo, const FeatureMap& hi,
                                               const DeformableParams& p, const TokenSequence& grad) {
    const int n = as_grid(lo).height;
    const int k = p.w_attn.rows;
    DeformableParams gp{zeros_like(p.w_off), zeros_like(p.w_attn), zeros_like(p.wo)};
    TokenSequence glo = grad;
    FeatureMap ghi(hi.height, hi.width, hi.channels);
    std::vector<double> mixed(hi.channels), dmixed(hi.channels), da(k), dlogit(k), doff(2 * k);
    for (int t = 0; t < lo.length; ++t) {
        const auto q = detail::deformable_query(lo, t, n, hi, p);
        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (int s = 0; s < k; ++s) axpy(q.weights[s], q.values.row(s), mixed);
        const auto g = grad.token(t);
        ger_acc(gp.wo, g, mixed);
        std::fill(dmixed.begin(), dmixed.end(), 0.0);
        gemv_t_acc(p.wo, g, dmixed);
        double weighted = 0.0;
        Matrix dvalues(k, hi.channels);
        for (int s = 0; s < k; ++s) {
            da[s] = dot(dmixed, q.values.row(s));
            weighted += q.weights[s] * da[s];
            axpy(q.weights[s], dmixed, dvalues.row(s));
        }
        for (int s = 0; s < k; ++s) dlogit[s] = q.weights[s] * (da[s] - weighted);
        std::vector<GridPoint> dpoints(k);
        bilinear_sample_backward(hi, q.points, dvalues, ghi, dpoints);
        for (int s = 0; s < k; ++s) {
            doff[2 * s] = dpoints[s].row;
            doff[2 * s + 1] = dpoints[s].col;
        }
        ger_acc(gp.w_attn, dlogit, lo.token(t));
        ger_acc(gp.w_off, doff, lo.token(t));
        gemv_t_acc(p.w_attn, dlogit, glo.token(t));
        gemv_t_acc(p.w_off, doff, glo.token(t));
    }
    return {std::move(glo), std::move(ghi), std::move(gp)};
}

// ---------------------------------------------------------------- dispatch

/// Per-expert fusion input: its normalized token stream and, for injected
/// experts, its post-processed feature grid.
struct FusionInput {
    TokenSequence tokens;
    FeatureMap map;
};

inline void check_fusion_arity(const FusionConfig& cfg, std::size_t n_experts) {
    if (n_experts == 0) throw ValidationError("fusion: no expert outputs");
    if (is_injection(cfg.strategy)) {
        if (n_experts < 2)
            throw ValidationError(std::string("fusion ") + to_string(cfg.strategy) +
                                  " needs a base expert and at least one injected expert");
        if (cfg.params.size() != n_experts - 1)
            throw ValidationError(std::string("fusion ") + to_string(cfg.strategy) + ": expected " +
                                  std::to_string(n_experts - 1) + " adapter parameter sets");
    }
}

inline TokenSequence inject(const FusionConfig& cfg, const TokenSequence& base, const FeatureMap& hi,
                            const InjectionParams& p) {
    switch (cfg.strategy) {
        case Strategy::LH: return fuse_llava_hr(base, hi, std::get<LlavaHrParams>(p));
        case Strategy::MG: return fuse_mini_gemini(base, hi, std::get<MiniGeminiParams>(p), cfg.window);
        case Strategy::DA: return fuse_deformable(base, hi, std::get<DeformableParams>(p));
        default: throw ValidationError("inject: not an injection strategy");
    }
}

inline InjectionGrads inject_backward(const FusionConfig& cfg, const TokenSequence& base, const FeatureMap& hi,
                                      const InjectionParams& p, const TokenSequence& grad) {
    switch (cfg.strategy) {
        case Strategy::LH: return fuse_llava_hr_backward(base, hi, std::get<LlavaHrParams>(p), grad);
        case Strategy::MG: return fuse_mini_gemini_backward(base, hi, std::get<MiniGeminiParams>(p), cfg.window, grad);
        case Strategy::DA: return fuse_deformable_backward(base, hi, std::get<DeformableParams>(p), grad);
        default: throw ValidationError("inject: not an injection strategy");
    }
}

/// Intermediate base streams of a sequential injection (base_0 .. base_{n-1}).
struct FusionTrace {
    std::vector<TokenSequence> bases;
};

/// Single visual stream from the ordered expert outputs. The first expert is
/// the base for injection strategies; extra experts are injected in order.
/// SA expects every stream already projected to a common dim.
inline TokenSequence fuse(const FusionConfig& cfg, std::span<const FusionInput> outputs, FusionTrace* trace = nullptr) {
    check_fusion_arity(cfg, outputs.size());
    std::vector<TokenSequence> seqs;
    switch (cfg.strategy) {
        case Strategy::SA:
        case Strategy::CC:
            for (const auto& o : outputs) seqs.push_back(o.tokens);
            return cfg.strategy == Strategy::SA ? fuse_sequence_append(seqs) : fuse_channel_concat(seqs);
        default: break;
    }
    TokenSequence base = outputs[0].tokens;
    if (trace) trace->bases.clear();
    for (std::size_t e = 1; e < outputs.size(); ++e) {
        if (trace) trace->bases.push_back(base);
        base = inject(cfg, base, outputs[e].map, cfg.params[e - 1]);
    }
    return base;
}

/// Gradients of fuse(): per-expert token and map gradients plus adapter grads.
struct FusionGrads {
    std::vector<TokenSequence> tokens;  // empty entries where no gradient flows
    std::vector<FeatureMap> maps;
    std::vector<InjectionParams> params;
};

inline FusionGrads fuse_backward(const FusionConfig& cfg, std::span<const FusionInput> outputs,
                                 const FusionTrace& trace, const TokenSequence& grad) {
    FusionGrads g;
    g.tokens.resize(outputs.size());
    g.maps.resize(outputs.size());
    if (cfg.strategy == Strategy::SA || cfg.strategy == Strategy::CC) {
        std::vector<int> sizes;
        for (const auto& o : outputs) sizes.push_back(cfg.strategy == Strategy::SA ? o.tokens.length : o.tokens.dim);
        g.tokens = cfg.strategy == Strategy::SA ? fuse_sequence_append_backward(sizes, grad)
                                                : fuse_channel_concat_backward(sizes, grad);
        return g;
    }
    for (const auto& p : cfg.params) g.params.push_back(zeros_like(p));
    TokenSequence cur = grad;
    for (std::size_t e = outputs.size() - 1; e >= 1; --e) {
        auto step = inject_backward(cfg, trace.bases[e - 1], outputs[e].map, cfg.params[e - 1], cur);
        g.maps[e] = std::move(step.hi);
        g.params[e - 1] = std::move(step.params);
        cur = std::move(step.lo);
    }
    g.tokens[0] = std::move(cur);
    return g;
}

}  // namespace mixlab
