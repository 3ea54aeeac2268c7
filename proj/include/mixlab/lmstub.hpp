// SPDX-License-Identifier: Apache-2.0
//
// Two-layer projector into the language-model embedding space and a pooled
// classification stand-in for the language model, with cross-entropy loss.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/linalg.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab {

struct ProjectorParams {
    Matrix w1;  // hidden x in_dim
    Matrix w2;  // lm_dim x hidden

    int in_dim() const { return w1.cols; }
    int out_dim() const { return w2.rows; }

    template <class F>
    void for_each_group(F&& f) {
        f(std::string("w1"), w1);
        f(std::string("w2"), w2);
    }
    template <class F>
    void for_each_group(F&& f) const {
        f(std::string("w1"), w1);
        f(std::string("w2"), w2);
    }
};

inline ProjectorParams make_projector(int in_dim, int hidden, int lm_dim, Rng& rng) {
    ProjectorParams p{Matrix(hidden, in_dim), Matrix(lm_dim, hidden)};
    init_uniform(p.w1, in_dim, rng);
    init_uniform(p.w2, hidden, rng);
    return p;
}

inline ProjectorParams zeros_like(const ProjectorParams& p) { return {zeros_like(p.w1), zeros_like(p.w2)}; }

/// Per token: y = W2 tanh(W1 x).
inline TokenSequence project(const TokenSequence& tokens, const ProjectorParams& p) {
    if (tokens.dim != p.in_dim())
        throw InvalidArgument("project: token dim " + std::to_string(tokens.dim) + " != projector input dim " +
                              std::to_string(p.in_dim()));
    TokenSequence out(tokens.length, p.out_dim());
    std::vector<double> h(p.w1.rows);
    for (int t = 0; t < tokens.length; ++t) {
        std::fill(h.begin(), h.end(), 0.0);
        gemv_acc(p.w1, tokens.token(t), h);
        for (double& v : h) v = std::tanh(v);
        gemv_acc(p.w2, h, out.token(t));
    }
    return out;
}

/// Returns the input gradient and accumulates parameter gradients into `grads`.
inline TokenSequence project_backward(const TokenSequence& tokens, const ProjectorParams& p,
                                      const TokenSequence& grad_out, ProjectorParams& grads) {
    TokenSequence gin(tokens.length, tokens.dim);
    std::vector<double> h(p.w1.rows), u(p.w1.rows);
    for (int t = 0; t < tokens.length; ++t) {
        std::fill(h.begin(), h.end(), 0.0);
        gemv_acc(p.w1, tokens.token(t), h);
        for (double& v : h) v = std::tanh(v);
        const auto g = grad_out.token(t);
        ger_acc(grads.w2, g, h);
        std::fill(u.begin(), u.end(), 0.0);
        gemv_t_acc(p.w2, g, u);
        for (std::size_t k = 0; k < u.size(); ++k) u[k] *= 1.0 - h[k] * h[k];
        ger_acc(grads.w1, u, tokens.token(t));
        gemv_t_acc(p.w1, u, gin.token(t));
    }
    return gin;
}

struct LMStubParams {
    Matrix task_embed;  // n_tasks x lm_dim
    Matrix head;        // vocab x lm_dim

    int lm_dim() const { return head.cols; }
    int vocab() const { return head.rows; }
    int n_tasks() const { return task_embed.rows; }

    template <class F>
    void for_each_group(F&& f) {
        f(std::string("task_embed"), task_embed);
        f(std::string("head"), head);
    }
    template <class F>
    void for_each_group(F&& f) const {
        f(std::string("task_embed"), task_embed);
        f(std::string("head"), head);
    }
};

inline LMStubParams make_lm(int n_tasks, int lm_dim, int vocab, Rng& rng) {
    LMStubParams p{Matrix(n_tasks, lm_dim), Matrix(vocab, lm_dim)};
    init_uniform(p.task_embed, lm_dim, rng);
    init_uniform(p.head, lm_dim, rng);
    return p;
}

inline LMStubParams zeros_like(const LMStubParams& p) { return {zeros_like(p.task_embed), zeros_like(p.head)}; }

namespace detail {

inline std::vector<double> lm_state(const TokenSequence& visual, int task, const LMStubParams& p) {
    if (task < 0 || task >= p.n_tasks())
        throw LookupError("lm_forward: task id " + std::to_string(task) + " out of range [0, " +
                          std::to_string(p.n_tasks()) + ")");
    if (visual.dim != p.lm_dim())
        throw InvalidArgument("lm_forward: visual dim " + std::to_string(visual.dim) + " != lm dim " +
                              std::to_string(p.lm_dim()));
    if (visual.length < 1) throw InvalidArgument("lm_forward: empty visual stream");
    std::vector<double> z(p.task_embed.row(task).begin(), p.task_embed.row(task).end());
    const double inv = 1.0 / visual.length;
    for (int t = 0; t < visual.length; ++t) axpy(inv, visual.token(t), z);
    for (double& v : z) v = std::tanh(v);
    return z;
}

}  // namespace detail

/// logits = head * tanh(mean_tokens(visual) + task_embed[task]).
inline std::vector<double> lm_forward(const TokenSequence& visual, int task, const LMStubParams& p) {
    const auto z = detail::lm_state(visual, task, p);
    std::vector<double> logits(p.vocab());
    gemv_acc(p.head, z, logits);
    return logits;
}

/// Returns d loss / d visual and accumulates parameter gradients into `grads`.
inline TokenSequence lm_backward(const TokenSequence& visual, int task, const LMStubParams& p,
                                 std::span<const double> grad_logits, LMStubParams& grads) {
    const auto z = detail::lm_state(visual, task, p);
    ger_acc(grads.head, grad_logits, z);
    std::vector<double> dpre(p.lm_dim());
    gemv_t_acc(p.head, grad_logits, dpre);
    for (std::size_t k = 0; k < dpre.size(); ++k) dpre[k] *= 1.0 - z[k] * z[k];
    axpy(1.0, dpre, grads.task_embed.row(task));
    TokenSequence gv(visual.length, visual.dim);
    const double inv = 1.0 / visual.length;
    for (int t = 0; t < visual.length; ++t) axpy(inv, dpre, gv.token(t));
    return gv;
}

inline double log_sum_exp(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    return mx + std::log(s);
}

/// Cross-entropy of the softmax over `logits` against class `answer`.
inline double loss(std::span<const double> logits, int answer) {
    if (answer < 0 || static_cast<std::size_t>(answer) >= logits.size())
        throw InvalidArgument("loss: answer " + std::to_string(answer) + " outside vocabulary of size " +
                              std::to_string(logits.size()));
    return log_sum_exp(logits) - logits[static_cast<std::size_t>(answer)];
}

/// d loss / d logits = softmax(logits) - onehot(answer).
inline std::vector<double> loss_grad(std::span<const double> logits, int answer) {
    if (answer < 0 || static_cast<std::size_t>(answer) >= logits.size())
        throw InvalidArgument("loss: answer " + std::to_string(answer) + " outside vocabulary");
    const double lse = log_sum_exp(logits);
    std::vector<double> g(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) g[i] = std::exp(logits[i] - lse);
    g[static_cast<std::size_t>(answer)] -= 1.0;
    return g;
}

}  // namespace mixlab
