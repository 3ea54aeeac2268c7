// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checking of hand-written backward passes.
//
// A registered op produces a GradProblem for a seed: named views of every
// input and parameter tensor, a scalar objective (typically a fixed random
// linear functional of the op output), and its analytic gradient.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/rng.hpp"

namespace mixlab {

struct GradTensor {
    std::string name;
    std::span<double> values;
};

struct GradProblem {
    std::vector<GradTensor> tensors;
    std::function<double()> value;
    /// One gradient vector per tensor, same order and sizes.
    std::function<std::vector<std::vector<double>>()> gradient;
    std::shared_ptr<void> state;  // keeps the viewed storage alive
};

using GradProblemFactory = std::function<GradProblem(std::uint64_t seed)>;

struct GradReport {
    std::string op_name;
    std::uint64_t seed = 0;
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_parameter_errors;
    int checked_entries = 0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    /// Tensors larger than this are checked on a seeded subset of entries.
    int max_entries_per_tensor = 64;
    /// Below this norm both gradients count as zero.
    double zero_floor = 1e-10;
};

/// ||analytic - numeric|| / max(||analytic||, ||numeric||), or 0 when both vanish.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-10) {
    double d = 0.0, a = 0.0, n = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        d += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        a += analytic[i] * analytic[i];
        n += numeric[i] * numeric[i];
    }
    const double scale = std::max(std::sqrt(a), std::sqrt(n));
    return scale < floor ? 0.0 : std::sqrt(d) / scale;
}

inline GradReport check_problem(const std::string& op_name, std::uint64_t seed, GradProblem& p,
                                const GradCheckOptions& opt = {}) {
    if (!(opt.eps > 0)) throw InvalidArgument("grad_check: eps must be positive");
    GradReport r{op_name, seed, 0.0, {}, 0};
    const auto grads = p.gradient();
    if (grads.size() != p.tensors.size()) throw InvalidArgument("grad_check: gradient count mismatch for " + op_name);
    Rng pick(derive_seed(seed, 0x6772616463686bULL));
    for (std::size_t k = 0; k < p.tensors.size(); ++k) {
        auto& t = p.tensors[k];
        if (grads[k].size() != t.values.size())
            throw InvalidArgument("grad_check: gradient size mismatch for " + op_name + "/" + t.name);
        std::vector<std::size_t> idx;
        if (static_cast<int>(t.values.size()) <= opt.max_entries_per_tensor) {
            for (std::size_t i = 0; i < t.values.size(); ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < opt.max_entries_per_tensor; ++i) idx.push_back(pick.below(t.values.size()));
        }
        std::vector<double> analytic, numeric;
        for (std::size_t i : idx) {
            const double orig = t.values[i];
            t.values[i] = orig + opt.eps;
            const double up = p.value();
            t.values[i] = orig - opt.eps;
            const double down = p.value();
            t.values[i] = orig;
            numeric.push_back((up - down) / (2.0 * opt.eps));
            analytic.push_back(grads[k][i]);
        }
        const double e = relative_error(analytic, numeric, opt.zero_floor);
        r.per_parameter_errors.emplace_back(t.name, e);
        r.max_rel_error = std::max(r.max_rel_error, e);
        r.checked_entries += static_cast<int>(idx.size());
    }
    return r;
}

class GradRegistry {
public:
    void add(const std::string& op_id, GradProblemFactory factory) {
        if (!factories_.emplace(op_id, std::move(factory)).second)
            throw InvalidArgument("grad registry: op " + op_id + " already registered");
    }

    bool contains(const std::string& op_id) const { return factories_.count(op_id) != 0; }

    std::vector<std::string> ops() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : factories_) out.push_back(k);
        return out;
    }

    GradReport check(const std::string& op_id, std::uint64_t seed, const GradCheckOptions& opt = {}) const {
        const auto it = factories_.find(op_id);
        if (it == factories_.end()) throw LookupError("grad_check: unknown op '" + op_id + "'");
        GradProblem p = it->second(seed);
        return check_problem(op_id, seed, p, opt);
    }

private:
    std::map<std::string, GradProblemFactory> factories_;
};

// ---------------------------------------------------------------- helpers for op authors

/// Fills `v` with U[-scale, scale].
inline void fill_uniform(std::span<double> v, Rng& rng, double scale = 1.0) {
    for (double& x : v) x = rng.uniform(-scale, scale);
}

inline double weighted_sum(std::span<const double> out, std::span<const double> w) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
    return s;
}

}  // namespace mixlab
