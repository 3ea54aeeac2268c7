// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrix used for every learned parameter group, plus the few
// accumulate-style kernels the hand-written backward passes need.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/rng.hpp"

namespace mixlab {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix&) const = default;
};

inline Matrix zeros_like(const Matrix& m) { return Matrix(m.rows, m.cols); }

/// Fills with U[-s, s], s = 1/sqrt(fan_in).
inline void init_uniform(Matrix& m, int fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : m.data) v = rng.uniform(-s, s);
}

/// Four independent partial sums break the add dependency chain; the
/// combination order is fixed, so results stay deterministic.
inline double dot(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

/// y += W x
inline void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
    for (int r = 0; r < w.rows; ++r) y[r] += dot(w.row(r), x);
}

/// x_grad += W^T g
inline void gemv_t_acc(const Matrix& w, std::span<const double> g, std::span<double> x_grad) {
    for (int r = 0; r < w.rows; ++r) {
        const double gr = g[r];
        if (gr == 0.0) continue;
        const auto wr = w.row(r);
        for (int c = 0; c < w.cols; ++c) x_grad[c] += gr * wr[c];
    }
}

/// W_grad += g x^T
inline void ger_acc(Matrix& w_grad, std::span<const double> g, std::span<const double> x) {
    for (int r = 0; r < w_grad.rows; ++r) {
        const double gr = g[r];
        if (gr == 0.0) continue;
        auto wr = w_grad.row(r);
        for (int c = 0; c < w_grad.cols; ++c) wr[c] += gr * x[c];
    }
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace mixlab
