// SPDX-License-Identifier: Apache-2.0
//
// Deterministic grid kernels: align-corners bilinear resize, clamp-to-border
// bilinear sampling, and pixel shuffle / unshuffle. Every kernel has an
// explicit backward pass; all arithmetic is double precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/linalg.hpp"

namespace mixlab {

/// H x W x C grid, channel index fastest, then column, then row.
struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;
    std::optional<int> source_resolution;

    FeatureMap() = default;
    FeatureMap(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * width + c) * channels + ch;
    }
    double& at(int r, int c, int ch) { return data[index(r, c, ch)]; }
    double at(int r, int c, int ch) const { return data[index(r, c, ch)]; }

    std::span<double> cell(int r, int c) { return {data.data() + index(r, c, 0), static_cast<std::size_t>(channels)}; }
    std::span<const double> cell(int r, int c) const {
        return {data.data() + index(r, c, 0), static_cast<std::size_t>(channels)};
    }

    std::size_t size() const { return data.size(); }

    void validate() const {
        if (height < 1 || width < 1 || channels < 1)
            throw InvalidArgument("FeatureMap: dimensions must be positive");
        if (data.size() != static_cast<std::size_t>(height) * width * channels)
            throw InvalidArgument("FeatureMap: data length does not match height*width*channels");
        if (!all_finite(data)) throw InvalidArgument("FeatureMap: non-finite entry");
    }

    bool operator==(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels == o.channels && data == o.data;
    }
};

/// length x dim token matrix, one row per token.
struct TokenSequence {
    int length = 0;
    int dim = 0;
    std::vector<double> data;

    TokenSequence() = default;
    TokenSequence(int n, int d, double fill = 0.0)
        : length(n), dim(d), data(static_cast<std::size_t>(n) * d, fill) {}

    std::span<double> token(int i) { return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)}; }
    std::span<const double> token(int i) const {
        return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
    }

    bool operator==(const TokenSequence& o) const = default;
};

/// Row-major flatten of a grid; the storage layouts coincide so this is a copy.
inline TokenSequence flatten(const FeatureMap& map) {
    TokenSequence t(map.height * map.width, map.channels);
    t.data = map.data;
    return t;
}

/// Reinterpret a square token sequence as an n x n grid.
inline FeatureMap as_grid(const TokenSequence& t) {
    const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t.length))));
    if (n * n != t.length)
        throw InvalidArgument("token sequence of length " + std::to_string(t.length) + " is not a square grid");
    FeatureMap m(n, n, t.dim);
    m.data = t.data;
    return m;
}

namespace detail {

struct AxisTap {
    int i0;
    int i1;
    double frac;
};

/// Align-corners source coordinate for output index `o` of an axis resized in -> out.
/// A length-1 output samples the input center.
inline AxisTap align_corners_tap(int in, int out, int o) {
    double src;
    if (out == 1)
        src = 0.5 * (in - 1);
    else
        src = static_cast<double>(o) * (in - 1) / (out - 1);
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::clamp(i0, 0, std::max(in - 2, 0));
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = (in == 1) ? 0.0 : src - i0;
    return {i0, i1, frac};
}

}  // namespace detail

/// Align-corners bilinear resize. The lerp is written as a + f*(b - a) so
/// identity resizes and constant maps are reproduced bit-exactly.
inline FeatureMap bilinear_resize(const FeatureMap& map, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1)
        throw InvalidArgument("bilinear_resize: target dims must be positive (got " + std::to_string(out_h) + "x" +
                              std::to_string(out_w) + ")");
    FeatureMap out(out_h, out_w, map.channels);
    out.source_resolution = map.source_resolution;
    for (int y = 0; y < out_h; ++y) {
        const auto ty = detail::align_corners_tap(map.height, out_h, y);
        for (int x = 0; x < out_w; ++x) {
            const auto tx = detail::align_corners_tap(map.width, out_w, x);
            const auto a = map.cell(ty.i0, tx.i0);
            const auto b = map.cell(ty.i0, tx.i1);
            const auto c = map.cell(ty.i1, tx.i0);
            const auto d = map.cell(ty.i1, tx.i1);
            auto o = out.cell(y, x);
            for (int ch = 0; ch < map.channels; ++ch) {
                const double top = a[ch] + tx.frac * (b[ch] - a[ch]);
                const double bot = c[ch] + tx.frac * (d[ch] - c[ch]);
                o[ch] = top + ty.frac * (bot - top);
            }
        }
    }
    return out;
}

/// Gradient of bilinear_resize with respect to its input, given the output gradient.
inline FeatureMap bilinear_resize_backward(const FeatureMap& grad_out, int in_h, int in_w) {
    FeatureMap g(in_h, in_w, grad_out.channels);
    for (int y = 0; y < grad_out.height; ++y) {
        const auto ty = detail::align_corners_tap(in_h, grad_out.height, y);
        for (int x = 0; x < grad_out.width; ++x) {
            const auto tx = detail::align_corners_tap(in_w, grad_out.width, x);
            const double wa = (1 - ty.frac) * (1 - tx.frac);
            const double wb = (1 - ty.frac) * tx.frac;
            const double wc = ty.frac * (1 - tx.frac);
            const double wd = ty.frac * tx.frac;
            const auto go = grad_out.cell(y, x);
            axpy(wa, go, g.cell(ty.i0, tx.i0));
            axpy(wb, go, g.cell(ty.i0, tx.i1));
            axpy(wc, go, g.cell(ty.i1, tx.i0));
            axpy(wd, go, g.cell(ty.i1, tx.i1));
        }
    }
    return g;
}

/// Continuous grid coordinate, in cell units (row 0 = first row).
struct GridPoint {
    double row = 0.0;
    double col = 0.0;
};

namespace detail {

struct SampleTap {
    int r0, r1, c0, c1;
    double fr, fc;
    bool row_inside, col_inside;  // false when the coordinate was clamped
};

inline SampleTap sample_tap(const FeatureMap& map, GridPoint p) {
    auto axis = [](double v, int n, int& i0, int& i1, double& f, bool& inside) {
        const double hi = n - 1;
        inside = v >= 0.0 && v <= hi;
        const double vc = std::clamp(v, 0.0, hi);
        i0 = std::clamp(static_cast<int>(std::floor(vc)), 0, std::max(n - 2, 0));
        i1 = std::min(i0 + 1, n - 1);
        f = (n == 1) ? 0.0 : vc - i0;
        if (n == 1) inside = false;
    };
    SampleTap t{};
    axis(p.row, map.height, t.r0, t.r1, t.fr, t.row_inside);
    axis(p.col, map.width, t.c0, t.c1, t.fc, t.col_inside);
    return t;
}

}  // namespace detail

/// Bilinear lookup at continuous coordinates, clamped to the grid border.
/// Returns one row of `channels` values per point.
inline Matrix bilinear_sample(const FeatureMap& map, std::span<const GridPoint> points) {
    Matrix out(static_cast<int>(points.size()), map.channels);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto t = detail::sample_tap(map, points[i]);
        const auto a = map.cell(t.r0, t.c0);
        const auto b = map.cell(t.r0, t.c1);
        const auto c = map.cell(t.r1, t.c0);
        const auto d = map.cell(t.r1, t.c1);
        auto o = out.row(static_cast<int>(i));
        for (int ch = 0; ch < map.channels; ++ch) {
            const double top = a[ch] + t.fc * (b[ch] - a[ch]);
            const double bot = c[ch] + t.fc * (d[ch] - c[ch]);
            o[ch] = top + t.fr * (bot - top);
        }
    }
    return out;
}

/// Accumulates gradients of bilinear_sample into `grad_map` and `grad_points`.
/// Coordinates that were clamped receive zero gradient along the clamped axis.
inline void bilinear_sample_backward(const FeatureMap& map, std::span<const GridPoint> points, const Matrix& grad_out,
                                     FeatureMap& grad_map, std::span<GridPoint> grad_points) {
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto t = detail::sample_tap(map, points[i]);
        const auto g = grad_out.row(static_cast<int>(i));
        const double wa = (1 - t.fr) * (1 - t.fc);
        const double wb = (1 - t.fr) * t.fc;
        const double wc = t.fr * (1 - t.fc);
        const double wd = t.fr * t.fc;
        axpy(wa, g, grad_map.cell(t.r0, t.c0));
        axpy(wb, g, grad_map.cell(t.r0, t.c1));
        axpy(wc, g, grad_map.cell(t.r1, t.c0));
        axpy(wd, g, grad_map.cell(t.r1, t.c1));
        if (grad_points.empty()) continue;
        const auto a = map.cell(t.r0, t.c0);
        const auto b = map.cell(t.r0, t.c1);
        const auto c = map.cell(t.r1, t.c0);
        const auto d = map.cell(t.r1, t.c1);
        double d_row = 0.0;
        double d_col = 0.0;
        for (int ch = 0; ch < map.channels; ++ch) {
            const double top = a[ch] + t.fc * (b[ch] - a[ch]);
            const double bot = c[ch] + t.fc * (d[ch] - c[ch]);
            d_row += g[ch] * (bot - top);
            d_col += g[ch] * ((1 - t.fr) * (b[ch] - a[ch]) + t.fr * (d[ch] - c[ch]));
        }
        if (t.row_inside) grad_points[i].row += d_row;
        if (t.col_inside) grad_points[i].col += d_col;
    }
}

enum class ShuffleDirection { shuffle, unshuffle };

/// Sub-pixel rearrangement by factor r.
///
/// shuffle:   H x W x C  ->  rH x rW x C/r^2
/// unshuffle: H x W x C  ->  H/r x W/r x C r^2
///
/// Within each r x r output block the packed channel index is
/// (dy * r + dx) * C_small + c: the small-grid channel varies fastest, then the
/// block column, then the block row.
inline FeatureMap pixel_shuffle(const FeatureMap& map, int r, ShuffleDirection direction) {
    if (r < 1) throw InvalidArgument("pixel_shuffle: factor must be positive");
    if (direction == ShuffleDirection::shuffle) {
        if (map.channels % (r * r) != 0)
            throw InvalidArgument("pixel_shuffle: channels (" + std::to_string(map.channels) +
                                  ") not divisible by r^2 = " + std::to_string(r * r));
        const int cs = map.channels / (r * r);
        FeatureMap out(map.height * r, map.width * r, cs);
        out.source_resolution = map.source_resolution;
        for (int y = 0; y < map.height; ++y)
            for (int x = 0; x < map.width; ++x) {
                const auto in = map.cell(y, x);
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        auto o = out.cell(y * r + dy, x * r + dx);
                        const int base = (dy * r + dx) * cs;
                        for (int c = 0; c < cs; ++c) o[c] = in[base + c];
                    }
            }
        return out;
    }
    if (map.height % r != 0)
        throw InvalidArgument("pixel_unshuffle: height (" + std::to_string(map.height) + ") not divisible by r = " +
                              std::to_string(r));
    if (map.width % r != 0)
        throw InvalidArgument("pixel_unshuffle: width (" + std::to_string(map.width) + ") not divisible by r = " +
                              std::to_string(r));
    const int cs = map.channels;
    FeatureMap out(map.height / r, map.width / r, cs * r * r);
    out.source_resolution = map.source_resolution;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            auto o = out.cell(y, x);
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const auto in = map.cell(y * r + dy, x * r + dx);
                    const int base = (dy * r + dx) * cs;
                    for (int c = 0; c < cs; ++c) o[base + c] = in[c];
                }
        }
    return out;
}

/// Shuffle is a permutation, so its adjoint is the opposite direction.
inline FeatureMap pixel_shuffle_backward(const FeatureMap& grad_out, int r, ShuffleDirection direction) {
    return pixel_shuffle(grad_out, r,
                         direction == ShuffleDirection::shuffle ? ShuffleDirection::unshuffle : ShuffleDirection::shuffle);
}

}  // namespace mixlab
