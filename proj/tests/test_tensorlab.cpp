// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mixlab/tensorlab.hpp"
#include "support.hpp"

using namespace mixlab;
using namespace mixlab::testing;

namespace {

// Independent per-output-pixel reference for align-corners bilinear resize.
double reference_resize_at(const FeatureMap& m, int out_h, int out_w, int y, int x, int ch) {
    const auto src = [](int in, int out, int o) {
        if (out == 1) return 0.5 * (in - 1);
        return static_cast<double>(o) * (in - 1) / (out - 1);
    };
    const double sy = src(m.height, out_h, y);
    const double sx = src(m.width, out_w, x);
    double acc = 0.0;
    for (int r = 0; r < m.height; ++r)
        for (int c = 0; c < m.width; ++c) {
            const double wy = std::max(0.0, 1.0 - std::abs(sy - r));
            const double wx = std::max(0.0, 1.0 - std::abs(sx - c));
            acc += wy * wx * m.at(r, c, ch);
        }
    return acc;
}

// Clamp-to-border reference for a single sample, built from the tent kernel.
double reference_sample(const FeatureMap& m, double row, double col, int ch) {
    const double r = std::clamp(row, 0.0, m.height - 1.0);
    const double c = std::clamp(col, 0.0, m.width - 1.0);
    double acc = 0.0;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            acc += std::max(0.0, 1.0 - std::abs(r - y)) * std::max(0.0, 1.0 - std::abs(c - x)) * m.at(y, x, ch);
    return acc;
}

}  // namespace

TEST(BilinearResize, SameSizeIsIdentity) {
    const auto m = random_map(1, 4, 4, 3);
    EXPECT_EQ(bilinear_resize(m, 4, 4), m);
}

TEST(BilinearResize, ConstantMapStaysConstant) {
    const FeatureMap m(3, 5, 2, 2.5);
    for (auto [h, w] : std::vector<std::pair<int, int>>{{1, 1}, {2, 7}, {9, 4}, {16, 16}}) {
        const auto out = bilinear_resize(m, h, w);
        ASSERT_EQ(out.height, h);
        ASSERT_EQ(out.width, w);
        for (double v : out.data) EXPECT_EQ(v, 2.5);
    }
}

TEST(BilinearResize, MatchesPerPixelReference) {
    const auto m = random_map(2, 3, 3, 1);
    const auto out = bilinear_resize(m, 5, 5);
    double worst = 0.0;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) worst = std::max(worst, std::abs(out.at(y, x, 0) - reference_resize_at(m, 5, 5, y, x, 0)));
    EXPECT_LT(worst, 1e-12);
}

TEST(BilinearResize, MatchesReferenceOnDownsampleAndSingleton) {
    const auto m = random_map(3, 7, 6, 2);
    for (auto [h, w] : std::vector<std::pair<int, int>>{{3, 4}, {1, 1}, {1, 5}, {2, 2}}) {
        const auto out = bilinear_resize(m, h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < 2; ++ch)
                    EXPECT_NEAR(out.at(y, x, ch), reference_resize_at(m, h, w, y, x, ch), 1e-12);
    }
}

TEST(BilinearResize, AffineMapsCommute) {
    const auto m = random_map(4, 5, 5, 3);
    const double a = -1.75, b = 0.3;
    FeatureMap t = m;
    for (double& v : t.data) v = a * v + b;
    const auto lhs = bilinear_resize(t, 9, 3);
    auto rhs = bilinear_resize(m, 9, 3);
    for (double& v : rhs.data) v = a * v + b;
    EXPECT_LT(max_abs_diff(lhs.data, rhs.data), 1e-12);
}

TEST(BilinearResize, RejectsNonPositiveTarget) {
    const auto m = random_map(5, 2, 2, 1);
    EXPECT_THROW(bilinear_resize(m, 0, 3), InvalidArgument);
    EXPECT_THROW(bilinear_resize(m, 3, -1), InvalidArgument);
}

TEST(BilinearResize, BackwardIsAdjoint) {
    // <resize(x), g> == <x, resize_backward(g)> for every x, g.
    const auto x = random_map(6, 4, 6, 2);
    const auto g = random_map(7, 7, 3, 2);
    const auto y = bilinear_resize(x, 7, 3);
    const auto gx = bilinear_resize_backward(g, 4, 6);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i) lhs += y.data[i] * g.data[i];
    for (std::size_t i = 0; i < x.data.size(); ++i) rhs += x.data[i] * gx.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(BilinearSample, OnGridPointReturnsStoredVector) {
    const auto m = random_map(8, 3, 4, 5);
    const std::vector<GridPoint> p{{1.0, 2.0}};
    const auto out = bilinear_sample(m, p);
    for (int ch = 0; ch < 5; ++ch) EXPECT_EQ(out(0, ch), m.at(1, 2, ch));
}

TEST(BilinearSample, MidpointAveragesNeighbours) {
    FeatureMap m(1, 2, 1);
    m.at(0, 0, 0) = 0.0;
    m.at(0, 1, 0) = 4.0;
    const std::vector<GridPoint> p{{0.0, 0.5}};
    EXPECT_DOUBLE_EQ(bilinear_sample(m, p)(0, 0), 2.0);
}

TEST(BilinearSample, EmptyPointListGivesEmptyOutput) {
    const auto m = random_map(9, 2, 2, 3);
    const auto out = bilinear_sample(m, std::span<const GridPoint>{});
    EXPECT_EQ(out.rows, 0);
}

TEST(BilinearSample, MatchesReferenceIncludingOutOfRange) {
    const auto m = random_map(10, 5, 4, 3);
    Rng rng(11);
    std::vector<GridPoint> pts;
    for (int i = 0; i < 40; ++i) pts.push_back({rng.uniform(-2.0, 6.5), rng.uniform(-2.0, 5.5)});
    const auto out = bilinear_sample(m, pts);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int ch = 0; ch < 3; ++ch)
            EXPECT_NEAR(out(static_cast<int>(i), ch), reference_sample(m, pts[i].row, pts[i].col, ch), 1e-12);
}

TEST(BilinearSample, CoordinateGradientsMatchFiniteDifferences) {
    const auto m = random_map(12, 5, 5, 3);
    Rng rng(13);
    std::vector<GridPoint> pts;
    for (int i = 0; i < 10; ++i) pts.push_back({rng.uniform(0.1, 3.9), rng.uniform(0.1, 3.9)});
    const auto w = random_matrix(14, 10, 3);
    const auto objective = [&](const std::vector<GridPoint>& p) {
        const auto o = bilinear_sample(m, p);
        double s = 0.0;
        for (std::size_t i = 0; i < o.data.size(); ++i) s += o.data[i] * w.data[i];
        return s;
    };
    FeatureMap gm(5, 5, 3);
    std::vector<GridPoint> gp(pts.size());
    bilinear_sample_backward(m, pts, w, gm, gp);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto up = pts, dn = pts;
        up[i].row += eps;
        dn[i].row -= eps;
        const double nr = (objective(up) - objective(dn)) / (2 * eps);
        up = pts;
        dn = pts;
        up[i].col += eps;
        dn[i].col -= eps;
        const double nc = (objective(up) - objective(dn)) / (2 * eps);
        EXPECT_NEAR(gp[i].row, nr, 1e-4 * std::max(1.0, std::abs(nr)));
        EXPECT_NEAR(gp[i].col, nc, 1e-4 * std::max(1.0, std::abs(nc)));
    }
}

TEST(PixelShuffle, FactorOneIsIdentity) {
    const auto m = random_map(15, 3, 5, 4);
    EXPECT_EQ(pixel_shuffle(m, 1, ShuffleDirection::shuffle), m);
    EXPECT_EQ(pixel_shuffle(m, 1, ShuffleDirection::unshuffle), m);
}

TEST(PixelShuffle, RoundTripIsBitExact) {
    for (int r : {2, 3}) {
        const auto m = random_map(16 + r, 4, 5, r * r * 3);
        EXPECT_EQ(pixel_shuffle(pixel_shuffle(m, r, ShuffleDirection::shuffle), r, ShuffleDirection::unshuffle), m);
        const auto g = random_map(20 + r, 2 * r, 3 * r, 2);
        EXPECT_EQ(pixel_shuffle(pixel_shuffle(g, r, ShuffleDirection::unshuffle), r, ShuffleDirection::shuffle), g);
    }
}

TEST(PixelShuffle, MatchesIndexMapOracle) {
    // 2x2x4 shuffled with r = 2 into 4x4x1: out(2y+dy, 2x+dx) = in(y, x, dy*2+dx).
    FeatureMap m(2, 2, 4);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(i);
    const auto out = pixel_shuffle(m, 2, ShuffleDirection::shuffle);
    ASSERT_EQ(out.height, 4);
    ASSERT_EQ(out.width, 4);
    ASSERT_EQ(out.channels, 1);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    EXPECT_EQ(out.at(2 * y + dy, 2 * x + dx, 0), m.at(y, x, dy * 2 + dx));
    auto a = m.data, b = out.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(PixelShuffle, GeneralIndexMapWithSeveralChannels) {
    const int r = 3, cs = 2;
    const auto m = random_map(30, 2, 3, r * r * cs);
    const auto out = pixel_shuffle(m, r, ShuffleDirection::shuffle);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx)
                    for (int c = 0; c < cs; ++c)
                        EXPECT_EQ(out.at(y * r + dy, x * r + dx, c), m.at(y, x, (dy * r + dx) * cs + c));
}

TEST(PixelShuffle, ConservesEntries) {
    const auto m = random_map(31, 6, 4, 3);
    auto a = m.data;
    auto b = pixel_shuffle(m, 2, ShuffleDirection::unshuffle).data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(PixelShuffle, DivisibilityErrorsNameTheDimension) {
    const auto m = random_map(32, 3, 4, 5);
    try {
        pixel_shuffle(m, 2, ShuffleDirection::shuffle);
        FAIL() << "expected an error";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
    }
    try {
        pixel_shuffle(m, 2, ShuffleDirection::unshuffle);
        FAIL() << "expected an error";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
    }
    const auto w = random_map(33, 4, 3, 1);
    try {
        pixel_shuffle(w, 2, ShuffleDirection::unshuffle);
        FAIL() << "expected an error";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
    }
}

TEST(PixelShuffle, BackwardIsInversePermutation) {
    const auto g = random_map(34, 4, 4, 1);
    const auto back = pixel_shuffle_backward(g, 2, ShuffleDirection::shuffle);
    EXPECT_EQ(pixel_shuffle(back, 2, ShuffleDirection::shuffle), g);
}

TEST(Grid, FlattenAndAsGridRoundTrip) {
    const auto m = random_map(35, 4, 4, 3);
    EXPECT_EQ(as_grid(flatten(m)), m);
    EXPECT_THROW(as_grid(TokenSequence(5, 2)), InvalidArgument);
}
