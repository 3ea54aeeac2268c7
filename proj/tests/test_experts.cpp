// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "mixlab/experts.hpp"
#include "support.hpp"

using namespace mixlab;
using namespace mixlab::testing;

namespace {

ExpertSpec patch_spec(int native = 32, int patch = 8, int d = 6, int depth = 1) {
    ExpertSpec s;
    s.name = "lo";
    s.arch = Arch::patch_linear;
    s.native_resolution = native;
    s.patch_or_stride = patch;
    s.embed_dim = d;
    s.depth = depth;
    return s;
}

ExpertSpec conv_spec(int native = 32, int depth = 2, int d = 5) {
    ExpertSpec s;
    s.name = "hi";
    s.arch = Arch::conv_stack;
    s.native_resolution = native;
    s.depth = depth;
    s.patch_or_stride = 1 << depth;
    s.embed_dim = d;
    return s;
}

std::vector<std::string> group_names(const ExpertState& e) {
    std::vector<std::string> out;
    e.params.for_each_group([&](const std::string& id, const Matrix&) { out.push_back(id); });
    return out;
}

}  // namespace

TEST(BuildExpert, SameSeedIsBitIdentical) {
    for (const auto& spec : {patch_spec(), conv_spec()}) {
        const auto a = build_expert(spec, 42);
        const auto b = build_expert(spec, 42);
        std::vector<std::vector<double>> va, vb;
        a.params.for_each_group([&](const std::string&, const Matrix& m) { va.push_back(m.data); });
        b.params.for_each_group([&](const std::string&, const Matrix& m) { vb.push_back(m.data); });
        EXPECT_EQ(va, vb);
        const auto c = build_expert(spec, 43);
        std::vector<std::vector<double>> vc;
        c.params.for_each_group([&](const std::string&, const Matrix& m) { vc.push_back(m.data); });
        EXPECT_NE(va, vc);
    }
}

TEST(BuildExpert, DepthZeroPatchLinearHasOnlyProjectionAndPositions) {
    const auto e = build_expert(patch_spec(32, 8, 6, 0), 1);
    EXPECT_EQ(group_names(e), (std::vector<std::string>{"patch_proj", "pos_embed"}));
}

TEST(BuildExpert, InitBoundFollowsFanIn) {
    EXPECT_NEAR(init_bound(8 * 8 * 3), 0.0722, 5e-5);
    const auto e = build_expert(patch_spec(32, 8, 16, 0), 3);
    const double s = init_bound(192);
    double mx = 0.0;
    for (double v : e.params.patch_proj.data) mx = std::max(mx, std::abs(v));
    EXPECT_LE(mx, s);
    EXPECT_GT(mx, 0.9 * s);
}

TEST(BuildExpert, InvalidSpecIsRejectedWithReason) {
    auto bad = patch_spec(30, 8);
    try {
        build_expert(bad, 1);
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("not divisible"), std::string::npos);
    }
    auto conv = conv_spec(36, 3);
    EXPECT_THROW(build_expert(conv, 1), ValidationError);
}

TEST(Encode, OutputShapes) {
    const auto lo = build_expert(patch_spec(32, 8, 6), 1);
    const auto out = encode(lo, random_image(2, 32));
    EXPECT_EQ(out.height, 4);
    EXPECT_EQ(out.width, 4);
    EXPECT_EQ(out.channels, 6);
    const auto hi = build_expert(conv_spec(32, 2, 5), 1);
    const auto h = encode(hi, random_image(3, 32));
    EXPECT_EQ(h.height, 8);
    EXPECT_EQ(h.channels, 5);
}

TEST(Encode, ZeroImageAndProjectionGivesPositionGridThroughBlocks) {
    auto lo = build_expert(patch_spec(32, 8, 4, 0), 5);
    std::fill(lo.params.patch_proj.data.begin(), lo.params.patch_proj.data.end(), 0.0);
    const auto out = encode(lo, Image(32));
    EXPECT_EQ(out.data, lo.params.pos_embed.data);

    // With one block the output is the block applied to the position grid.
    auto deep = build_expert(patch_spec(32, 8, 4, 1), 6);
    std::fill(deep.params.patch_proj.data.begin(), deep.params.patch_proj.data.end(), 0.0);
    const auto got = encode(deep, Image(32));
    const auto& p = deep.params;
    const int n = 16, d = 4;
    std::vector<double> mean(d, 0.0);
    for (int t = 0; t < n; ++t)
        for (int k = 0; k < d; ++k) mean[k] += p.pos_embed(t, k) / n;
    for (int t = 0; t < n; ++t) {
        std::vector<double> h(d, 0.0);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) h[i] += p.blocks[0].w1(i, j) * p.pos_embed(t, j);
            h[i] = std::tanh(h[i]);
        }
        for (int i = 0; i < d; ++i) {
            double y = p.pos_embed(t, i) + p.blocks[0].alpha(0, 0) * mean[i];
            for (int j = 0; j < d; ++j) y += p.blocks[0].w2(i, j) * h[j];
            EXPECT_NEAR(got.data[static_cast<std::size_t>(t) * d + i], y, 1e-12);
        }
    }
}

TEST(Encode, WrongResolutionRequiresAdaptation) {
    const auto lo = build_expert(patch_spec(32, 8), 1);
    try {
        encode(lo, random_image(1, 64));
        FAIL() << "expected adaptation error";
    } catch (const AdaptationRequired& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("32"), std::string::npos);
        EXPECT_NE(msg.find("64"), std::string::npos);
    }
}

TEST(Encode, IsDeterministic) {
    const auto hi = build_expert(conv_spec(), 9);
    const auto img = random_image(10, 32);
    EXPECT_EQ(encode(hi, img), encode(hi, img));
}

TEST(Encode, EveryGroupReceivesGradient) {
    for (const auto& spec : {patch_spec(16, 4, 5, 2), conv_spec(16, 2, 4)}) {
        const auto e = build_expert(spec, 11);
        EncodeCache cache;
        const auto out = encode(e, random_image(12, 16), &cache);
        auto g = random_map(13, out.height, out.width, out.channels);
        ExpertParams grads = zeros_like(e.params);
        encode_backward(e, cache, g, grads);
        grads.for_each_group([&](const std::string& id, const Matrix& m) {
            double norm = 0.0;
            for (double v : m.data) norm += v * v;
            EXPECT_GT(norm, 0.0) << spec.name << "." << id;
        });
    }
}

TEST(InterpolatePosEmbed, SameSideIsIdentity) {
    const auto lo = build_expert(patch_spec(32, 8), 3);
    const auto same = interpolate_pos_embed(lo, 4);
    EXPECT_EQ(same.params.pos_embed, lo.params.pos_embed);
}

TEST(InterpolatePosEmbed, DoublingSideQuadruplesTokens) {
    const auto lo = build_expert(patch_spec(32, 8), 3);
    const auto big = interpolate_pos_embed(lo, 8);
    EXPECT_EQ(big.params.pos_side, 8);
    EXPECT_EQ(big.accepted_resolution(), 64);
    const auto out = encode(big, random_image(4, 64));
    EXPECT_EQ(out.height * out.width, 64);
    EXPECT_EQ(big.params.patch_proj, lo.params.patch_proj);
}

TEST(InterpolatePosEmbed, ConstantGridStaysConstant) {
    auto lo = build_expert(patch_spec(32, 8), 3);
    std::fill(lo.params.pos_embed.data.begin(), lo.params.pos_embed.data.end(), -0.25);
    const auto big = interpolate_pos_embed(lo, 7);
    for (double v : big.params.pos_embed.data) EXPECT_EQ(v, -0.25);
}

TEST(InterpolatePosEmbed, ConvStackIsUnchanged) {
    const auto hi = build_expert(conv_spec(), 3);
    const auto same = interpolate_pos_embed(hi, 12);
    EXPECT_EQ(same.accepted_resolution(), hi.accepted_resolution());
}

TEST(Tiling, SingleTileEqualsEncode) {
    const auto lo = build_expert(patch_spec(32, 8), 2);
    const auto img = random_image(5, 32);
    EXPECT_EQ(tile_encode(lo, img, 1).data, encode(lo, img).data);
}

TEST(Tiling, FourTilesAssembleIntoDoubleGrid) {
    const auto lo = build_expert(patch_spec(32, 8), 2);
    const auto img = random_image(6, 64);
    const auto out = tile_encode(lo, img, 2);
    EXPECT_EQ(out.height, 8);
    EXPECT_EQ(out.width, 8);
    // The top-right quarter is the encoding of the top-right tile.
    const auto tiles = split_tiles(img, 2);
    const auto tr = encode(lo, tiles[1]);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 6; ++c) EXPECT_EQ(out.at(y, 4 + x, c), tr.at(y, x, c));
}

TEST(Tiling, IdentityEncoderReassemblesPixelsExactly) {
    for (int t : {1, 2, 4}) {
        const auto img = random_image(7 + t, 32);
        const auto out = tile_apply(img, t, [](const Image& tile) { return tile.as_map(); });
        EXPECT_EQ(out.data, img.data);
    }
}

TEST(Tiling, RejectsIndivisibleOrMismatchedTiles) {
    const auto lo = build_expert(patch_spec(32, 8), 2);
    EXPECT_THROW(tile_encode(lo, random_image(1, 48), 5), InvalidArgument);
    EXPECT_THROW(tile_encode(lo, random_image(1, 48), 2), InvalidArgument);
}

TEST(NormalizeTokens, AlreadyAtTargetIsFlattenOnly) {
    const auto m = random_map(1, 8, 8, 3);
    EXPECT_EQ(normalize_tokens(m, 64, {}).data, m.data);
}

TEST(NormalizeTokens, SmallGridIsUpsampled) {
    const auto m = random_map(2, 4, 4, 3);
    const auto t = normalize_tokens(m, 64, {});
    EXPECT_EQ(t.length, 64);
    EXPECT_EQ(t.data, flatten(bilinear_resize(m, 8, 8)).data);
}

TEST(NormalizeTokens, UnshuffleThenTarget) {
    const auto m = random_map(3, 16, 16, 4);
    const auto t = normalize_tokens(m, 64, {PostProcess::Kind::pixel_unshuffle, 2});
    EXPECT_EQ(t.length, 64);
    EXPECT_EQ(t.dim, 16);
    // Token (y, x) channel (dy*2+dx)*4+c is pixel (2y+dy, 2x+dx) channel c.
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int c = 0; c < 4; ++c)
                        EXPECT_EQ(t.token(y * 8 + x)[(dy * 2 + dx) * 4 + c], m.at(2 * y + dy, 2 * x + dx, c));
}

TEST(NormalizeTokens, ExactCountForAllGridSides) {
    for (int side = 2; side <= 32; ++side) {
        const FeatureMap m(side, side, 2, 1.0);
        for (int target : {4, 16, 64}) EXPECT_EQ(normalize_tokens(m, target, {}).length, target) << side;
        const PostProcess resize{PostProcess::Kind::resize, 1};
        EXPECT_EQ(normalize_tokens(m, 64, resize).length, 64);
    }
}

TEST(NormalizeTokens, NonSquareTargetRejected) {
    EXPECT_THROW(normalize_tokens(random_map(1, 4, 4, 1), 60, {}), InvalidArgument);
}

TEST(ExpertImage, ResampleIsIdentityAtSameResolution) {
    const auto img = random_image(1, 16);
    EXPECT_EQ(resample(img, 16), img);
    EXPECT_EQ(resample(img, 8).resolution, 8);
}
