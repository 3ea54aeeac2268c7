// SPDX-License-Identifier: Apache-2.0
//
// Toy vision experts: a patch-linear transformer analog with a learned
// position-embedding grid and a strided conv stack. Both are trained from a
// seeded random init and expose hand-written backward passes.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/linalg.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab {

enum class Arch { patch_linear, conv_stack };

inline const char* to_string(Arch a) { return a == Arch::patch_linear ? "patch-linear" : "conv-stack"; }

struct PostProcess {
    enum class Kind { none, resize, pixel_unshuffle };
    Kind kind = Kind::none;
    int factor = 1;  // pixel_unshuffle only

    bool operator==(const PostProcess&) const = default;
};

inline std::string to_string(const PostProcess& p) {
    switch (p.kind) {
        case PostProcess::Kind::none: return "none";
        case PostProcess::Kind::resize: return "resize";
        case PostProcess::Kind::pixel_unshuffle: return "pixel-unshuffle:" + std::to_string(p.factor);
    }
    return "none";
}

struct ExpertSpec {
    std::string name;
    Arch arch = Arch::patch_linear;
    int native_resolution = 32;
    /// Patch size for patch-linear; total stride (2^depth) for conv-stack.
    int patch_or_stride = 8;
    int embed_dim = 16;
    int depth = 1;
    PostProcess post_process;
    bool frozen_default = false;

    std::vector<std::string> violations() const {
        std::vector<std::string> v;
        if (name.empty()) v.emplace_back("name must be non-empty");
        if (native_resolution < 1) v.emplace_back("native_resolution must be positive");
        if (patch_or_stride < 1) v.emplace_back("patch_or_stride must be positive");
        if (embed_dim < 1) v.emplace_back("embed_dim must be positive");
        if (depth < 0) v.emplace_back("depth must be nonnegative");
        if (post_process.kind == PostProcess::Kind::pixel_unshuffle && post_process.factor < 1)
            v.emplace_back("pixel-unshuffle factor must be positive");
        if (!v.empty()) return v;
        if (arch == Arch::patch_linear) {
            if (native_resolution % patch_or_stride != 0)
                v.emplace_back("patch-linear: native_resolution " + std::to_string(native_resolution) +
                               " not divisible by patch " + std::to_string(patch_or_stride));
        } else {
            if (depth > 20) {
                v.emplace_back("conv-stack: depth too large");
                return v;
            }
            const int stride = 1 << depth;
            if (native_resolution % stride != 0)
                v.emplace_back("conv-stack: native_resolution " + std::to_string(native_resolution) +
                               " not divisible by 2^depth = " + std::to_string(stride));
            if (patch_or_stride != stride)
                v.emplace_back("conv-stack: stride " + std::to_string(patch_or_stride) + " must equal 2^depth = " +
                               std::to_string(stride));
        }
        return v;
    }

    void validate() const {
        const auto v = violations();
        if (v.empty()) return;
        std::string msg = "invalid expert spec '" + name + "':";
        for (const auto& s : v) msg += " " + s + ";";
        throw ValidationError(msg);
    }
};

struct MixerBlock {
    Matrix w1;     // D x D
    Matrix w2;     // D x D
    Matrix alpha;  // 1 x 1, weight of the all-token mean
};

struct ConvLayer {
    Matrix weight;  // C_out x (3*3*C_in), tap-major then input channel
    Matrix bias;    // C_out x 1
};

struct ExpertParams {
    Matrix patch_proj;  // patch-linear: D x (p*p*3)
    Matrix pos_embed;   // patch-linear: (P*P) x D
    int pos_side = 0;
    std::vector<MixerBlock> blocks;
    std::vector<ConvLayer> convs;
    Matrix out_proj;  // conv-stack: D x C_last

    template <class F>
    void for_each_group(F&& f) { visit(*this, f); }
    template <class F>
    void for_each_group(F&& f) const { visit(*this, f); }

private:
    template <class Self, class F>
    static void visit(Self& self, F& f) {
        if (!self.patch_proj.data.empty()) {
            f(std::string("patch_proj"), self.patch_proj);
            f(std::string("pos_embed"), self.pos_embed);
            for (std::size_t k = 0; k < self.blocks.size(); ++k) {
                const std::string p = "block" + std::to_string(k) + ".";
                f(p + "w1", self.blocks[k].w1);
                f(p + "w2", self.blocks[k].w2);
                f(p + "alpha", self.blocks[k].alpha);
            }
        }
        for (std::size_t k = 0; k < self.convs.size(); ++k) {
            const std::string p = "conv" + std::to_string(k) + ".";
            f(p + "weight", self.convs[k].weight);
            f(p + "bias", self.convs[k].bias);
        }
        if (!self.out_proj.data.empty()) f(std::string("out_proj"), self.out_proj);
    }
};

inline ExpertParams zeros_like(const ExpertParams& p) {
    ExpertParams z = p;
    z.for_each_group([](const std::string&, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
    return z;
}

struct ExpertState {
    ExpertSpec spec;
    ExpertParams params;
    bool frozen = false;

    /// Input side length this state encodes without further adaptation.
    int accepted_resolution() const {
        return spec.arch == Arch::patch_linear ? params.pos_side * spec.patch_or_stride : spec.native_resolution;
    }
    int grid_side(int resolution) const { return resolution / spec.patch_or_stride; }
    int output_side() const { return grid_side(accepted_resolution()); }
};

/// Square RGB image, values in [0, 1], same layout as FeatureMap.
struct Image {
    int resolution = 0;
    std::vector<double> data;

    Image() = default;
    explicit Image(int res, double fill = 0.0) : resolution(res), data(static_cast<std::size_t>(res) * res * 3, fill) {}

    double& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * resolution + c) * 3 + ch]; }
    double at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * resolution + c) * 3 + ch]; }

    FeatureMap as_map() const {
        FeatureMap m(resolution, resolution, 3);
        m.data = data;
        m.source_resolution = resolution;
        return m;
    }
    static Image from_map(const FeatureMap& m) {
        if (m.height != m.width || m.channels != 3) throw InvalidArgument("Image: map must be square with 3 channels");
        Image img(m.height);
        img.data = m.data;
        return img;
    }

    bool operator==(const Image& o) const { return resolution == o.resolution && data == o.data; }
};

/// Bilinear resample to a new square resolution (identity when unchanged).
inline Image resample(const Image& img, int resolution) {
    if (resolution == img.resolution) return img;
    return Image::from_map(bilinear_resize(img.as_map(), resolution, resolution));
}

inline double init_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

/// Seeded init: every group is U[-s, s] with s = 1/sqrt(fan_in), drawn in
/// group order from one stream.
inline ExpertState build_expert(const ExpertSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ExpertState st;
    st.spec = spec;
    st.frozen = spec.frozen_default;
    auto& p = st.params;
    const int d = spec.embed_dim;
    if (spec.arch == Arch::patch_linear) {
        const int patch = spec.patch_or_stride;
        const int fan = patch * patch * 3;
        p.pos_side = spec.native_resolution / patch;
        p.patch_proj = Matrix(d, fan);
        init_uniform(p.patch_proj, fan, rng);
        p.pos_embed = Matrix(p.pos_side * p.pos_side, d);
        init_uniform(p.pos_embed, d, rng);
        for (int k = 0; k < spec.depth; ++k) {
            MixerBlock b{Matrix(d, d), Matrix(d, d), Matrix(1, 1)};
            init_uniform(b.w1, d, rng);
            init_uniform(b.w2, d, rng);
            init_uniform(b.alpha, d, rng);
            p.blocks.push_back(std::move(b));
        }
    } else {
        int cin = 3;
        for (int k = 0; k < spec.depth; ++k) {
            const int cout = cin * 2;
            ConvLayer layer{Matrix(cout, 9 * cin), Matrix(cout, 1)};
            init_uniform(layer.weight, 9 * cin, rng);
            init_uniform(layer.bias, 9 * cin, rng);
            p.convs.push_back(std::move(layer));
            cin = cout;
        }
        p.out_proj = Matrix(d, cin);
        init_uniform(p.out_proj, cin, rng);
    }
    return st;
}

/// Intermediate activations kept by encode() for the backward pass.
struct EncodeCache {
    Matrix patches;                   // N x p*p*3
    std::vector<Matrix> block_in;     // per block, N x D
    std::vector<Matrix> block_hidden; // per block, tanh(W1 x), N x D
    std::vector<FeatureMap> conv_in;  // per conv layer input
    std::vector<FeatureMap> conv_out; // per conv layer tanh output
};

namespace detail {

inline void gather_patch3x3(const FeatureMap& in, int oy, int ox, std::span<double> buf) {
    const int c = in.channels;
    for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * oy + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
            const int x = 2 * ox + kx - 1;
            double* dst = buf.data() + (ky * 3 + kx) * c;
            if (y < 0 || y >= in.height || x < 0 || x >= in.width) {
                std::fill(dst, dst + c, 0.0);
            } else {
                const auto src = in.cell(y, x);
                std::copy(src.begin(), src.end(), dst);
            }
        }
    }
}

inline void scatter_patch3x3(FeatureMap& grad_in, int oy, int ox, std::span<const double> buf) {
    const int c = grad_in.channels;
    for (int ky = 0; ky < 3; ++ky) {
        const int y = 2 * oy + ky - 1;
        if (y < 0 || y >= grad_in.height) continue;
        for (int kx = 0; kx < 3; ++kx) {
            const int x = 2 * ox + kx - 1;
            if (x < 0 || x >= grad_in.width) continue;
            axpy(1.0, buf.subspan((ky * 3 + kx) * c, c), grad_in.cell(y, x));
        }
    }
}

/// Stride-2, pad-1, 3x3 convolution followed by tanh.
inline FeatureMap conv3x3_s2_tanh(const FeatureMap& in, const ConvLayer& layer) {
    const int cout = layer.weight.rows;
    FeatureMap out(in.height / 2, in.width / 2, cout);
    std::vector<double> buf(static_cast<std::size_t>(9) * in.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            gather_patch3x3(in, y, x, buf);
            auto o = out.cell(y, x);
            for (int k = 0; k < cout; ++k) o[k] = std::tanh(layer.bias.data[k] + dot(layer.weight.row(k), buf));
        }
    return out;
}

}  // namespace detail

/// Encodes an image at the expert's accepted resolution into a G x G x D grid.
///
/// patch-linear: patchify, project, add position embedding, then `depth`
/// blocks of x <- x + W2 tanh(W1 x) + alpha * mean_tokens(x).
/// conv-stack: `depth` stride-2 3x3 tanh convs (channels doubling), then a
/// 1x1 projection to embed_dim.
inline FeatureMap encode(const ExpertState& expert, const Image& image, EncodeCache* cache = nullptr) {
    const int res = expert.accepted_resolution();
    if (image.resolution != res) throw AdaptationRequired(expert.spec.name, res, image.resolution);
    const auto& p = expert.params;
    const int d = expert.spec.embed_dim;
    if (expert.spec.arch == Arch::patch_linear) {
        const int patch = expert.spec.patch_or_stride;
        const int g = res / patch;
        const int n = g * g;
        const int fan = patch * patch * 3;
        Matrix patches(n, fan);
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx) {
                auto row = patches.row(gy * g + gx);
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int ch = 0; ch < 3; ++ch)
                            row[(py * patch + px) * 3 + ch] = image.at(gy * patch + py, gx * patch + px, ch);
            }
        Matrix x(n, d);
        for (int t = 0; t < n; ++t) {
            auto xt = x.row(t);
            const auto pos = p.pos_embed.row(t);
            std::copy(pos.begin(), pos.end(), xt.begin());
            gemv_acc(p.patch_proj, patches.row(t), xt);
        }
        if (cache) {
            cache->patches = std::move(patches);
            cache->block_in.clear();
            cache->block_hidden.clear();
        }
        std::vector<double> mean(d);
        for (const auto& b : p.blocks) {
            std::fill(mean.begin(), mean.end(), 0.0);
            for (int t = 0; t < n; ++t) axpy(1.0 / n, x.row(t), mean);
            Matrix hidden(n, d);
            Matrix y = x;
            const double alpha = b.alpha.data[0];
            for (int t = 0; t < n; ++t) {
                auto h = hidden.row(t);
                gemv_acc(b.w1, x.row(t), h);
                for (double& v : h) v = std::tanh(v);
                auto yt = y.row(t);
                gemv_acc(b.w2, h, yt);
                axpy(alpha, mean, yt);
            }
            if (cache) {
                cache->block_in.push_back(std::move(x));
                cache->block_hidden.push_back(std::move(hidden));
            }
            x = std::move(y);
        }
        FeatureMap out(g, g, d);
        out.data = std::move(x.data);
        out.source_resolution = res;
        return out;
    }

    FeatureMap cur = image.as_map();
    if (cache) {
        cache->conv_in.clear();
        cache->conv_out.clear();
    }
    for (const auto& layer : p.convs) {
        FeatureMap next = detail::conv3x3_s2_tanh(cur, layer);
        if (cache) {
            cache->conv_in.push_back(std::move(cur));
            cache->conv_out.push_back(next);
        }
        cur = std::move(next);
    }
    FeatureMap out(cur.height, cur.width, d);
    for (int y = 0; y < cur.height; ++y)
        for (int x = 0; x < cur.width; ++x) gemv_acc(p.out_proj, cur.cell(y, x), out.cell(y, x));
    if (cache && p.convs.empty()) cache->conv_in.push_back(std::move(cur));
    else if (cache) cache->conv_in.push_back(cache->conv_out.back());
    out.source_resolution = res;
    return out;
}

/// Backward of encode(). Accumulates into `grads` (same layout as the
/// expert's params) and, when given, into `grad_image`.
inline void encode_backward(const ExpertState& expert, const EncodeCache& cache, const FeatureMap& grad_out,
                            ExpertParams& grads, FeatureMap* grad_image = nullptr) {
    const auto& p = expert.params;
    if (grad_image && grad_image->data.empty()) {
        const int res = expert.accepted_resolution();
        *grad_image = FeatureMap(res, res, 3);
    }
    const int d = expert.spec.embed_dim;
    if (expert.spec.arch == Arch::patch_linear) {
        const int n = grad_out.height * grad_out.width;
        Matrix g(n, d);
        g.data = grad_out.data;
        std::vector<double> gsum(d);
        std::vector<double> mean(d);
        std::vector<double> u(d);
        for (int k = static_cast<int>(p.blocks.size()) - 1; k >= 0; --k) {
            const auto& b = p.blocks[k];
            auto& gb = grads.blocks[k];
            const Matrix& x = cache.block_in[k];
            const Matrix& h = cache.block_hidden[k];
            std::fill(gsum.begin(), gsum.end(), 0.0);
            std::fill(mean.begin(), mean.end(), 0.0);
            for (int t = 0; t < n; ++t) {
                axpy(1.0, g.row(t), gsum);
                axpy(1.0 / n, x.row(t), mean);
            }
            gb.alpha.data[0] += dot(gsum, mean);
            const double alpha = b.alpha.data[0];
            Matrix gx(n, d);
            for (int t = 0; t < n; ++t) {
                const auto gt = g.row(t);
                const auto ht = h.row(t);
                ger_acc(gb.w2, gt, ht);
                std::fill(u.begin(), u.end(), 0.0);
                gemv_t_acc(b.w2, gt, u);
                for (int i = 0; i < d; ++i) u[i] *= 1.0 - ht[i] * ht[i];
                ger_acc(gb.w1, u, x.row(t));
                auto gxt = gx.row(t);
                std::copy(gt.begin(), gt.end(), gxt.begin());
                gemv_t_acc(b.w1, u, gxt);
                axpy(alpha / n, gsum, gxt);
            }
            g = std::move(gx);
        }
        const int patch = expert.spec.patch_or_stride;
        const int side = grad_out.height;
        std::vector<double> gpatch(cache.patches.cols);
        for (int t = 0; t < n; ++t) {
            const auto gt = g.row(t);
            axpy(1.0, gt, grads.pos_embed.row(t));
            ger_acc(grads.patch_proj, gt, cache.patches.row(t));
            if (!grad_image) continue;
            std::fill(gpatch.begin(), gpatch.end(), 0.0);
            gemv_t_acc(p.patch_proj, gt, gpatch);
            const int gy = t / side;
            const int gx = t % side;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int ch = 0; ch < 3; ++ch)
                        grad_image->at(gy * patch + py, gx * patch + px, ch) += gpatch[(py * patch + px) * 3 + ch];
        }
        return;
    }

    const FeatureMap& last = cache.conv_in.back();
    FeatureMap g(last.height, last.width, last.channels);
    for (int y = 0; y < last.height; ++y)
        for (int x = 0; x < last.width; ++x) {
            ger_acc(grads.out_proj, grad_out.cell(y, x), last.cell(y, x));
            gemv_t_acc(p.out_proj, grad_out.cell(y, x), g.cell(y, x));
        }
    for (int k = static_cast<int>(p.convs.size()) - 1; k >= 0; --k) {
        const auto& layer = p.convs[k];
        auto& gl = grads.convs[k];
        const FeatureMap& in = cache.conv_in[k];
        const FeatureMap& out = cache.conv_out[k];
        const bool need_input = k > 0 || grad_image != nullptr;
        FeatureMap gin(in.height, in.width, in.channels);
        std::vector<double> buf(static_cast<std::size_t>(9) * in.channels);
        std::vector<double> gbuf(buf.size());
        std::vector<double> dpre(layer.weight.rows);
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                const auto o = out.cell(y, x);
                const auto go = g.cell(y, x);
                for (int c = 0; c < layer.weight.rows; ++c) dpre[c] = go[c] * (1.0 - o[c] * o[c]);
                axpy(1.0, dpre, gl.bias.data);
                detail::gather_patch3x3(in, y, x, buf);
                ger_acc(gl.weight, dpre, buf);
                if (need_input) {
                    std::fill(gbuf.begin(), gbuf.end(), 0.0);
                    gemv_t_acc(layer.weight, dpre, gbuf);
                    detail::scatter_patch3x3(gin, y, x, gbuf);
                }
            }
        g = std::move(gin);
    }
    if (grad_image) axpy(1.0, g.data, grad_image->data);
}

/// Resizes the position-embedding grid to new_side x new_side. Conv-stack
/// experts have no position grid and are returned unchanged.
inline ExpertState interpolate_pos_embed(const ExpertState& expert, int new_side) {
    if (new_side < 1) throw InvalidArgument("interpolate_pos_embed: new grid side must be positive");
    if (expert.spec.arch != Arch::patch_linear) return expert;
    ExpertState out = expert;
    const int side = expert.params.pos_side;
    if (new_side == side) return out;
    FeatureMap grid(side, side, expert.spec.embed_dim);
    grid.data = expert.params.pos_embed.data;
    const FeatureMap resized = bilinear_resize(grid, new_side, new_side);
    out.params.pos_embed = Matrix(new_side * new_side, expert.spec.embed_dim);
    out.params.pos_embed.data = resized.data;
    out.params.pos_side = new_side;
    return out;
}

/// Splits an image into t x t non-overlapping tiles in raster order.
inline std::vector<Image> split_tiles(const Image& image, int t) {
    if (t < 1) throw InvalidArgument("tiling: grid must be positive");
    if (image.resolution % t != 0)
        throw InvalidArgument("tiling: resolution " + std::to_string(image.resolution) + " not divisible by " +
                              std::to_string(t));
    const int tr = image.resolution / t;
    std::vector<Image> tiles;
    tiles.reserve(static_cast<std::size_t>(t) * t);
    for (int ty = 0; ty < t; ++ty)
        for (int tx = 0; tx < t; ++tx) {
            Image tile(tr);
            for (int y = 0; y < tr; ++y)
                for (int x = 0; x < tr; ++x)
                    for (int ch = 0; ch < 3; ++ch) tile.at(y, x, ch) = image.at(ty * tr + y, tx * tr + x, ch);
            tiles.push_back(std::move(tile));
        }
    return tiles;
}

/// Reassembles t x t equally-shaped grids (raster order) into one grid.
inline FeatureMap merge_tiles(std::span<const FeatureMap> tiles, int t) {
    if (tiles.size() != static_cast<std::size_t>(t) * t) throw InvalidArgument("merge_tiles: expected t^2 tiles");
    const int h = tiles[0].height;
    const int w = tiles[0].width;
    const int c = tiles[0].channels;
    FeatureMap out(h * t, w * t, c);
    for (int ty = 0; ty < t; ++ty)
        for (int tx = 0; tx < t; ++tx) {
            const auto& tile = tiles[static_cast<std::size_t>(ty) * t + tx];
            if (tile.height != h || tile.width != w || tile.channels != c)
                throw InvalidArgument("merge_tiles: tiles differ in shape");
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const auto src = tile.cell(y, x);
                    std::copy(src.begin(), src.end(), out.cell(ty * h + y, tx * w + x).begin());
                }
        }
    return out;
}

/// Inverse of merge_tiles: cuts a grid into t x t equal blocks.
inline std::vector<FeatureMap> split_map_tiles(const FeatureMap& map, int t) {
    const int h = map.height / t;
    const int w = map.width / t;
    std::vector<FeatureMap> tiles;
    for (int ty = 0; ty < t; ++ty)
        for (int tx = 0; tx < t; ++tx) {
            FeatureMap tile(h, w, map.channels);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const auto src = map.cell(ty * h + y, tx * w + x);
                    std::copy(src.begin(), src.end(), tile.cell(y, x).begin());
                }
            tiles.push_back(std::move(tile));
        }
    return tiles;
}

/// Applies `encoder` (Image -> FeatureMap) to each tile and reassembles.
template <class Encoder>
FeatureMap tile_apply(const Image& image, int t, Encoder&& encoder) {
    const auto tiles = split_tiles(image, t);
    std::vector<FeatureMap> grids;
    grids.reserve(tiles.size());
    for (const auto& tile : tiles) grids.push_back(encoder(tile));
    return merge_tiles(grids, t);
}

inline FeatureMap tile_encode(const ExpertState& expert, const Image& image, int t) {
    if (t < 1 || image.resolution % t != 0)
        throw InvalidArgument("tile_encode: resolution " + std::to_string(image.resolution) +
                              " not divisible by tile grid " + std::to_string(t));
    const int tile_res = image.resolution / t;
    if (tile_res != expert.accepted_resolution())
        throw InvalidArgument("tile_encode: tile resolution " + std::to_string(tile_res) + " != expert '" +
                              expert.spec.name + "' accepted resolution " +
                              std::to_string(expert.accepted_resolution()));
    FeatureMap out = tile_apply(image, t, [&](const Image& tile) { return encode(expert, tile); });
    out.source_resolution = image.resolution;
    return out;
}

/// Post-processing step of token normalization. `resize_side` is the square
/// target used by PostProcess::Kind::resize.
inline FeatureMap apply_post_process(const FeatureMap& map, const PostProcess& post, int resize_side) {
    switch (post.kind) {
        case PostProcess::Kind::none: return map;
        case PostProcess::Kind::resize: return bilinear_resize(map, resize_side, resize_side);
        case PostProcess::Kind::pixel_unshuffle: return pixel_shuffle(map, post.factor, ShuffleDirection::unshuffle);
    }
    return map;
}

inline FeatureMap apply_post_process_backward(int in_h, int in_w, const PostProcess& post, const FeatureMap& grad_out) {
    switch (post.kind) {
        case PostProcess::Kind::none: return grad_out;
        case PostProcess::Kind::resize: return bilinear_resize_backward(grad_out, in_h, in_w);
        case PostProcess::Kind::pixel_unshuffle:
            return pixel_shuffle_backward(grad_out, post.factor, ShuffleDirection::unshuffle);
    }
    return grad_out;
}

inline int square_side(int count) {
    if (count < 1) throw InvalidArgument("token count must be positive");
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(count))));
    if (g * g != count)
        throw InvalidArgument("token count " + std::to_string(count) + " is not a perfect square");
    return g;
}

/// Post-process, bilinear-resize to g x g if needed, flatten row-major.
inline TokenSequence normalize_tokens(const FeatureMap& map, int target_count, const PostProcess& post) {
    const int g = square_side(target_count);
    FeatureMap m = apply_post_process(map, post, g);
    if (m.height != g || m.width != g) m = bilinear_resize(m, g, g);
    return flatten(m);
}

inline FeatureMap normalize_tokens_backward(int in_h, int in_w, int in_c, int target_count, const PostProcess& post,
                                            const TokenSequence& grad_tokens) {
    const int g = square_side(target_count);
    int ph = in_h;
    int pw = in_w;
    if (post.kind == PostProcess::Kind::resize) {
        ph = pw = g;
    } else if (post.kind == PostProcess::Kind::pixel_unshuffle) {
        ph = in_h / post.factor;
        pw = in_w / post.factor;
    }
    FeatureMap grad = as_grid(grad_tokens);
    if (ph != g || pw != g) grad = bilinear_resize_backward(grad, ph, pw);
    FeatureMap out = apply_post_process_backward(in_h, in_w, post, grad);
    if (out.channels != in_c) throw InvalidArgument("normalize_tokens_backward: channel mismatch");
    return out;
}

}  // namespace mixlab
