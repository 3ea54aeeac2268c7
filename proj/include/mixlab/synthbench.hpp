// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic three-task benchmark (background colour, glyph identity,
// dot count) on 64x64 RGB images, plus accuracy evaluation and a flat binary
// export format.
//
// Binary dataset format (all integers little-endian):
//   bytes 0..3   magic "MXDS"
//   u32          version (1)
//   u64          n, number of records
//   u32          image resolution R
//   n records of: u8 task, u8 answer, R*R*3 float64 pixels (row, col, channel)

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/experts.hpp"
#include "mixlab/model.hpp"
#include "mixlab/rng.hpp"

namespace mixlab {

enum class Task : int { color = 0, glyph = 1, count = 2 };

inline constexpr int kNumTasks = 3;
inline constexpr std::array<int, kNumTasks> kTaskClasses = {8, 16, 5};
inline constexpr int kImageResolution = 64;
inline constexpr int kGlyphSize = 5;
inline constexpr int kDotSize = 3;

inline const char* to_string(Task t) {
    switch (t) {
        case Task::color: return "color";
        case Task::glyph: return "glyph";
        case Task::count: return "count";
    }
    return "?";
}

struct Sample {
    Image image;
    Task task = Task::color;
    int answer = 0;
};

/// Background palette. Mid-range so black glyph ink and white dots stay distinct.
inline constexpr std::array<std::array<double, 3>, 8> kPalette = {{
    {0.80, 0.25, 0.25},
    {0.25, 0.70, 0.30},
    {0.25, 0.35, 0.80},
    {0.80, 0.75, 0.25},
    {0.70, 0.30, 0.75},
    {0.25, 0.70, 0.75},
    {0.85, 0.55, 0.20},
    {0.50, 0.50, 0.50},
}};

/// Sixteen 5x5 glyphs (hex digits 0-F), '#' = ink.
inline constexpr std::array<std::array<const char*, 5>, 16> kGlyphs = {{
    {".###.", "#...#", "#...#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "..##.", ".#...", "#####"},
    {"####.", "....#", ".###.", "....#", "####."},
    {"#..#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "####."},
    {".###.", "#....", "####.", "#...#", ".###."},
    {"#####", "...#.", "..#..", ".#...", ".#..."},
    {".###.", "#...#", ".###.", "#...#", ".###."},
    {".###.", "#...#", ".####", "....#", ".###."},
    {"..#..", ".#.#.", "#...#", "#####", "#...#"},
    {"####.", "#...#", "####.", "#...#", "####."},
    {".####", "#....", "#....", "#....", ".####"},
    {"####.", "#...#", "#...#", "#...#", "####."},
    {"#####", "#....", "####.", "#....", "#####"},
    {"#####", "#....", "####.", "#....", "#...."},
}};

inline bool glyph_ink(int glyph, int r, int c) { return kGlyphs[glyph][r][c] == '#'; }

namespace detail {

struct Box {
    int r, c, size;
    /// Overlap test with a one-pixel gap required between boxes.
    bool touches(const Box& o) const {
        return r - 1 < o.r + o.size && o.r - 1 < r + size && c - 1 < o.c + o.size && o.c - 1 < c + size;
    }
};

}  // namespace detail

/// Where the elements of a sample were drawn; exposed for tests.
struct SampleLayout {
    int color = 0;
    int glyph = 0;
    int glyph_row = 0;
    int glyph_col = 0;
    std::vector<std::pair<int, int>> dots;
};

inline Image render(const SampleLayout& layout) {
    Image img(kImageResolution);
    for (int r = 0; r < kImageResolution; ++r)
        for (int c = 0; c < kImageResolution; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = kPalette[layout.color][ch];
    for (int r = 0; r < kGlyphSize; ++r)
        for (int c = 0; c < kGlyphSize; ++c)
            if (glyph_ink(layout.glyph, r, c))
                for (int ch = 0; ch < 3; ++ch) img.at(layout.glyph_row + r, layout.glyph_col + c, ch) = 0.0;
    for (const auto& [dr, dc] : layout.dots)
        for (int r = 0; r < kDotSize; ++r)
            for (int c = 0; c < kDotSize; ++c)
                for (int ch = 0; ch < 3; ++ch) img.at(dr + r, dc + c, ch) = 1.0;
    return img;
}

/// Layout of sample `index` of the dataset with `seed`; independent of n.
inline SampleLayout sample_layout(std::uint64_t seed, std::uint64_t index) {
    Rng rng(derive_seed(seed, index));
    SampleLayout s;
    s.color = static_cast<int>(rng.below(kPalette.size()));
    s.glyph = static_cast<int>(rng.below(kGlyphs.size()));
    const int span_g = kImageResolution - kGlyphSize + 1;
    s.glyph_row = static_cast<int>(rng.below(span_g));
    s.glyph_col = static_cast<int>(rng.below(span_g));
    const int k = static_cast<int>(rng.below(5));
    std::vector<detail::Box> placed{{s.glyph_row, s.glyph_col, kGlyphSize}};
    const int span_d = kImageResolution - kDotSize + 1;
    while (static_cast<int>(s.dots.size()) < k) {
        const detail::Box b{static_cast<int>(rng.below(span_d)), static_cast<int>(rng.below(span_d)), kDotSize};
        bool ok = true;
        for (const auto& p : placed) ok = ok && !b.touches(p);
        if (!ok) continue;
        placed.push_back(b);
        s.dots.emplace_back(b.r, b.c);
    }
    return s;
}

/// n samples; tasks cycle color, glyph, count by index.
inline std::vector<Sample> gen_dataset(std::uint64_t seed, int n) {
    if (n < 1) throw InvalidArgument("gen_dataset: n must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto layout = sample_layout(seed, static_cast<std::uint64_t>(i));
        Sample s;
        s.image = render(layout);
        s.task = static_cast<Task>(i % kNumTasks);
        switch (s.task) {
            case Task::color: s.answer = layout.color; break;
            case Task::glyph: s.answer = layout.glyph; break;
            case Task::count: s.answer = static_cast<int>(layout.dots.size()); break;
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Downsample to `low` px then nearest-neighbour upsample back.
inline Image degrade(const Image& img, int low) {
    const Image small = resample(img, low);
    Image out(img.resolution);
    for (int r = 0; r < img.resolution; ++r)
        for (int c = 0; c < img.resolution; ++c) {
            const int sr = r * low / img.resolution;
            const int sc = c * low / img.resolution;
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = small.at(sr, sc, ch);
        }
    return out;
}

struct EvalResult {
    std::array<double, kNumTasks> accuracy{};
    std::array<int, kNumTasks> count{};
    double macro_avg = 0.0;
};

/// Argmax-of-logits accuracy per task; macro average over tasks present.
/// Ties go to the lowest class id.
inline EvalResult evaluate(const ModelAssembly& a, std::span<const Sample> data, const Route& route = Route::full()) {
    if (data.empty()) throw InvalidArgument("evaluate: empty dataset");
    EvalResult r;
    std::array<int, kNumTasks> correct{};
    for (const auto& s : data) {
        const auto logits = forward(a, s.image, static_cast<int>(s.task), route);
        const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
        const int t = static_cast<int>(s.task);
        r.count[t]++;
        if (best == s.answer) correct[t]++;
    }
    int present = 0;
    for (int t = 0; t < kNumTasks; ++t) {
        if (r.count[t] == 0) continue;
        r.accuracy[t] = static_cast<double>(correct[t]) / r.count[t];
        r.macro_avg += r.accuracy[t];
        ++present;
    }
    r.macro_avg /= present;
    return r;
}

// ---------------------------------------------------------------- binary IO

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    std::array<unsigned char, sizeof(T)> b{};
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> b{};
    is.read(reinterpret_cast<char*>(b.data()), sizeof(T));
    if (!is) throw ParseError("dataset", 0, "truncated file");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline constexpr char kDatasetMagic[4] = {'M', 'X', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, std::span<const Sample> data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidArgument("cannot open " + path + " for writing");
    os.write(kDatasetMagic, 4);
    detail::put_le<std::uint32_t>(os, kDatasetVersion);
    detail::put_le<std::uint64_t>(os, data.size());
    const int res = data.empty() ? kImageResolution : data[0].image.resolution;
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(res));
    for (const auto& s : data) {
        if (s.image.resolution != res) throw InvalidArgument("write_dataset: mixed resolutions");
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.task));
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.answer));
        for (double v : s.image.data) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
}

inline std::vector<Sample> read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidArgument("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kDatasetMagic, 4) != 0) throw ParseError(path, 0, "bad magic");
    if (detail::get_le<std::uint32_t>(is) != kDatasetVersion) throw ParseError(path, 0, "unsupported version");
    const auto n = detail::get_le<std::uint64_t>(is);
    const auto res = static_cast<int>(detail::get_le<std::uint32_t>(is));
    std::vector<Sample> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        Sample s;
        const int task = detail::get_le<std::uint8_t>(is);
        if (task >= kNumTasks) throw ParseError(path, 0, "bad task id in record " + std::to_string(i));
        s.task = static_cast<Task>(task);
        s.answer = detail::get_le<std::uint8_t>(is);
        s.image = Image(res);
        for (double& v : s.image.data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace mixlab
