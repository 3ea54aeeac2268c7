// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests.

#pragma once

#include <cstdint>
#include <string>

#include "mixlab/experts.hpp"
#include "mixlab/linalg.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensorlab.hpp"

namespace mixlab::testing {

inline FeatureMap random_map(std::uint64_t seed, int h, int w, int c, double scale = 1.0) {
    Rng rng(seed);
    FeatureMap m(h, w, c);
    for (double& v : m.data) v = rng.uniform(-scale, scale);
    return m;
}

inline TokenSequence random_tokens(std::uint64_t seed, int n, int d, double scale = 1.0) {
    Rng rng(seed);
    TokenSequence t(n, d);
    for (double& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

inline Image random_image(std::uint64_t seed, int res) {
    Rng rng(seed);
    Image img(res);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

inline Matrix random_matrix(std::uint64_t seed, int r, int c, double scale = 1.0) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& v : m.data) v = rng.uniform(-scale, scale);
    return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

inline std::string data_path(const std::string& rel) { return std::string(MIXLAB_DATA_DIR) + "/" + rel; }

}  // namespace mixlab::testing
