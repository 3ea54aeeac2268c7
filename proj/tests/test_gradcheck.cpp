// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <memory>
#include <vector>

#include "mixlab/gradcheck.hpp"
#include "mixlab/registry.hpp"

using namespace mixlab;

namespace {

// f(x) = sum_i w_i x_i^2 with a selectable defect in the analytic gradient.
GradProblem quadratic(std::uint64_t seed, double grad_scale) {
    struct State {
        std::vector<double> x, w;
    };
    auto st = std::make_shared<State>();
    Rng rng(seed);
    st->x.resize(10);
    st->w.resize(10);
    fill_uniform(st->x, rng);
    fill_uniform(st->w, rng);
    GradProblem p;
    p.state = st;
    p.tensors.push_back({"x", st->x});
    p.value = [st] {
        double s = 0.0;
        for (std::size_t i = 0; i < st->x.size(); ++i) s += st->w[i] * st->x[i] * st->x[i];
        return s;
    };
    p.gradient = [st, grad_scale] {
        std::vector<double> g(st->x.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_scale * 2.0 * st->w[i] * st->x[i];
        return std::vector<std::vector<double>>{g};
    };
    return p;
}

}  // namespace

TEST(RelativeError, IdenticalAndVanishingGradients) {
    const std::vector<double> a{1.0, -2.0}, b{1.0, -2.0}, z{0.0, 0.0};
    EXPECT_EQ(relative_error(a, b), 0.0);
    EXPECT_EQ(relative_error(z, z), 0.0);
    EXPECT_NEAR(relative_error(a, z), 1.0, 1e-15);
}

TEST(GradCheck, CorrectQuadraticPasses) {
    GradRegistry r;
    r.add("quadratic", [](std::uint64_t s) { return quadratic(s, 1.0); });
    for (std::uint64_t s : {1, 2, 3}) EXPECT_LT(r.check("quadratic", s).max_rel_error, 1e-8);
}

TEST(GradCheck, BrokenBackwardIsCaught) {
    GradRegistry r;
    r.add("scaled", [](std::uint64_t s) { return quadratic(s, 1.01); });
    r.add("flipped", [](std::uint64_t s) { return quadratic(s, -1.0); });
    EXPECT_GT(r.check("scaled", 1).max_rel_error, 1e-4);
    EXPECT_GT(r.check("flipped", 1).max_rel_error, 1.0);
}

TEST(GradCheck, BrokenRegisteredOpIsCaught) {
    // Wrap a real op and scale the analytic gradient of its last tensor.
    GradRegistry r;
    r.add("broken_deformable", [](std::uint64_t s) {
        GradProblem p = gradops::injection(s, Strategy::DA);
        auto g = p.gradient;
        p.gradient = [g] {
            auto out = g();
            for (auto& v : out.back()) v *= 1.5;
            return out;
        };
        return p;
    });
    EXPECT_GT(r.check("broken_deformable", 1).max_rel_error, 1e-4);
}

TEST(GradRegistry, UnknownOpAndDuplicateRegistration) {
    auto r = default_grad_registry();
    EXPECT_THROW(r.check("no_such_op", 1), LookupError);
    EXPECT_THROW(r.add("loss", gradops::ce_loss), InvalidArgument);
}

TEST(GradRegistry, CoversEveryDifferentiableOp) {
    const auto r = default_grad_registry();
    for (const char* op : {"bilinear_resize", "bilinear_sample", "encode_patch_linear", "encode_conv_stack",
                           "fuse_sequence_append", "fuse_channel_concat", "fuse_llava_hr", "fuse_mini_gemini",
                           "fuse_deformable", "project", "lm_forward", "loss"})
        EXPECT_TRUE(r.contains(op)) << op;
}

class RegisteredOp : public ::testing::TestWithParam<std::string> {};

TEST_P(RegisteredOp, PassesOnThreeSeeds) {
    const auto r = default_grad_registry();
    for (std::uint64_t s : {1, 2, 3}) {
        const auto rep = r.check(GetParam(), s);
        EXPECT_LT(rep.max_rel_error, 1e-4) << "seed " << s;
        EXPECT_GT(rep.checked_entries, 0);
        for (const auto& [name, e] : rep.per_parameter_errors) EXPECT_LT(e, 1e-4) << name << " seed " << s;
    }
}

INSTANTIATE_TEST_SUITE_P(All, RegisteredOp, ::testing::ValuesIn(default_grad_registry().ops()),
                         [](const ::testing::TestParamInfo<std::string>& info) { return info.param; });
