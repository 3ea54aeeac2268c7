// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. `acceptance K` runs criterion K (1-8) and prints one
// line "criterion K: PASS|FAIL ..." with the measured values; `acceptance`
// with no argument runs all of them. Exit status is 0 only if every
// requested criterion passed. Tolerances, seeds and configs are pinned here
// and under data/configs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "mixlab/config.hpp"
#include "mixlab/experiment.hpp"
#include "mixlab/fusion.hpp"
#include "mixlab/registry.hpp"
#include "mixlab/selector.hpp"

using namespace mixlab;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- pinned values

constexpr double kAvgTolerance = 1.0;        // criteria 1 and 2
constexpr double kGradThreshold = 1e-4;      // criterion 3
constexpr double kExactTolerance = 1e-12;    // criterion 4
constexpr double kComplementMargin = 0.05;   // criterion 6
constexpr double kUnfreezeMargin = 0.05;     // criterion 7
constexpr int kHeldOut = 3000;               // criterion 6 evaluation size

constexpr double kBudgetSeconds[9] = {0, 1, 1, 120, 30, 300, 600, 600, 1e9};

std::string data(const std::string& rel) { return std::string(MIXLAB_DATA_DIR) + "/" + rel; }

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

std::string num(const char* f, double v) { return cli::fmt(f, v); }

// ---------------------------------------------------------------- 1: Avg reproduction

Outcome avg_reproduction() {
    Outcome o;
    const auto maxima = load_metric_maxima(data("fixtures/metrics.csv"));
    const std::map<std::string, std::size_t> rows{{"table1", 7}, {"table3", 12}, {"table4", 9}, {"table5", 11}};
    double worst = 0.0;
    std::size_t total = 0;
    for (const auto& [name, n] : rows) {
        const auto t = load_score_fixture(data("fixtures/" + name + ".csv"), maxima);
        o.require(t.rows.size() == n, name + " has " + std::to_string(t.rows.size()) + " rows, expected " +
                                          std::to_string(n));
        for (const auto& c : recompute_table_avgs(t, kAvgTolerance)) {
            worst = std::max(worst, c.abs_diff);
            o.require(!c.flagged, name + " " + c.combination + " off by " + num("%.3f", c.abs_diff));
            ++total;
        }
    }
    o.detail = std::to_string(total) + " rows, max |diff| " + num("%.3f", worst) + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 2: selection path

Outcome selection_path() {
    Outcome o;
    const auto maxima = load_metric_maxima(data("fixtures/metrics.csv"));
    const auto t = load_score_fixture(data("fixtures/table5.csv"), maxima);
    const auto names = load_encoder_names(data("fixtures/encoders.csv"));
    const auto h = greedy_select({"C", "D", "E", "F"}, Combination{{"A", "B"}, ""}, table_evaluator(t));
    const std::vector<std::pair<std::string, double>> want{
        {"A+B+F", 665.3}, {"A+B+F+E", 666.1}, {"A+B+F+E+C", 666.5}, {"A+B+F+E+C+D", 656.3}};
    o.require(h.rounds.size() == want.size(), "expected 4 rounds");
    std::string path;
    for (std::size_t r = 0; r < std::min(want.size(), h.rounds.size()); ++r) {
        const auto& got = h.rounds[r];
        path += (r ? " " : "") + got.retained.label() + "=" + num("%.2f", got.retained_avg);
        o.require(got.retained.label() == want[r].first, "round " + std::to_string(r + 1) + " retained " + got.retained.label());
        o.require(std::abs(got.retained_avg - want[r].second) <= kAvgTolerance,
                  "round " + std::to_string(r + 1) + " avg " + num("%.2f", got.retained_avg));
    }
    std::set<std::string> rec;
    for (const auto& e : h.recommendation.encoders) rec.insert(names.at(e));
    const std::set<std::string> want_rec{"CLIP", "ConvNeXt", "EVA-02", "Pix2Struct", "SAM"};
    o.require(rec == want_rec, "recommendation " + h.recommendation.label());
    o.require(std::abs(h.recommendation_avg - 666.5) <= kAvgTolerance, "recommendation avg off");
    std::string rec_names;
    for (const auto& n : rec) rec_names += (rec_names.empty() ? "" : ", ") + n;
    o.detail = path + "; recommendation {" + rec_names + "}" + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 3: gradient suite

Outcome gradient_suite() {
    Outcome o;
    const auto reg = default_grad_registry();
    const std::vector<std::string> required{"bilinear_resize", "bilinear_sample", "encode_patch_linear",
                                            "encode_conv_stack", "fuse_sequence_append", "fuse_channel_concat",
                                            "fuse_llava_hr", "fuse_mini_gemini", "fuse_deformable",
                                            "project", "lm_forward", "loss"};
    for (const auto& op : required) o.require(reg.contains(op), "op " + op + " not registered");
    GradCheckOptions opt;
    opt.eps = 1e-5;
    double worst = 0.0;
    std::string worst_op;
    int checks = 0;
    for (const auto& op : reg.ops())
        for (std::uint64_t seed : {1, 2, 3}) {
            const auto r = reg.check(op, seed, opt);
            ++checks;
            if (r.max_rel_error > worst) worst = r.max_rel_error, worst_op = op;
            o.require(r.max_rel_error < kGradThreshold, op + " seed " + std::to_string(seed) + " rel err " +
                                                            num("%.2e", r.max_rel_error));
        }
    o.detail = std::to_string(reg.ops().size()) + " ops x 3 seeds (" + std::to_string(checks) + " checks), worst " +
               num("%.2e", worst) + " (" + worst_op + ")" + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 4: structural invariants

FeatureMap random_map(std::uint64_t seed, int h, int w, int c) {
    Rng rng(seed);
    FeatureMap m(h, w, c);
    for (double& v : m.data) v = rng.uniform(-1.0, 1.0);
    return m;
}

TokenSequence random_tokens(std::uint64_t seed, int n, int d) {
    Rng rng(seed);
    TokenSequence t(n, d);
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

Outcome structural_invariants() {
    Outcome o;
    int checks = 0;
    // Pixel shuffle round trip, bit-exact.
    for (int r : {1, 2, 3, 4})
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto m = random_map(s, 4 * r, 2 * r, 3);
            o.require(pixel_shuffle(pixel_shuffle(m, r, ShuffleDirection::unshuffle), r, ShuffleDirection::shuffle) == m, "unshuffle/shuffle round trip r=" + std::to_string(r));
            const auto small = random_map(s + 100, 3, 5, 2 * r * r);
            o.require(pixel_shuffle(pixel_shuffle(small, r, ShuffleDirection::shuffle), r, ShuffleDirection::unshuffle) == small, "shuffle/unshuffle round trip r=" + std::to_string(r));
            checks += 2;
        }
    // Resize identity and linearity.
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto a = random_map(s, 7, 9, 3), b = random_map(s + 50, 7, 9, 3);
        o.require(max_diff(bilinear_resize(a, 7, 9).data, a.data) <= kExactTolerance, "resize identity");
        FeatureMap mix(7, 9, 3);
        for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = 0.3 * a.data[i] - 1.7 * b.data[i];
        const auto ra = bilinear_resize(a, 12, 5), rb = bilinear_resize(b, 12, 5), rm = bilinear_resize(mix, 12, 5);
        std::vector<double> lin(rm.data.size());
        for (std::size_t i = 0; i < lin.size(); ++i) lin[i] = 0.3 * ra.data[i] - 1.7 * rb.data[i];
        o.require(max_diff(rm.data, lin) <= kExactTolerance, "resize linearity");
        checks += 2;
    }
    // Token-count normalisation for every grid side 2..32.
    for (int side = 2; side <= 32; ++side) {
        const FeatureMap m(side, side, 2, 0.5);
        for (int target : {4, 16, 64, 256}) {
            o.require(normalize_tokens(m, target, {}).length == target,
                      "normalize side " + std::to_string(side) + " target " + std::to_string(target));
            o.require(normalize_tokens(m, target, {PostProcess::Kind::resize, 1}).length == target, "normalize resize");
            checks += 2;
        }
        if (side % 2 == 0) {
            o.require(normalize_tokens(m, 64, {PostProcess::Kind::pixel_unshuffle, 2}).length == 64, "normalize unshuffle");
            ++checks;
        }
    }
    // Fusion shape contracts and attention row sums.
    for (int side : {2, 4, 8}) {
        const int n = side * side;
        for (Strategy s : {Strategy::SA, Strategy::CC, Strategy::LH, Strategy::MG, Strategy::DA}) {
            FusionConfig cfg;
            cfg.strategy = s;
            cfg.window = 2;
            std::vector<FusionInput> in(2);
            in[0].tokens = random_tokens(side, n, 6);
            if (is_injection(s)) {
                in[1].map = random_map(side + 1, 2 * side, 2 * side, 5);
                Rng rng(side + 2);
                cfg.params.push_back(make_injection_params(cfg, 6, 5, rng));
            } else {
                in[1].tokens = random_tokens(side + 3, n, s == Strategy::SA ? 6 : 5);
            }
            const auto out = fuse(cfg, in);
            const int want_len = s == Strategy::SA ? 2 * n : n;
            const int want_dim = s == Strategy::CC ? 11 : 6;
            o.require(out.length == want_len && out.dim == want_dim,
                      std::string(to_string(s)) + " shape at side " + std::to_string(side));
            ++checks;
            if (s == Strategy::MG) {
                const auto attn = mini_gemini_attention(in[0].tokens, in[1].map,
                                                        std::get<MiniGeminiParams>(cfg.params[0]), 2);
                for (int t = 0; t < attn.rows; ++t) {
                    double sum = 0.0;
                    for (int k = 0; k < attn.cols; ++k) sum += attn(t, k);
                    o.require(std::abs(sum - 1.0) <= kExactTolerance, "MG row sum");
                    ++checks;
                }
            }
        }
    }
    // Tile reassembly with an identity encoder.
    for (int t : {1, 2, 4, 8}) {
        Rng rng(t);
        Image img(64);
        for (double& v : img.data) v = rng.uniform();
        const auto out = tile_apply(img, t, [](const Image& tile) { return tile.as_map(); });
        o.require(out.data == img.data, "tile identity t=" + std::to_string(t));
        ++checks;
    }
    o.detail = std::to_string(checks) + " checks" + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 5: freeze-mask audit

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

Outcome freeze_audit() {
    Outcome o;
    std::string summary;
    for (const char* name : {"desk_cc.ini", "desk_cc_prealign.ini"}) {
        const RunConfig c = parse_config(data(std::string("configs/") + name));
        const auto a = build_assembly(c.model, model_seed(c));
        const auto plan = make_stage_plan(c.pre_align, a, c.budgets);
        const auto train = gen_dataset(train_data_seed(c), c.train_size);
        const auto r = run_plan(a, plan, train, plan_seed(c), c.budgets.batch);
        int outside = 0;
        for (const auto& rec : r.records) {
            const auto bad = mask_violations(rec);
            outside += static_cast<int>(bad.size());
            for (const auto& id : bad) o.require(false, std::string(name) + " " + rec.stage.name + " changed " + id);
            o.require(!rec.diff.changed.empty(), std::string(name) + " " + rec.stage.name + " changed nothing");
            const bool stage_one = rec.stage.name == "align" || starts_with(rec.stage.name, "prealign.");
            for (const auto& id : rec.diff.changed) {
                if (rec.stage.name == "align")
                    o.require(starts_with(id, "projector."), std::string(name) + " align changed " + id);
                if (stage_one) o.require(!starts_with(id, "lm."), std::string(name) + " " + rec.stage.name + " changed " + id);
            }
        }
        summary += std::string(summary.empty() ? "" : ", ") + name + ": " + std::to_string(r.records.size()) +
                   " stages, " + std::to_string(outside) + " groups changed outside mask";
    }
    o.detail = summary + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 6, 7: learned properties

ExperimentResult run_config(const std::string& name, int eval_size = 0) {
    RunConfig c = parse_config(data("configs/" + name));
    if (eval_size) c.eval_size = eval_size;
    return run_experiment(c);
}

std::string accuracies(const EvalResult& e) {
    return "color " + num("%.3f", e.accuracy[0]) + " glyph " + num("%.3f", e.accuracy[1]) + " count " +
           num("%.3f", e.accuracy[2]) + " macro " + num("%.3f", e.macro_avg);
}

Outcome complementary_experts() {
    Outcome o;
    const auto lo = run_config("desk_lo.ini", kHeldOut);
    const auto hi = run_config("desk_hi.ini", kHeldOut);
    const auto cc = run_config("desk_cc.ini", kHeldOut);
    const double margin = cc.eval.macro_avg - std::max(lo.eval.macro_avg, hi.eval.macro_avg);
    o.require(margin >= kComplementMargin,
              "margin " + num("%.4f", margin) + " < " + num("%.2f", kComplementMargin));
    o.detail = "lo [" + accuracies(lo.eval) + "], hi [" + accuracies(hi.eval) + "], cc [" + accuracies(cc.eval) +
               "], margin " + num("%.4f", margin) + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

Outcome unfreezing() {
    Outcome o;
    const auto unfrozen = run_config("lo64_unfrozen.ini");
    const auto frozen = run_config("lo64_frozen.ini");
    const double gap = unfrozen.eval.accuracy[1] - frozen.eval.accuracy[1];
    o.require(gap >= kUnfreezeMargin, "glyph gap " + num("%.4f", gap) + " < " + num("%.2f", kUnfreezeMargin));
    o.detail = "unfrozen [" + accuracies(unfrozen.eval) + "], frozen [" + accuracies(frozen.eval) + "], glyph gap " +
               num("%.4f", gap) + (o.detail.empty() ? "" : "; " + o.detail);
    return o;
}

// ---------------------------------------------------------------- 8: determinism

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome determinism() {
    Outcome o;
    const fs::path root = fs::temp_directory_path() / "mixlab_acceptance_determinism";
    fs::remove_all(root);
    std::string files[2][2];
    for (int k = 0; k < 2; ++k) {
        cli::TrainOptions t;
        t.config = data("configs/determinism.ini");
        t.out_dir = (root / ("run" + std::to_string(k))).string();
        std::ostringstream out, err;
        const int code = cli::cmd_train(t, out, err);
        o.require(code == cli::kExitOk, "train exited " + std::to_string(code) + ": " + err.str());
        files[k][0] = slurp(root / ("run" + std::to_string(k)) / "losses.csv");
        files[k][1] = slurp(root / ("run" + std::to_string(k)) / "results.csv");
    }
    o.require(!files[0][0].empty() && !files[0][1].empty(), "empty artifacts");
    o.require(files[0][0] == files[1][0], "losses.csv differs");
    o.require(files[0][1] == files[1][1], "results.csv differs");
    o.detail = "losses.csv " + std::to_string(files[0][0].size()) + " bytes, results.csv " +
               std::to_string(files[0][1].size()) + " bytes, identical across runs" +
               (o.detail.empty() ? "" : "; " + o.detail);
    fs::remove_all(root);
    return o;
}

const std::function<Outcome()> kCriteria[9] = {
    nullptr, avg_reproduction, selection_path, gradient_suite, structural_invariants,
    freeze_audit, complementary_experts, unfreezing, determinism,
};

const char* kNames[9] = {"", "avg reproduction", "selection path", "gradient suite", "structural invariants",
                         "freeze-mask audit", "complementary experts", "unfreezing", "determinism"};

bool run(int k) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = kCriteria[k]();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("error: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (secs > kBudgetSeconds[k]) {
        o.pass = false;
        o.detail += "; runtime " + num("%.1f", secs) + " s over budget " + num("%g", kBudgetSeconds[k]) + " s";
    }
    std::cout << "criterion " << k << ": " << (o.pass ? "PASS" : "FAIL") << " [" << kNames[k] << "] " << o.detail
              << " (" << num("%.2f", secs) << " s)" << std::endl;
    return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<int> which;
    for (int i = 1; i < argc; ++i) {
        const int k = std::atoi(argv[i]);
        if (k < 1 || k > 8) {
            std::cerr << "usage: acceptance [K ...] with K in 1..8\n";
            return 2;
        }
        which.push_back(k);
    }
    if (which.empty())
        for (int k = 1; k <= 8; ++k) which.push_back(k);
    bool all = true;
    for (int k : which) all = run(k) && all;
    return all ? 0 : 1;
}
