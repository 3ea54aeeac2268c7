// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat-sectioned key = value text file.
//
//   [run]            seed, out, pre_align, train_size, eval_size, batch,
//                    token_count, lm_dim, projector_hidden
//   [budgets]        pairs_steps, pairs_lr, sft_steps, sft_lr,
//                    prealign_steps, prealign_lr
//   [fusion]         strategy (SA|CC|LH|MG|DA), window, n_points, hidden
//   [expert NAME]    arch (patch-linear|conv-stack), native_resolution,
//                    patch_or_stride, embed_dim, depth,
//                    post_process (none|resize|pixel-unshuffle:F), frozen,
//                    input_resolution (0 = native), tiles
//
// Experts are fused in file order. '#' and ';' start comments. Unknown
// sections or keys, malformed values and invariant violations are rejected
// with the key path and line number.

#pragma once

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mixlab/error.hpp"
#include "mixlab/model.hpp"
#include "mixlab/selector.hpp"
#include "mixlab/trainer.hpp"

namespace mixlab {

struct RunConfig {
    ModelConfig model;
    Budgets budgets;
    bool pre_align = false;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    int train_size = 3000;
    int eval_size = 3000;
};

/// Training and evaluation data seeds, derived from the run seed.
inline std::uint64_t train_data_seed(const RunConfig& c) { return derive_seed(c.seed, 0x747261696eULL); }
inline std::uint64_t eval_data_seed(const RunConfig& c) { return derive_seed(c.seed, 0x6576616cULL); }

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct ConfigReader {
    std::string source;
    std::size_t line = 0;
    std::string key;  // full key path for messages

    [[noreturn]] void fail(const std::string& msg) const { throw ParseError(source, line, key + ": " + msg); }

    long long integer(const std::string& v) const {
        long long out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size()) fail("expected an integer, got '" + v + "'");
        return out;
    }

    int positive(const std::string& v) const {
        const auto x = integer(v);
        if (x < 1 || x > 1'000'000'000) fail("expected a positive integer, got '" + v + "'");
        return static_cast<int>(x);
    }

    int nonnegative(const std::string& v) const {
        const auto x = integer(v);
        if (x < 0 || x > 1'000'000'000) fail("expected a nonnegative integer, got '" + v + "'");
        return static_cast<int>(x);
    }

    std::uint64_t unsigned64(const std::string& v) const {
        std::uint64_t out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size()) fail("expected an unsigned integer, got '" + v + "'");
        return out;
    }

    double real(const std::string& v) const {
        char* end = nullptr;
        errno = 0;
        const double x = std::strtod(v.c_str(), &end);
        if (v.empty() || errno != 0 || end != v.c_str() + v.size() || !std::isfinite(x))
            fail("expected a number, got '" + v + "'");
        return x;
    }

    bool boolean(const std::string& v) const {
        if (v == "true" || v == "yes" || v == "1") return true;
        if (v == "false" || v == "no" || v == "0") return false;
        fail("expected true or false, got '" + v + "'");
    }

    Arch arch(const std::string& v) const {
        if (v == "patch-linear") return Arch::patch_linear;
        if (v == "conv-stack") return Arch::conv_stack;
        fail("expected patch-linear or conv-stack, got '" + v + "'");
    }

    PostProcess post(const std::string& v) const {
        if (v == "none") return {PostProcess::Kind::none, 1};
        if (v == "resize") return {PostProcess::Kind::resize, 1};
        const std::string pre = "pixel-unshuffle:";
        if (v.rfind(pre, 0) == 0) return {PostProcess::Kind::pixel_unshuffle, positive(v.substr(pre.size()))};
        fail("expected none, resize or pixel-unshuffle:F, got '" + v + "'");
    }

    Strategy strategy(const std::string& v) const {
        try {
            return parse_strategy(v);
        } catch (const std::exception&) {
            fail("expected one of SA, CC, LH, MG, DA, got '" + v + "'");
        }
    }
};

}  // namespace detail

inline RunConfig parse_config_text(std::istream& is, const std::string& source) {
    RunConfig c;
    c.model.experts.clear();
    detail::ConfigReader rd{source, 0, ""};
    std::string section;
    int expert = -1;
    std::map<std::string, std::size_t> section_line;
    std::map<std::string, std::size_t> seen;
    std::string raw;
    while (std::getline(is, raw)) {
        ++rd.line;
        std::string line = raw;
        if (const auto h = line.find_first_of("#;"); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ParseError(source, rd.line, "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            expert = -1;
            if (section.rfind("expert ", 0) == 0 || section.rfind("expert\t", 0) == 0) {
                const std::string name = detail::trim(section.substr(7));
                if (name.empty()) throw ParseError(source, rd.line, "expert section needs a name");
                section = "expert " + name;
                if (section_line.count(section)) throw ParseError(source, rd.line, "duplicate expert name '" + name + "'");
                ExpertSlot slot;
                slot.spec.name = name;
                c.model.experts.push_back(slot);
                expert = static_cast<int>(c.model.experts.size()) - 1;
            } else if (section != "run" && section != "budgets" && section != "fusion") {
                throw ParseError(source, rd.line, "unknown section [" + section + "]");
            } else if (section_line.count(section)) {
                throw ParseError(source, rd.line, "duplicate section [" + section + "]");
            }
            section_line[section] = rd.line;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(source, rd.line, "expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (section.empty()) throw ParseError(source, rd.line, "key '" + key + "' outside any section");
        rd.key = section + "." + key;
        if (!seen.emplace(rd.key, rd.line).second) rd.fail("duplicate key");

        if (section == "run") {
            if (key == "seed") c.seed = rd.unsigned64(val);
            else if (key == "out") {
                if (val.empty()) rd.fail("output directory must not be empty");
                c.out_dir = val;
            }
            else if (key == "pre_align") c.pre_align = rd.boolean(val);
            else if (key == "train_size") c.train_size = rd.positive(val);
            else if (key == "eval_size") c.eval_size = rd.positive(val);
            else if (key == "batch") c.budgets.batch = rd.positive(val);
            else if (key == "token_count") c.model.token_count = rd.positive(val);
            else if (key == "lm_dim") c.model.lm_dim = rd.positive(val);
            else if (key == "projector_hidden") c.model.projector_hidden = rd.positive(val);
            else rd.fail("unknown key");
        } else if (section == "budgets") {
            if (key == "pairs_steps") c.budgets.pairs_steps = rd.positive(val);
            else if (key == "pairs_lr") c.budgets.pairs_lr = rd.real(val);
            else if (key == "sft_steps") c.budgets.sft_steps = rd.positive(val);
            else if (key == "sft_lr") c.budgets.sft_lr = rd.real(val);
            else if (key == "prealign_steps") c.budgets.prealign_steps = rd.positive(val);
            else if (key == "prealign_lr") c.budgets.prealign_lr = rd.real(val);
            else rd.fail("unknown key");
            if (key.size() > 3 && key.compare(key.size() - 3, 3, "_lr") == 0 && !(rd.real(val) > 0))
                rd.fail("learning rate must be positive");
        } else if (section == "fusion") {
            if (key == "strategy") c.model.fusion.strategy = rd.strategy(val);
            else if (key == "window") c.model.fusion.window = rd.positive(val);
            else if (key == "n_points") c.model.fusion.n_points = rd.positive(val);
            else if (key == "hidden") c.model.fusion.hidden = rd.positive(val);
            else rd.fail("unknown key");
        } else {
            auto& slot = c.model.experts[static_cast<std::size_t>(expert)];
            auto& s = slot.spec;
            if (key == "arch") s.arch = rd.arch(val);
            else if (key == "native_resolution") s.native_resolution = rd.positive(val);
            else if (key == "patch_or_stride") s.patch_or_stride = rd.positive(val);
            else if (key == "embed_dim") s.embed_dim = rd.positive(val);
            else if (key == "depth") s.depth = rd.nonnegative(val);
            else if (key == "post_process") s.post_process = rd.post(val);
            else if (key == "frozen") s.frozen_default = rd.boolean(val);
            else if (key == "input_resolution") slot.input_resolution = rd.nonnegative(val);
            else if (key == "tiles") slot.tiles = rd.positive(val);
            else rd.fail("unknown key");
        }
    }
    c.model.expert_projectors = c.pre_align;

    // Whole-config invariants, reported against the section that owns them.
    auto where = [&](const std::string& msg) -> std::size_t {
        for (const auto& slot : c.model.experts)
            if (msg.rfind("expert " + slot.spec.name + ":", 0) == 0) return section_line["expert " + slot.spec.name];
        if (msg.rfind("fusion", 0) == 0) return section_line.count("fusion") ? section_line["fusion"] : 0;
        return section_line.count("run") ? section_line["run"] : 0;
    };
    if (const auto v = wiring_violations(c.model); !v.empty()) throw ParseError(source, where(v.front()), v.front());
    if (const auto v = c.budgets.violations(); !v.empty())
        throw ParseError(source, section_line.count("budgets") ? section_line["budgets"] : 0, v.front());
    return c;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FileNotFound(path);
    return parse_config_text(is, path);
}

/// Canonical text form with every default materialized; parses back to the same config.
inline std::string config_to_text(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "[run]\n"
       << "seed = " << c.seed << "\n"
       << "out = " << c.out_dir << "\n"
       << "pre_align = " << (c.pre_align ? "true" : "false") << "\n"
       << "train_size = " << c.train_size << "\n"
       << "eval_size = " << c.eval_size << "\n"
       << "batch = " << c.budgets.batch << "\n"
       << "token_count = " << c.model.token_count << "\n"
       << "lm_dim = " << c.model.lm_dim << "\n"
       << "projector_hidden = " << c.model.projector_hidden << "\n\n"
       << "[budgets]\n"
       << "pairs_steps = " << c.budgets.pairs_steps << "\n"
       << "pairs_lr = " << c.budgets.pairs_lr << "\n"
       << "sft_steps = " << c.budgets.sft_steps << "\n"
       << "sft_lr = " << c.budgets.sft_lr << "\n"
       << "prealign_steps = " << c.budgets.prealign_steps << "\n"
       << "prealign_lr = " << c.budgets.prealign_lr << "\n\n"
       << "[fusion]\n"
       << "strategy = " << to_string(c.model.fusion.strategy) << "\n"
       << "window = " << c.model.fusion.window << "\n"
       << "n_points = " << c.model.fusion.n_points << "\n"
       << "hidden = " << c.model.fusion.hidden << "\n";
    for (const auto& slot : c.model.experts) {
        const auto& s = slot.spec;
        os << "\n[expert " << s.name << "]\n"
           << "arch = " << to_string(s.arch) << "\n"
           << "native_resolution = " << s.native_resolution << "\n"
           << "patch_or_stride = " << s.patch_or_stride << "\n"
           << "embed_dim = " << s.embed_dim << "\n"
           << "depth = " << s.depth << "\n"
           << "post_process = " << to_string(s.post_process) << "\n"
           << "frozen = " << (s.frozen_default ? "true" : "false") << "\n"
           << "input_resolution = " << slot.input_resolution << "\n"
           << "tiles = " << slot.tiles << "\n";
    }
    return os.str();
}

}  // namespace mixlab
