// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the mixlab executable. Each returns a
// process exit code and writes human-readable output to `out`, diagnostics
// to `err`.

#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixlab/config.hpp"
#include "mixlab/error.hpp"
#include "mixlab/experiment.hpp"
#include "mixlab/gradcheck.hpp"
#include "mixlab/selector.hpp"

namespace mixlab::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitInvalid = 2,    // parse, validation, lookup or completeness failure
    kExitMismatch = 3,   // a recomputed value or check disagrees
    kExitDiverged = 4,   // non-finite training loss
    kExitNotFound = 5,   // an input file is missing
};

/// Runs `body`, translating library errors into exit codes.
inline int guarded(const std::function<int()>& body, std::ostream& err) {
    try {
        return body();
    } catch (const FileNotFound& e) {
        err << "error: " << e.what() << "\n";
        return kExitNotFound;
    } catch (const TrainingDiverged& e) {
        err << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const CompletenessError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const EvaluationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const LookupError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Full-precision decimal for machine-readable outputs.
inline std::string exact(double v) { return fmt("%.17g", v); }

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InvalidArgument("cannot create output directory " + dir + ": " + ec.message());
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw InvalidArgument("cannot write " + p.string());
    return os;
}

// ---------------------------------------------------------------- repro-avg

struct ReproAvgOptions {
    std::vector<std::string> fixtures;
    std::string metrics;
    double tolerance = 1.0;
    std::string out_dir;  // optional CSV destination
};

inline int cmd_repro_avg(const ReproAvgOptions& o, std::ostream& out, std::ostream& err) {
    return guarded([&] {
        if (o.fixtures.empty()) throw InvalidArgument("repro-avg: no fixtures given");
        const auto maxima = load_metric_maxima(o.metrics);
        std::ostringstream csv;
        csv << "fixture,line,combination,reported,recomputed,abs_diff,status\n";
        int rows = 0, flagged = 0;
        double worst = 0.0;
        for (const auto& path : o.fixtures) {
            const auto table = load_score_fixture(path, maxima);
            const auto checks = recompute_table_avgs(table, o.tolerance);
            const std::string name = std::filesystem::path(path).filename().string();
            out << name << " (" << checks.size() << " rows)\n";
            out << "  " << std::left << std::setw(34) << "combination" << std::right << std::setw(10) << "reported"
                << std::setw(12) << "recomputed" << std::setw(9) << "diff" << "\n";
            for (const auto& c : checks) {
                out << "  " << std::left << std::setw(34) << c.combination << std::right << std::setw(10)
                    << fmt("%.1f", c.reported) << std::setw(12) << fmt("%.2f", c.recomputed) << std::setw(9)
                    << fmt("%.2f", c.abs_diff) << (c.flagged ? "  MISMATCH (line " + std::to_string(c.line) + ")" : "")
                    << "\n";
                csv << name << ',' << c.line << ',' << c.combination << ',' << exact(c.reported) << ','
                    << exact(c.recomputed) << ',' << exact(c.abs_diff) << ',' << (c.flagged ? "mismatch" : "ok") << "\n";
                ++rows;
                flagged += c.flagged;
                worst = std::max(worst, c.abs_diff);
            }
        }
        out << rows << " rows, max |diff| " << fmt("%.3f", worst) << ", tolerance " << fmt("%g", o.tolerance) << ", "
            << flagged << " mismatched\n";
        if (!o.out_dir.empty()) {
            ensure_dir(o.out_dir);
            open_out(std::filesystem::path(o.out_dir) / "repro_avg.csv") << csv.str();
        }
        if (flagged) {
            err << "repro-avg: " << flagged << " row(s) differ from the reported Avg by more than " << o.tolerance
                << "\n";
            return static_cast<int>(kExitMismatch);
        }
        return static_cast<int>(kExitOk);
    }, err);
}

// ---------------------------------------------------------------- select

struct SelectOptions {
    std::string fixture;
    std::string metrics;
    std::string encoders;           // optional label -> name table
    std::string base;               // empty: the fixture's first row
    std::vector<std::string> pool;  // empty: every encoder in the fixture outside the base
    std::string out_dir;
};

inline int cmd_select(const SelectOptions& o, std::ostream& out, std::ostream& err) {
    return guarded([&] {
        const auto maxima = load_metric_maxima(o.metrics);
        const auto table = load_score_fixture(o.fixture, maxima);
        if (table.rows.empty()) throw ValidationError("select: fixture " + o.fixture + " has no rows");
        const Combination base = o.base.empty() ? table.rows.front().combination : parse_combination(o.base);
        std::vector<std::string> pool = o.pool;
        if (pool.empty()) {
            std::set<std::string> ids;
            for (const auto& r : table.rows)
                for (const auto& e : r.combination.encoders) ids.insert(e);
            for (const auto& e : base.encoders) ids.erase(e);
            pool.assign(ids.begin(), ids.end());
        }
        std::map<std::string, std::string> names;
        if (!o.encoders.empty()) names = load_encoder_names(o.encoders);
        const auto named = [&](const Combination& c) {
            std::string s;
            for (std::size_t i = 0; i < c.encoders.size(); ++i) {
                const auto it = names.find(c.encoders[i]);
                s += (i ? ", " : "") + (it == names.end() ? c.encoders[i] : it->second);
            }
            return s;
        };

        const auto h = greedy_select(pool, base, table_evaluator(table));
        std::ostringstream csv;
        csv << "round,combination,avg,retained\n";
        out << "round 0: base " << h.base.label() << " " << fmt("%.2f", h.base_avg) << "\n";
        csv << "0," << h.base.label() << ',' << exact(h.base_avg) << ",1\n";
        for (std::size_t k = 0; k < h.rounds.size(); ++k) {
            const auto& r = h.rounds[k];
            out << "round " << k + 1 << ":";
            for (const auto& [c, v] : r.candidates) {
                out << "  " << c.label() << " " << fmt("%.2f", v);
                csv << k + 1 << ',' << c.label() << ',' << exact(v) << ',' << (c == r.retained ? 1 : 0) << "\n";
            }
            out << "\n  retained " << r.retained.label() << " " << fmt("%.2f", r.retained_avg) << "\n";
        }
        out << "recommendation: " << h.recommendation.label() << " {" << named(h.recommendation) << "} avg "
            << fmt("%.2f", h.recommendation_avg) << " after " << h.evaluations << " evaluations\n";
        if (!o.out_dir.empty()) {
            ensure_dir(o.out_dir);
            open_out(std::filesystem::path(o.out_dir) / "selection.csv") << csv.str();
        }
        return static_cast<int>(kExitOk);
    }, err);
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOptions {
    std::vector<std::string> ops;  // empty: every registered op
    std::vector<std::uint64_t> seeds{1, 2, 3};
    double threshold = 1e-4;
    std::string out_dir;
};

inline int cmd_gradcheck(const GradRegistry& registry, const GradcheckOptions& o, std::ostream& out,
                         std::ostream& err) {
    return guarded([&] {
        const auto ops = o.ops.empty() ? registry.ops() : o.ops;
        for (const auto& op : ops)
            if (!registry.contains(op)) throw LookupError("gradcheck: unknown op '" + op + "'");
        if (o.seeds.empty()) throw InvalidArgument("gradcheck: no seeds given");
        std::ostringstream csv;
        csv << "op,seed,max_rel_error,checked_entries,status\n";
        int failed = 0;
        out << std::left << std::setw(30) << "op" << std::right << std::setw(6) << "seed" << std::setw(14) << "max rel err"
            << std::setw(9) << "entries" << "\n";
        for (const auto& op : ops)
            for (const auto seed : o.seeds) {
                const auto r = registry.check(op, seed);
                const bool ok = r.max_rel_error < o.threshold;
                failed += !ok;
                out << std::left << std::setw(30) << op << std::right << std::setw(6) << seed << std::setw(14)
                    << fmt("%.3e", r.max_rel_error) << std::setw(9) << r.checked_entries << (ok ? "" : "  FAIL") << "\n";
                if (!ok)
                    for (const auto& [name, e] : r.per_parameter_errors)
                        if (!(e < o.threshold)) out << "    " << name << " " << fmt("%.3e", e) << "\n";
                csv << op << ',' << seed << ',' << exact(r.max_rel_error) << ',' << r.checked_entries << ','
                    << (ok ? "ok" : "fail") << "\n";
            }
        out << ops.size() << " ops x " << o.seeds.size() << " seeds, " << failed << " failed (threshold "
            << fmt("%g", o.threshold) << ")\n";
        if (!o.out_dir.empty()) {
            ensure_dir(o.out_dir);
            open_out(std::filesystem::path(o.out_dir) / "gradcheck.csv") << csv.str();
        }
        return static_cast<int>(failed ? kExitMismatch : kExitOk);
    }, err);
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;  // overrides the config's run.out
};

inline int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
    const auto wall0 = std::chrono::steady_clock::now();
    std::optional<std::filesystem::path> dir;
    nlohmann::ordered_json manifest;
    std::vector<nlohmann::ordered_json> stage_log;
    const auto write_manifest = [&](const std::string& status) {
        if (!dir) return;
        manifest["status"] = status;
        manifest["stages"] = stage_log;
        manifest["wall_time_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
        open_out(*dir / "manifest.json") << manifest.dump(2) << "\n";
    };

    const int code = guarded([&] {
        RunConfig c = parse_config(o.config);
        if (o.seed) c.seed = *o.seed;
        if (!o.out_dir.empty()) c.out_dir = o.out_dir;
        ensure_dir(c.out_dir);
        dir = std::filesystem::path(c.out_dir);
        std::filesystem::remove(*dir / "FAILED");
        const std::string echo = config_to_text(c);
        open_out(*dir / "config.ini") << echo;
        manifest["command"] = "train";
        manifest["config_path"] = o.config;
        manifest["seed"] = c.seed;
        manifest["config"] = echo;
        manifest["rerun"] = "mixlab train --config config.ini";

        auto losses = open_out(*dir / "losses.csv");
        losses << "stage,step,loss\n";
        auto audit = open_out(*dir / "audit.csv");
        audit << "stage,group,in_mask,changed,max_abs_change\n";
        int violations = 0;
        const auto on_stage = [&](const StageRecord& r) {
            for (std::size_t s = 0; s < r.losses.size(); ++s)
                losses << r.stage.name << ',' << s << ',' << exact(r.losses[s]) << "\n";
            for (const auto& [id, mx] : r.diff.max_abs_change)
                audit << r.stage.name << ',' << id << ',' << r.stage.trainable_mask.count(id) << ','
                      << r.diff.changed.count(id) << ',' << exact(mx) << "\n";
            losses.flush();
            audit.flush();
            const auto bad = mask_violations(r);
            violations += static_cast<int>(bad.size());
            nlohmann::ordered_json j;
            j["name"] = r.stage.name;
            j["source"] = to_string(r.stage.source);
            j["steps"] = r.stage.steps;
            j["learning_rate"] = r.stage.learning_rate;
            j["groups_in_mask"] = r.stage.trainable_mask.size();
            j["groups_changed"] = r.diff.changed.size();
            j["groups_changed_outside_mask"] = bad;
            stage_log.push_back(j);
            out << "stage " << r.stage.name << ": " << r.stage.steps << " steps, loss " << fmt("%.4f", r.losses.front())
                << " -> " << fmt("%.4f", r.losses.back()) << ", " << r.diff.changed.size() << " groups changed\n";
        };

        ExperimentResult res;
        try {
            res = run_experiment(c, on_stage);
        } catch (const TrainingDiverged& e) {
            open_out(*dir / "FAILED") << e.what() << "\n";
            write_manifest("diverged");
            throw;
        }

        std::ostringstream results;
        results << "task,samples,accuracy\n";
        for (int t = 0; t < kNumTasks; ++t)
            results << to_string(static_cast<Task>(t)) << ',' << res.eval.count[t] << ',' << exact(res.eval.accuracy[t])
                    << "\n";
        results << "macro_avg," << c.eval_size << ',' << exact(res.eval.macro_avg) << "\n";
        open_out(*dir / "results.csv") << results.str();

        std::ostringstream md;
        md << "# Training run\n\n"
           << "Seed " << c.seed << ", fusion " << to_string(c.model.fusion.strategy) << ", "
           << (c.pre_align ? "pre-alignment" : "baseline") << " plan, " << c.model.experts.size() << " expert(s).\n\n"
           << "## Stages\n\n| stage | data | steps | lr | first loss | last loss | groups changed | outside mask |\n"
           << "|---|---|---|---|---|---|---|---|\n";
        for (const auto& r : res.trained.records)
            md << "| " << r.stage.name << " | " << to_string(r.stage.source) << " | " << r.stage.steps << " | "
               << fmt("%g", r.stage.learning_rate) << " | " << fmt("%.4f", r.losses.front()) << " | "
               << fmt("%.4f", r.losses.back()) << " | " << r.diff.changed.size() << " | "
               << mask_violations(r).size() << " |\n";
        md << "\n## Held-out accuracy (n = " << c.eval_size << ")\n\n| task | accuracy |\n|---|---|\n";
        for (int t = 0; t < kNumTasks; ++t)
            md << "| " << to_string(static_cast<Task>(t)) << " | " << fmt("%.4f", res.eval.accuracy[t]) << " |\n";
        md << "| macro average | " << fmt("%.4f", res.eval.macro_avg) << " |\n";
        open_out(*dir / "report.md") << md.str();

        out << "accuracy: color " << fmt("%.4f", res.eval.accuracy[0]) << ", glyph " << fmt("%.4f", res.eval.accuracy[1])
            << ", count " << fmt("%.4f", res.eval.accuracy[2]) << ", macro " << fmt("%.4f", res.eval.macro_avg) << "\n";
        out << "artifacts in " << dir->string() << "\n";
        if (violations) {
            open_out(*dir / "FAILED") << violations << " parameter group(s) changed outside their stage mask\n";
            write_manifest("mask-violation");
            err << "train: " << violations << " parameter group(s) changed outside their stage mask\n";
            return static_cast<int>(kExitMismatch);
        }
        write_manifest("ok");
        return static_cast<int>(kExitOk);
    }, err);
    return code;
}

}  // namespace mixlab::cli
