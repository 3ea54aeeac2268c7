// SPDX-License-Identifier: Apache-2.0
//
// Benchmark score tables, the normalized average, fixture loading and the
// round-robin greedy expert selection.
//
// Fixture files are plain CSV without quoting:
//   metrics.csv   metric,max
//   encoders.csv  label,name
//   tableN.csv    combination,<metric>...[,Avg]
// A combination label is encoder letters joined by '+', optionally followed by
// '/variant' (for example "A+B/CC"). The optional trailing Avg column holds the
// printed average and is never treated as a metric.

#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixlab/error.hpp"

namespace mixlab {

struct Combination {
    std::vector<std::string> encoders;  // in the order they were added
    std::string variant;

    std::string label() const {
        std::string s;
        for (std::size_t i = 0; i < encoders.size(); ++i) s += (i ? "+" : "") + encoders[i];
        if (!variant.empty()) s += "/" + variant;
        return s;
    }

    /// Order-insensitive identity used for table lookups.
    std::string key() const {
        auto sorted = encoders;
        std::sort(sorted.begin(), sorted.end());
        return Combination{sorted, variant}.label();
    }

    bool operator==(const Combination&) const = default;
};

inline Combination parse_combination(const std::string& label) {
    Combination c;
    std::string body = label;
    if (const auto slash = label.find('/'); slash != std::string::npos) {
        body = label.substr(0, slash);
        c.variant = label.substr(slash + 1);
        if (c.variant.empty()) throw InvalidArgument("combination '" + label + "': empty variant");
    }
    std::stringstream ss(body);
    std::string part;
    while (std::getline(ss, part, '+')) {
        part.erase(0, part.find_first_not_of(" \t"));
        part.erase(part.find_last_not_of(" \t") + 1);
        if (part.empty()) throw InvalidArgument("combination '" + label + "': empty encoder id");
        if (std::find(c.encoders.begin(), c.encoders.end(), part) != c.encoders.end())
            throw InvalidArgument("combination '" + label + "': encoder " + part + " repeated");
        c.encoders.push_back(part);
    }
    if (c.encoders.empty()) throw InvalidArgument("combination '" + label + "' names no encoder");
    return c;
}

struct MetricSpec {
    std::string id;
    double max_value = 100.0;
};

struct ScoreRow {
    Combination combination;
    std::vector<double> values;  // aligned with ScoreTable::metrics
    std::optional<double> reported_avg;
    std::size_t line = 0;
};

struct ScoreTable {
    std::vector<MetricSpec> metrics;
    std::vector<ScoreRow> rows;

    const ScoreRow* find(const Combination& c) const {
        const auto k = c.key();
        for (const auto& r : rows)
            if (r.combination.key() == k) return &r;
        return nullptr;
    }
};

/// 1000 x mean over metrics of value / max.
inline double normalized_avg(std::span<const std::pair<double, double>> scores) {
    if (scores.empty()) throw InvalidArgument("normalized_avg: empty score list");
    double s = 0.0;
    for (const auto& [value, max] : scores) {
        if (!(max > 0)) throw InvalidArgument("normalized_avg: metric maximum must be positive");
        s += value / max;
    }
    return 1000.0 * s / static_cast<double>(scores.size());
}

inline double row_avg(const ScoreTable& t, const ScoreRow& r) {
    std::vector<std::pair<double, double>> s;
    for (std::size_t m = 0; m < t.metrics.size(); ++m) s.emplace_back(r.values[m], t.metrics[m].max_value);
    return normalized_avg(s);
}

// ---------------------------------------------------------------- loading

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell.erase(0, cell.find_first_not_of(" \t\r"));
        cell.erase(cell.find_last_not_of(" \t\r") + 1);
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(const std::string& s, const std::string& source, std::size_t line) {
    if (s.empty()) throw ParseError(source, line, "empty numeric cell");
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (errno != 0 || end != s.c_str() + s.size() || !std::isfinite(v))
        throw ParseError(source, line, "not a number: '" + s + "'");
    return v;
}

inline bool blank(const std::string& line) { return line.find_first_not_of(" \t\r") == std::string::npos; }

inline std::ifstream open_fixture(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FileNotFound(path);
    return is;
}

}  // namespace detail

/// metric -> maximum attainable value.
inline std::map<std::string, double> load_metric_maxima(const std::string& path) {
    auto is = detail::open_fixture(path);
    std::map<std::string, double> out;
    std::string line;
    std::size_t n = 0;
    bool header = true;
    while (std::getline(is, line)) {
        ++n;
        if (detail::blank(line)) continue;
        const auto cells = detail::split_csv(line);
        if (header) {
            if (cells != std::vector<std::string>{"metric", "max"}) throw ParseError(path, n, "expected header metric,max");
            header = false;
            continue;
        }
        if (cells.size() != 2) throw ParseError(path, n, "expected 2 cells, got " + std::to_string(cells.size()));
        const double mx = detail::parse_number(cells[1], path, n);
        if (!(mx > 0)) throw ParseError(path, n, "maximum for " + cells[0] + " must be positive");
        if (!out.emplace(cells[0], mx).second) throw ParseError(path, n, "duplicate metric " + cells[0]);
    }
    if (header) throw ParseError(path, n, "missing header");
    return out;
}

/// label -> display name.
inline std::map<std::string, std::string> load_encoder_names(const std::string& path) {
    auto is = detail::open_fixture(path);
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t n = 0;
    bool header = true;
    while (std::getline(is, line)) {
        ++n;
        if (detail::blank(line)) continue;
        const auto cells = detail::split_csv(line);
        if (header) {
            if (cells != std::vector<std::string>{"label", "name"}) throw ParseError(path, n, "expected header label,name");
            header = false;
            continue;
        }
        if (cells.size() != 2 || cells[0].empty()) throw ParseError(path, n, "expected label,name");
        if (!out.emplace(cells[0], cells[1]).second) throw ParseError(path, n, "duplicate label " + cells[0]);
    }
    return out;
}

/// Parses and validates a score table. Every metric must be declared in
/// `maxima` and every value must lie in [0, max].
inline ScoreTable parse_score_table(std::istream& is, const std::string& source,
                                    const std::map<std::string, double>& maxima) {
    ScoreTable t;
    std::string line;
    std::size_t n = 0;
    bool header = true;
    bool has_avg = false;
    while (std::getline(is, line)) {
        ++n;
        if (detail::blank(line)) continue;
        const auto cells = detail::split_csv(line);
        if (header) {
            if (cells.empty() || cells[0] != "combination") throw ParseError(source, n, "first column must be 'combination'");
            for (std::size_t k = 1; k < cells.size(); ++k) {
                if (cells[k] == "Avg" && k + 1 == cells.size()) {
                    has_avg = true;
                    continue;
                }
                const auto it = maxima.find(cells[k]);
                if (it == maxima.end()) throw ParseError(source, n, "unknown metric '" + cells[k] + "'");
                for (const auto& m : t.metrics)
                    if (m.id == cells[k]) throw ParseError(source, n, "duplicate metric column " + cells[k]);
                t.metrics.push_back({cells[k], it->second});
            }
            if (t.metrics.empty()) throw ParseError(source, n, "no metric columns");
            header = false;
            continue;
        }
        const std::size_t want = 1 + t.metrics.size() + (has_avg ? 1 : 0);
        if (cells.size() != want)
            throw ParseError(source, n, "expected " + std::to_string(want) + " cells, got " + std::to_string(cells.size()));
        ScoreRow r;
        r.line = n;
        try {
            r.combination = parse_combination(cells[0]);
        } catch (const InvalidArgument& e) {
            throw ParseError(source, n, e.what());
        }
        for (std::size_t m = 0; m < t.metrics.size(); ++m) {
            const double v = detail::parse_number(cells[m + 1], source, n);
            if (v < 0 || v > t.metrics[m].max_value) {
                std::ostringstream os;
                os << t.metrics[m].id << " value " << v << " outside [0, " << t.metrics[m].max_value << "]";
                throw ParseError(source, n, os.str());
            }
            r.values.push_back(v);
        }
        if (has_avg) r.reported_avg = detail::parse_number(cells.back(), source, n);
        if (t.find(r.combination)) throw ParseError(source, n, "duplicate combination " + cells[0]);
        t.rows.push_back(std::move(r));
    }
    if (header) throw ParseError(source, n, "missing header");
    return t;
}

inline ScoreTable load_score_fixture(const std::string& path, const std::map<std::string, double>& maxima) {
    auto is = detail::open_fixture(path);
    return parse_score_table(is, path, maxima);
}

// ---------------------------------------------------------------- recompute

struct AvgCheck {
    std::string combination;
    std::size_t line = 0;
    double recomputed = 0.0;
    double reported = 0.0;
    double abs_diff = 0.0;
    bool flagged = false;
};

inline std::vector<AvgCheck> recompute_table_avgs(const ScoreTable& t, std::span<const double> reported,
                                                  double tolerance = 1.0) {
    if (reported.size() != t.rows.size())
        throw InvalidArgument("recompute_table_avgs: " + std::to_string(reported.size()) + " reported values for " +
                              std::to_string(t.rows.size()) + " rows");
    std::vector<AvgCheck> out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        AvgCheck c;
        c.combination = t.rows[i].combination.label();
        c.line = t.rows[i].line;
        c.recomputed = row_avg(t, t.rows[i]);
        c.reported = reported[i];
        c.abs_diff = std::abs(c.recomputed - c.reported);
        c.flagged = c.abs_diff > tolerance;
        out.push_back(c);
    }
    return out;
}

/// Uses each row's Avg cell; every row must carry one.
inline std::vector<AvgCheck> recompute_table_avgs(const ScoreTable& t, double tolerance = 1.0) {
    std::vector<double> rep;
    for (const auto& r : t.rows) {
        if (!r.reported_avg)
            throw InvalidArgument("row " + r.combination.label() + " has no reported Avg");
        rep.push_back(*r.reported_avg);
    }
    return recompute_table_avgs(t, rep, tolerance);
}

// ---------------------------------------------------------------- selection

using Evaluator = std::function<double(const Combination&)>;

struct SelectionRound {
    std::vector<std::pair<Combination, double>> candidates;
    Combination retained;
    double retained_avg = 0.0;
};

struct SelectionHistory {
    Combination base;
    double base_avg = 0.0;  // round 0
    std::vector<SelectionRound> rounds;
    Combination recommendation;
    double recommendation_avg = 0.0;
    int evaluations = 0;
};

/// Adds one encoder per round, keeping the best candidate; the base is scored
/// first as round 0. Ties go to the candidate earliest in sorted pool order and
/// the recommendation to the earliest round.
inline SelectionHistory greedy_select(std::vector<std::string> pool, const Combination& base, const Evaluator& eval) {
    for (const auto& p : pool)
        if (std::find(base.encoders.begin(), base.encoders.end(), p) != base.encoders.end())
            throw InvalidArgument("greedy_select: pool member " + p + " already in base");
    std::sort(pool.begin(), pool.end());
    if (std::adjacent_find(pool.begin(), pool.end()) != pool.end())
        throw InvalidArgument("greedy_select: pool has duplicates");

    SelectionHistory h;
    const auto score = [&](const Combination& c) {
        ++h.evaluations;
        try {
            return eval(c);
        } catch (const CompletenessError&) {
            throw;
        } catch (const std::exception& e) {
            throw EvaluationError(c.label(), e.what());
        }
    };
    h.base = base;
    h.base_avg = score(base);
    h.recommendation = base;
    h.recommendation_avg = h.base_avg;
    Combination current = base;
    while (!pool.empty()) {
        SelectionRound round;
        std::size_t best = 0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            Combination c = current;
            c.encoders.push_back(pool[i]);
            const double v = score(c);
            round.candidates.emplace_back(c, v);
            if (v > round.candidates[best].second) best = i;
        }
        round.retained = round.candidates[best].first;
        round.retained_avg = round.candidates[best].second;
        if (round.retained_avg > h.recommendation_avg) {
            h.recommendation = round.retained;
            h.recommendation_avg = round.retained_avg;
        }
        current = round.retained;
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
        h.rounds.push_back(std::move(round));
    }
    return h;
}

/// Evaluator reading averages from a fixture (order-insensitive match on the
/// encoder set and variant). A missing row raises CompletenessError.
inline Evaluator table_evaluator(const ScoreTable& t) {
    return [&t](const Combination& c) {
        const ScoreRow* r = t.find(c);
        if (!r) throw CompletenessError(c.label());
        return row_avg(t, *r);
    };
}

}  // namespace mixlab
