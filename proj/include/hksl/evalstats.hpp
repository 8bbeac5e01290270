#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/rng.hpp"
#include "hksl/trainer.hpp"

namespace hksl {

/// Rows are tasks, columns are runs (seeds). Rows may hold different run counts but no gaps.
using ScoreMatrix = std::vector<std::vector<double>>;
using Statistic = std::function<double(std::span<const double>)>;

/// Sorts, drops floor(m/4) values from each end and averages the rest.
inline double iqm(std::span<const double> scores) {
    if (scores.size() < 4) throw std::invalid_argument("iqm needs at least 4 values, got " + std::to_string(scores.size()));
    std::vector<double> v(scores.begin(), scores.end());
    std::sort(v.begin(), v.end());
    const std::size_t drop = v.size() / 4;
    const double s = std::accumulate(v.begin() + static_cast<long>(drop), v.end() - static_cast<long>(drop), 0.0);
    return s / static_cast<double>(v.size() - 2 * drop);
}

inline double optimality_gap(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("optimality_gap of an empty set");
    double s = 0.0;
    for (double x : scores) s += 1.0 - std::min(x, 1.0);
    return s / static_cast<double>(scores.size());
}

inline double mean_score(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("mean of an empty set");
    return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

inline std::vector<double> pooled(const ScoreMatrix& m) {
    std::vector<double> out;
    for (const auto& row : m) out.insert(out.end(), row.begin(), row.end());
    return out;
}

/// Linear-interpolated percentile of sorted data, q in [0, 1].
inline double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw std::invalid_argument("percentile of an empty set");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

enum class CiWarning { None, SingleRun };

struct ConfidenceInterval {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    CiWarning warning = CiWarning::None;
};

inline constexpr int kDefaultResamples = 5000;
inline constexpr double kDefaultLevel = 0.95;

/// Percentile bootstrap where each resample redraws runs with replacement inside every task row.
inline ConfidenceInterval stratified_bootstrap_ci(const ScoreMatrix& m, const Statistic& stat,
                                                  int resamples, double level, Rng& rng) {
    if (m.empty()) throw std::invalid_argument("empty score matrix");
    for (const auto& row : m)
        if (row.empty()) throw std::invalid_argument("score matrix has a task with no runs");
    if (resamples < 1) throw std::invalid_argument("resamples must be positive");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must lie in (0, 1)");

    ConfidenceInterval ci;
    const std::vector<double> all = pooled(m);
    ci.point = stat(all);
    const bool degenerate = std::all_of(m.begin(), m.end(), [](const auto& r) { return r.size() == 1; });
    if (degenerate) {
        ci.lo = ci.hi = ci.point;
        ci.warning = CiWarning::SingleRun;
        return ci;
    }
    std::vector<double> dist(static_cast<std::size_t>(resamples));
    std::vector<double> buf(all.size());
    for (auto& d : dist) {
        std::size_t w = 0;
        for (const auto& row : m)
            for (std::size_t i = 0; i < row.size(); ++i) buf[w++] = row[uniform_index(rng, row.size())];
        d = stat(buf);
    }
    std::sort(dist.begin(), dist.end());
    const double tail = (1.0 - level) / 2.0;
    ci.lo = percentile_sorted(dist, tail);
    ci.hi = percentile_sorted(dist, 1.0 - tail);
    return ci;
}

inline ConfidenceInterval stratified_bootstrap_ci(const ScoreMatrix& m, const Statistic& stat, Rng& rng) {
    return stratified_bootstrap_ci(m, stat, kDefaultResamples, kDefaultLevel, rng);
}

// ---------------------------------------------------------------------------
// RunRecord aggregation.

struct StatsRow {
    std::string method;
    long step = 0;
    std::string metric;
    double value = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t runs = 0;
    CiWarning warning = CiWarning::None;
};

/// method -> task -> runs. Scores are normalized by each record's max return.
struct RunGroups {
    std::map<std::string, std::map<std::string, std::vector<RunRecord>>> by_method;
};

inline RunGroups group_runs(const std::vector<RunRecord>& records) {
    RunGroups g;
    for (const auto& r : records) {
        if (!(r.max_return > 0.0)) throw std::invalid_argument("run record has non-positive max_return");
        g.by_method[r.ablation][r.task].push_back(r);
    }
    return g;
}

/// Per (method, checkpoint): IQM and optimality gap of normalized scores with bootstrap CIs.
/// IQM falls back to the mean when fewer than 4 runs are pooled.
inline std::vector<StatsRow> aggregate_stats(const std::vector<RunRecord>& records, int resamples, double level,
                                             std::uint64_t seed) {
    std::vector<StatsRow> out;
    const RunGroups g = group_runs(records);
    for (const auto& [method, tasks] : g.by_method) {
        std::vector<long> steps;
        std::size_t total_runs = 0;
        for (const auto& [task, runs] : tasks) {
            for (const auto& r : runs) {
                std::vector<long> s;
                for (const auto& c : r.checkpoints) s.push_back(c.step);
                if (steps.empty() && total_runs == 0) steps = s;
                else if (s != steps)
                    throw std::invalid_argument("runs of method '" + method + "' have different checkpoint steps");
                ++total_runs;
            }
        }
        const Statistic central = total_runs >= 4 ? Statistic(iqm) : Statistic(mean_score);
        for (std::size_t ci = 0; ci < steps.size(); ++ci) {
            ScoreMatrix m;
            for (const auto& [task, runs] : tasks) {
                std::vector<double> row;
                for (const auto& r : runs) row.push_back(r.checkpoints[ci].mean_return / r.max_return);
                m.push_back(std::move(row));
            }
            const std::pair<const char*, const Statistic*> metrics[] = {{"iqm", &central}, {"optimality_gap", nullptr}};
            for (const auto& [name, fn] : metrics) {
                Rng rng = make_rng(seed, method + "/" + name, static_cast<std::uint64_t>(steps[ci]));
                const Statistic s = fn ? *fn : Statistic(optimality_gap);
                ConfidenceInterval c = stratified_bootstrap_ci(m, s, resamples, level, rng);
                out.push_back({method, steps[ci], name, c.point, c.lo, c.hi, total_runs, c.warning});
            }
        }
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// Columns: method,step,metric,value,lo,hi,runs,warning
inline std::string stats_csv(const std::vector<StatsRow>& rows) {
    std::string out = "method,step,metric,value,lo,hi,runs,warning\n";
    for (const auto& r : rows) {
        out += r.method + "," + std::to_string(r.step) + "," + r.metric + "," + format_double(r.value) + "," +
               format_double(r.lo) + "," + format_double(r.hi) + "," + std::to_string(r.runs) + "," +
               (r.warning == CiWarning::SingleRun ? "single_run" : "") + "\n";
    }
    return out;
}

}  // namespace hksl
