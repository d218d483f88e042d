#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qattn/common.hpp"

namespace qattn::train {

struct MetricsRow {
    int64_t step = 0;     // global environment step at the time of logging
    int64_t episode = 0;  // training episodes completed
    std::string phase;    // "train" | "eval"
    double ret = 0.0;     // episode return (train) or mean return over the eval block
    double smoothed = 0.0;
    double epsilon = 0.0;
    double loss_mean = 0.0;
    int64_t length = 0;  // episode length in steps (0 for eval rows)
};

/// Protocol instrumentation filled in by the training loop; tests assert the
/// schedule (no learning before learning_starts, sync cadence, eval isolation)
/// directly from these.
struct Counters {
    int64_t env_steps = 0;
    int64_t episodes = 0;
    int64_t updates = 0;
    int64_t target_syncs = 0;
    int64_t eval_blocks = 0;
    int64_t eval_episodes = 0;
    int64_t eval_env_steps = 0;
    int64_t updates_during_eval = 0;
    int64_t pushes_during_eval = 0;
    int64_t first_update_step = -1;
    std::vector<int64_t> update_steps;
    std::vector<int64_t> sync_steps;
};

struct MetricsLog {
    std::vector<MetricsRow> rows;
    Counters counters;
    std::vector<std::pair<int64_t, double>> timings;  // (step, seconds per 1k-step window)
    bool stopped_early = false;
};

/// Trailing running average: out[i] = mean(x[max(0, i-window+1) .. i]).
inline std::vector<double> smooth(const std::vector<double>& series, int64_t window = 10) {
    if (window < 1) throw ConfigError("smoothing window must be >= 1");
    std::vector<double> out(series.size());
    double acc = 0.0;
    for (size_t i = 0; i < series.size(); ++i) {
        acc += series[i];
        if (static_cast<int64_t>(i) >= window) acc -= series[i - static_cast<size_t>(window)];
        const int64_t n = std::min<int64_t>(window, static_cast<int64_t>(i) + 1);
        out[i] = acc / static_cast<double>(n);
    }
    return out;
}

/// One aligned point of a cross-seed summary curve.
struct CurvePoint {
    int64_t step = 0;
    double mean = 0.0, min = 0.0, max = 0.0;
};

using Series = std::vector<std::pair<int64_t, double>>;  // (step, value), step increasing

/// Align per-seed series onto the union of their step grids by last-value
/// interpolation (steps before a seed's first point take its first value),
/// then reduce pointwise to mean/min/max.
inline std::vector<CurvePoint> aggregate_series(const std::vector<Series>& curves) {
    if (curves.empty()) throw InputError("aggregate: no series given");
    std::vector<int64_t> grid;
    for (const Series& c : curves)
        for (const auto& [s, v] : c) grid.push_back(s);
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

    std::vector<CurvePoint> out;
    out.reserve(grid.size());
    std::vector<size_t> cursor(curves.size(), 0);
    for (int64_t s : grid) {
        double mean = 0.0, lo = 0.0, hi = 0.0;
        bool first = true;
        for (size_t i = 0; i < curves.size(); ++i) {
            const Series& c = curves[i];
            if (c.empty()) throw InputError("aggregate: empty series");
            while (cursor[i] + 1 < c.size() && c[cursor[i] + 1].first <= s) ++cursor[i];
            // cursor points at the last entry with step <= s, or 0 if none yet
            const double v = c[cursor[i]].second;
            mean += v;
            lo = first ? v : std::min(lo, v);
            hi = first ? v : std::max(hi, v);
            first = false;
        }
        out.push_back({s, mean / static_cast<double>(curves.size()), lo, hi});
    }
    return out;
}

struct RunSummary {
    std::vector<CurvePoint> train;
    std::vector<CurvePoint> eval;
};

/// Pull one phase out of a log as a (step, smoothed_return) series.
inline Series phase_series(const MetricsLog& log, const std::string& phase) {
    Series out;
    for (const MetricsRow& r : log.rows)
        if (r.phase == phase) out.emplace_back(r.step, r.smoothed);
    return out;
}

inline RunSummary aggregate_seeds(const std::vector<MetricsLog>& logs) {
    if (logs.empty()) throw InputError("aggregate: no seed logs given");
    std::vector<Series> train, eval;
    for (const MetricsLog& log : logs) {
        Series t = phase_series(log, "train");
        Series e = phase_series(log, "eval");
        if (!t.empty()) train.push_back(std::move(t));
        if (!e.empty()) eval.push_back(std::move(e));
    }
    RunSummary s;
    if (!train.empty()) s.train = aggregate_series(train);
    if (!eval.empty()) s.eval = aggregate_series(eval);
    return s;
}

inline const char* kCsvHeader = "step,episode,phase,return,smoothed_return,epsilon,loss_mean";

/// Write a metrics CSV. `meta` lines become `# key=value` comments before the
/// header. Output is byte-stable: fixed float formats, no timestamps.
inline void write_metrics_csv(const std::string& path, const MetricsLog& log,
                              const std::map<std::string, std::string>& meta = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    for (const auto& [k, v] : meta) out << "# " << k << "=" << v << "\n";
    out << kCsvHeader << "\n";
    char buf[160];
    for (const MetricsRow& r : log.rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%s,%.6f,%.6f,%.6f,%.8f",
                      static_cast<long long>(r.step), static_cast<long long>(r.episode),
                      r.phase.c_str(), r.ret, r.smoothed, r.epsilon, r.loss_mean);
        out << buf << "\n";
    }
    if (!out) throw InputError("failed writing '" + path + "'");
}

/// Parse a metrics CSV written by write_metrics_csv. Header comments land in
/// `meta` (if given); unknown layouts are rejected.
inline MetricsLog parse_metrics_csv(const std::string& path,
                                    std::map<std::string, std::string>* meta = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    MetricsLog log;
    std::string line;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (meta) {
                std::string body = line.substr(line.find_first_not_of("# "));
                const size_t eq = body.find('=');
                if (eq != std::string::npos) (*meta)[body.substr(0, eq)] = body.substr(eq + 1);
            }
            continue;
        }
        if (!saw_header) {
            if (line != kCsvHeader)
                throw InputError("'" + path + "': unexpected CSV header '" + line + "'");
            saw_header = true;
            continue;
        }
        MetricsRow r;
        char phase[16] = {0};
        long long step = 0, episode = 0;
        if (std::sscanf(line.c_str(), "%lld,%lld,%15[^,],%lf,%lf,%lf,%lf", &step, &episode, phase,
                        &r.ret, &r.smoothed, &r.epsilon, &r.loss_mean) != 7)
            throw InputError("'" + path + "': malformed row '" + line + "'");
        r.step = step;
        r.episode = episode;
        r.phase = phase;
        log.rows.push_back(std::move(r));
    }
    if (!saw_header) throw InputError("'" + path + "': missing CSV header");
    return log;
}

/// Wall-clock timing sidecar; kept out of the CSV so metric files stay
/// byte-identical across reruns.
inline void write_timings(const std::string& path, const MetricsLog& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << "step,seconds_per_1k\n";
    char buf[96];
    for (const auto& [step, sec] : log.timings) {
        std::snprintf(buf, sizeof(buf), "%lld,%.3f", static_cast<long long>(step), sec);
        out << buf << "\n";
    }
}

}  // namespace qattn::train
