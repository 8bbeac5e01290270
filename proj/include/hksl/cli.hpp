#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hksl/analysis.hpp"
#include "hksl/config.hpp"
#include "hksl/evalstats.hpp"
#include "hksl/trainer.hpp"

namespace hksl {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2, kExitNumerical = 3 };

inline constexpr const char* kOutDirEnv = "HKSL_OUT_DIR";
inline constexpr const char* kWorkersEnv = "HKSL_WORKERS";

/// Precedence: explicit flag, then environment variable, then default.
inline fs::path resolve_out_dir(const std::optional<std::string>& flag, const fs::path& fallback) {
    if (flag) return *flag;
    if (const char* e = std::getenv(kOutDirEnv); e && *e) return e;
    return fallback;
}

inline int resolve_workers(const std::optional<int>& flag) {
    int w = 1;
    if (flag) {
        w = *flag;
    } else if (const char* e = std::getenv(kWorkersEnv); e && *e) {
        try {
            w = std::stoi(e);
        } catch (const std::exception&) {
            throw ConfigError(std::string(kWorkersEnv) + " is not an integer: " + e);
        }
    }
    if (w < 1) throw ConfigError("worker count must be >= 1");
    return w;
}

struct RunPaths {
    fs::path record;
    fs::path checkpoint;
};

inline RunPaths run_paths(const fs::path& out, const TrainConfig& cfg) {
    const std::string stem = to_string(cfg.env.task) + "_" + to_string(cfg.ablation) + "_s" + std::to_string(cfg.seed);
    return {out / (stem + ".run.jsonl"), out / (stem + ".ckpt")};
}

/// Trains one run and writes its RunRecord and final checkpoint.
inline RunRecord train_and_save(const TrainConfig& cfg, const fs::path& out, std::ostream* log = nullptr,
                                std::mutex* log_mu = nullptr) {
    const std::string hash = config_hash(cfg);
    const RunPaths paths = run_paths(out, cfg);
    TrainHooks hooks;
    const std::string tag = to_string(cfg.ablation) + " seed " + std::to_string(cfg.seed);
    if (log) {
        hooks.on_checkpoint = [&](long step, double ret) {
            std::unique_lock<std::mutex> lock;
            if (log_mu) lock = std::unique_lock<std::mutex>(*log_mu);
            *log << tag << " step " << step << " mean_return " << format_double(ret) << "\n" << std::flush;
        };
    }
    TrainResult res = train_run(cfg, hash, hooks);
    res.record.checkpoint_path = paths.checkpoint.filename().string();
    save_checkpoint(paths.checkpoint, snapshot(res.agent->all_params()));
    save_run_record(paths.record, res.record);
    return res.record;
}

/// The six ablation variants of one config across seeds. Runs fan out over `workers` threads;
/// the first failure is rethrown after every worker has joined.
inline std::vector<RunRecord> ablate(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                     const fs::path& out, int workers, std::ostream* log = nullptr) {
    if (seeds.empty()) throw ConfigError("ablate needs at least one seed");
    if (base.ablation != Ablation::Full || base.hierarchy.no_c || base.hierarchy.shared_encoder ||
        base.hierarchy.all_n1)
        throw ConfigError("ablate expands a full-HKSL base config; remove ablation settings");
    std::vector<TrainConfig> jobs;
    for (Ablation a : all_ablations())
        for (std::uint64_t s : seeds) {
            TrainConfig c = base;
            c.ablation = a;
            c.seed = s;
            c.validate();
            jobs.push_back(c);
        }
    std::vector<RunRecord> records(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < jobs.size();) {
            try {
                records[i] = train_and_save(jobs[i], out, log, &log_mu);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(workers), jobs.size());
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return records;
}

inline std::unique_ptr<Agent> load_agent(const TrainConfig& cfg, const fs::path& checkpoint) {
    Rng init = make_rng(cfg.seed, "init");
    auto agent = std::make_unique<Agent>(cfg.model, effective_hierarchy(cfg), cfg.sac, init);
    restore(agent->all_params(), load_checkpoint(checkpoint));
    return agent;
}

/// Run-record files named on the command line; directories contribute their *.run.jsonl files.
inline std::vector<fs::path> collect_run_files(const std::vector<std::string>& inputs) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        const fs::path p(in);
        if (fs::is_directory(p)) {
            for (const auto& e : fs::directory_iterator(p)) {
                const std::string name = e.path().filename().string();
                if (e.is_regular_file() && name.size() > 10 && name.ends_with(".run.jsonl")) out.push_back(e.path());
            }
        } else if (fs::exists(p)) {
            out.push_back(p);
        } else {
            throw ConfigError("run record not found: " + in);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.empty()) throw ConfigError("no run records found");
    return out;
}

inline std::vector<RunRecord> load_run_records(const std::vector<fs::path>& files) {
    std::vector<RunRecord> out;
    for (const auto& f : files) out.push_back(load_run_record(f));
    return out;
}

// ---------------------------------------------------------------------------
// Analysis commands.

inline std::vector<EpisodeLog> random_episodes(const EnvConfig& env, std::uint64_t seed, const std::string& stream,
                                               std::size_t count) {
    std::vector<EpisodeLog> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(record_random_episode(env, derive_seed(seed, stream, i)));
    return out;
}

inline std::vector<ProbeErrorRow> run_probe(const Agent& agent, const TrainConfig& cfg, std::size_t fit_episodes,
                                            std::size_t eval_episodes, std::uint64_t seed) {
    const auto fit = random_episodes(cfg.env, seed, "probe-fit", fit_episodes);
    const auto eval = random_episodes(cfg.env, seed, "probe-eval", eval_episodes);
    return probe_rollout_error(HierarchyModel(agent.hierarchy()), fit, eval);
}

struct CommAnalysis {
    Eigen::MatrixXd distances;
    PcaResult pca;
    std::size_t pca_trajectories = 0;
    std::size_t steps = 0;
};

inline CommAnalysis run_comm_analysis(const Agent& agent, const TrainConfig& cfg, std::size_t trajectories,
                                      std::size_t pca_trajectories, std::size_t episodes, std::uint64_t seed) {
    const HierarchyModel model(agent.hierarchy());
    const auto eps = random_episodes(cfg.env, seed, "comm-episodes", episodes);
    Rng rng = make_rng(seed, "comm-trajectories");
    CommAnalysis out;
    out.distances = c_distance_matrix(model, eps, trajectories, rng);
    Rng pca_rng = make_rng(seed, "comm-pca");
    const auto outputs = sample_c_outputs(model, eps, pca_trajectories, pca_rng);
    out.steps = outputs.front().size();
    Eigen::MatrixXd data(static_cast<long>(outputs.size() * out.steps), outputs.front().front().size());
    long r = 0;
    for (const auto& traj : outputs)
        for (const auto& v : traj) data.row(r++) = v.transpose();
    out.pca = pca_project(data, 2, seed);
    out.pca_trajectories = outputs.size();
    return out;
}

/// Columns: trajectory,step,pc1,pc2
inline std::string pca_coordinates_csv(const CommAnalysis& a) {
    std::string out = "trajectory,step,pc1,pc2\n";
    for (long r = 0; r < a.pca.coordinates.rows(); ++r)
        out += std::to_string(static_cast<std::size_t>(r) / a.steps) + "," +
               std::to_string(static_cast<std::size_t>(r) % a.steps) + "," + format_double(a.pca.coordinates(r, 0)) +
               "," + format_double(a.pca.coordinates(r, 1)) + "\n";
    return out;
}

/// Columns: component,explained_variance_ratio
inline std::string pca_variance_csv(const CommAnalysis& a) {
    std::string out = "component,explained_variance_ratio\n";
    for (long c = 0; c < a.pca.explained_variance_ratio.size(); ++c)
        out += std::to_string(c + 1) + "," + format_double(a.pca.explained_variance_ratio[c]) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Report.

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::vector<StatsRow> parse_stats_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "method,step,metric,value,lo,hi,runs,warning")
        throw std::runtime_error("not a stats CSV (unexpected header)");
    std::vector<StatsRow> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_csv_line(line);
        if (c.size() != 8) throw std::runtime_error("malformed stats CSV line: " + line);
        out.push_back({c[0], std::stol(c[1]), c[2], std::stod(c[3]), std::stod(c[4]), std::stod(c[5]),
                       static_cast<std::size_t>(std::stoul(c[6])),
                       c[7] == "single_run" ? CiWarning::SingleRun : CiWarning::None});
    }
    return out;
}

/// Line chart of IQM against training step, one line per method with a shaded CI band.
inline std::string iqm_svg(const std::vector<StatsRow>& rows) {
    std::map<std::string, std::vector<const StatsRow*>> series;
    long max_step = 1;
    for (const auto& r : rows)
        if (r.metric == "iqm") {
            series[r.method].push_back(&r);
            max_step = std::max(max_step, r.step);
        }
    if (series.empty()) throw std::runtime_error("stats contain no iqm rows");
    const double W = 640, H = 400, left = 60, right = 150, top = 30, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;
    auto x = [&](long s) { return left + pw * static_cast<double>(s) / static_cast<double>(max_step); };
    auto y = [&](double v) { return top + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
    auto f = [](double v) {
        char b[32];
        std::snprintf(b, sizeof b, "%.2f", v);
        return std::string(b);
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(W) + "\" height=\"" + f(H) +
                    "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + f(left) + "\" y=\"18\">IQM of normalized return</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = i / 4.0;
        s += "<line x1=\"" + f(left) + "\" x2=\"" + f(left + pw) + "\" y1=\"" + f(y(v)) + "\" y2=\"" + f(y(v)) +
             "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + f(left - 8) + "\" y=\"" + f(y(v) + 4) + "\" text-anchor=\"end\">" + f(v) + "</text>\n";
    }
    s += "<line x1=\"" + f(left) + "\" x2=\"" + f(left + pw) + "\" y1=\"" + f(top + ph) + "\" y2=\"" + f(top + ph) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + f(left + pw / 2) + "\" y=\"" + f(H - 12) + "\" text-anchor=\"middle\">agent steps (max " +
         std::to_string(max_step) + ")</text>\n";
    std::size_t ci = 0;
    for (const auto& [method, pts] : series) {
        const std::string col = colors[ci % std::size(colors)];
        std::string band, line;
        for (const auto* p : pts) band += f(x(p->step)) + "," + f(y(p->hi)) + " ";
        for (auto it = pts.rbegin(); it != pts.rend(); ++it) band += f(x((*it)->step)) + "," + f(y((*it)->lo)) + " ";
        for (const auto* p : pts) line += f(x(p->step)) + "," + f(y(p->value)) + " ";
        band.pop_back();
        line.pop_back();
        s += "<polygon points=\"" + band + "\" fill=\"" + col + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
        s += "<polyline points=\"" + line + "\" fill=\"none\" stroke=\"" + col + "\" stroke-width=\"2\"/>\n";
        const double ly = top + 16.0 * static_cast<double>(ci);
        s += "<rect x=\"" + f(left + pw + 12) + "\" y=\"" + f(ly) + "\" width=\"12\" height=\"12\" fill=\"" + col +
             "\"/>\n";
        s += "<text x=\"" + f(left + pw + 30) + "\" y=\"" + f(ly + 10) + "\">" + method + "</text>\n";
        ++ci;
    }
    s += "</svg>\n";
    return s;
}

}  // namespace hksl
