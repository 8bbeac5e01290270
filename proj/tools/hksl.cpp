// Command-line front end: train, ablate, eval, stats, probe, commanalysis, report.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hksl/cli.hpp"

using namespace hksl;

namespace {

TrainConfig load_config(const std::optional<std::string>& path) {
    return path ? parse_config_file(*path) : parse_config_text("");
}

void print_hash(const TrainConfig& cfg) { std::cout << "config_hash " << config_hash(cfg) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical k-step latent agent: training, statistics and analysis"};
    app.require_subcommand(1);

    std::optional<std::string> config_path, out_flag;
    std::optional<std::uint64_t> seed_flag;
    std::optional<long> steps_flag;
    std::optional<int> workers_flag;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "JSON config file (omit for defaults)");
        sub->add_option("-o,--out", out_flag, "output directory (env " + std::string(kOutDirEnv) + ")");
    };

    auto* train = app.add_subcommand("train", "train one run; writes a run record and checkpoint");
    add_common(train);
    train->add_option("--seed", seed_flag, "override train.seed");
    train->add_option("--steps", steps_flag, "override train.total_steps");

    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    auto* abl = app.add_subcommand("ablate", "run all six ablation variants over a seed list");
    add_common(abl);
    abl->add_option("--seeds", seeds, "seed list")->delimiter(',');
    abl->add_option("--steps", steps_flag, "override train.total_steps");
    abl->add_option("-j,--workers", workers_flag, "parallel runs (env " + std::string(kWorkersEnv) + ")");

    std::string checkpoint;
    int episodes = 10;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with the deterministic policy");
    ev->add_option("-c,--config", config_path, "config the checkpoint was trained with");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ev->add_option("--episodes", episodes, "evaluation episodes");
    ev->add_option("--seed", seed_flag, "evaluation seed (default: the run's eval stream)");

    std::vector<std::string> run_inputs;
    int resamples = kDefaultResamples;
    double level = kDefaultLevel;
    std::uint64_t stats_seed = 0;
    auto* st = app.add_subcommand("stats", "IQM / optimality gap with stratified bootstrap CIs");
    st->add_option("runs", run_inputs, "run record files or directories")->required();
    st->add_option("-o,--out", out_flag, "output directory (env " + std::string(kOutDirEnv) + ")");
    st->add_option("--resamples", resamples, "bootstrap resamples")->check(CLI::PositiveNumber);
    st->add_option("--level", level, "confidence level")->check(CLI::Range(0.0, 1.0));
    st->add_option("--seed", stats_seed, "bootstrap seed");

    std::size_t fit_eps = 40, eval_eps = 20;
    std::uint64_t analysis_seed = 0;
    auto* pr = app.add_subcommand("probe", "linear-probe specialization test on a checkpoint");
    add_common(pr);
    pr->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    pr->add_option("--fit-episodes", fit_eps, "random episodes used to fit the probes");
    pr->add_option("--eval-episodes", eval_eps, "random episodes used to measure rollout error");
    pr->add_option("--seed", analysis_seed, "episode seed");

    std::size_t trajectories = 100, pca_trajectories = 20, comm_episodes = 20;
    auto* ca = app.add_subcommand("commanalysis", "communication-manager distance matrix and PCA");
    add_common(ca);
    ca->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ca->add_option("--trajectories", trajectories, "trajectories averaged into the distance matrix");
    ca->add_option("--pca-trajectories", pca_trajectories, "trajectories projected by PCA");
    ca->add_option("--episodes", comm_episodes, "random episodes to sample trajectories from");
    ca->add_option("--seed", analysis_seed, "episode and sampling seed");

    std::string stats_csv_path;
    auto* rp = app.add_subcommand("report", "bundle stats CSV and an IQM-vs-steps SVG chart");
    rp->add_option("--stats", stats_csv_path, "stats.csv from the stats command")->required();
    rp->add_option("-o,--out", out_flag, "output directory (env " + std::string(kOutDirEnv) + ")");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed()) {
            TrainConfig cfg = load_config(config_path);
            if (seed_flag) cfg.seed = *seed_flag;
            if (steps_flag) cfg.total_steps = *steps_flag;
            cfg = config_from_json(config_to_json(cfg));
            print_hash(cfg);
            const fs::path out = resolve_out_dir(out_flag, "runs");
            const RunRecord r = train_and_save(cfg, out, &std::cout);
            std::cout << "wrote " << run_paths(out, cfg).record.string() << "\n";
            std::cout << "final mean_return " << format_double(r.checkpoints.back().mean_return) << "\n";
        } else if (abl->parsed()) {
            TrainConfig cfg = load_config(config_path);
            if (steps_flag) cfg.total_steps = *steps_flag;
            cfg = config_from_json(config_to_json(cfg));
            print_hash(cfg);
            const fs::path out = resolve_out_dir(out_flag, "runs");
            const auto records = ablate(cfg, seeds, out, resolve_workers(workers_flag), &std::cout);
            std::cout << "wrote " << records.size() << " run records to " << out.string() << "\n";
        } else if (ev->parsed()) {
            const TrainConfig cfg = load_config(config_path);
            print_hash(cfg);
            auto agent = load_agent(cfg, checkpoint);
            const std::uint64_t s = seed_flag ? *seed_flag : derive_seed(cfg.seed, "eval");
            std::cout << "mean_return " << format_double(evaluate(*agent, cfg.env, episodes, s)) << "\n";
        } else if (st->parsed()) {
            const auto files = collect_run_files(run_inputs);
            const auto records = load_run_records(files);
            for (const auto& r : records) std::cout << "config_hash " << r.config_hash << " " << r.ablation << " seed " << r.seed << "\n";
            const auto rows = aggregate_stats(records, resamples, level, stats_seed);
            for (const auto& r : rows)
                if (r.warning == CiWarning::SingleRun)
                    std::cerr << "warning: " << r.method << " has a single run; CI collapsed to the point estimate\n";
            const fs::path out = resolve_out_dir(out_flag, "stats") / "stats.csv";
            write_file_atomic(out, stats_csv(rows));
            std::cout << "wrote " << out.string() << "\n";
        } else if (pr->parsed()) {
            const TrainConfig cfg = load_config(config_path);
            print_hash(cfg);
            auto agent = load_agent(cfg, checkpoint);
            const auto rows = run_probe(*agent, cfg, fit_eps, eval_eps, analysis_seed);
            const fs::path out = resolve_out_dir(out_flag, "analysis") / "probe.csv";
            write_file_atomic(out, probe_csv(rows));
            std::cout << "wrote " << out.string() << "\n";
        } else if (ca->parsed()) {
            const TrainConfig cfg = load_config(config_path);
            print_hash(cfg);
            auto agent = load_agent(cfg, checkpoint);
            const auto a = run_comm_analysis(*agent, cfg, trajectories, pca_trajectories, comm_episodes, analysis_seed);
            const fs::path out = resolve_out_dir(out_flag, "analysis");
            write_file_atomic(out / "c_distance.csv", matrix_csv(a.distances));
            write_file_atomic(out / "c_pca.csv", pca_coordinates_csv(a));
            write_file_atomic(out / "c_pca_variance.csv", pca_variance_csv(a));
            std::cout << "wrote " << (out / "c_distance.csv").string() << ", c_pca.csv, c_pca_variance.csv\n";
        } else if (rp->parsed()) {
            const std::string text = read_file(stats_csv_path);
            const auto rows = parse_stats_csv(text);
            const fs::path out = resolve_out_dir(out_flag, "report");
            write_file_atomic(out / "stats.csv", text);
            write_file_atomic(out / "iqm.svg", iqm_svg(rows));
            std::cout << "wrote " << (out / "iqm.svg").string() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
