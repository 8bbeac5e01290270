#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hksl/checkpoint.hpp"
#include "hksl/envs.hpp"
#include "hksl/replay.hpp"
#include "hksl/rng.hpp"
#include "hksl/sac.hpp"

namespace hksl {

enum class Ablation { Full, NoRepr, AllN1, NoC, SharedEncoder, H1 };

inline const std::vector<Ablation>& all_ablations() {
    static const std::vector<Ablation> v{Ablation::Full,  Ablation::NoRepr,        Ablation::AllN1,
                                         Ablation::NoC,   Ablation::SharedEncoder, Ablation::H1};
    return v;
}

inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::Full: return "full";
        case Ablation::NoRepr: return "no_repr";
        case Ablation::AllN1: return "all_n1";
        case Ablation::NoC: return "no_c";
        case Ablation::SharedEncoder: return "shared_encoder";
        case Ablation::H1: return "h1";
    }
    return "?";
}

inline Ablation parse_ablation(const std::string& s) {
    for (Ablation a : all_ablations())
        if (to_string(a) == s) return a;
    throw std::invalid_argument("unknown ablation '" + s + "'");
}

struct TrainConfig {
    EnvConfig env{};
    HierarchyConfig hierarchy{};
    ModelConfig model{};
    SacConfig sac{};
    long total_steps = 10000;
    long eval_period = 1000;
    int eval_episodes = 10;
    long init_steps = 500;
    std::size_t batch_size = 32;
    std::size_t replay_capacity = 20000;
    std::size_t image_pad = 4;
    std::uint64_t seed = 1;
    Ablation ablation = Ablation::Full;

    void validate() const {
        env.validate();
        hierarchy.validate();
        if (total_steps < 1) throw std::invalid_argument("total_steps must be positive");
        if (eval_period < 1 || total_steps % eval_period != 0)
            throw std::invalid_argument("eval_period must divide total_steps");
        if (eval_episodes < 1) throw std::invalid_argument("eval_episodes must be positive");
        if (init_steps < static_cast<long>(hierarchy.k) + 1)
            throw std::invalid_argument("init_steps must be at least k + 1 so the first batch can be sampled");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
        if (image_pad >= env.grid) throw std::invalid_argument("image_pad must be smaller than the frame size");
        if (static_cast<std::size_t>(env.episode_length) < hierarchy.k + 1)
            throw std::invalid_argument("episode_length must be at least k + 1");
        if (model.grid != env.grid) throw std::invalid_argument("model grid must match env grid");
        if (model.action_dim != kActionDim) throw std::invalid_argument("model action_dim must match the environment");
        if (!(sac.gamma >= 0.0 && sac.gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
        if (!(sac.lr > 0.0 && sac.hksl_lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
        if (!(sac.init_alpha > 0.0)) throw std::invalid_argument("init_alpha must be positive");
        if (hierarchy.no_c || hierarchy.shared_encoder || hierarchy.all_n1)
            if (ablation != Ablation::Full)
                throw std::invalid_argument("hierarchy ablation flags and the ablation selector are mutually exclusive");
    }
};

/// Hierarchy actually built for a run after ablation wiring.
inline HierarchyConfig effective_hierarchy(const TrainConfig& cfg) {
    HierarchyConfig h = cfg.hierarchy;
    switch (cfg.ablation) {
        case Ablation::Full:
        case Ablation::NoRepr: break;
        case Ablation::AllN1: h.all_n1 = true; break;
        case Ablation::NoC: h.no_c = true; break;
        case Ablation::SharedEncoder: h.shared_encoder = true; break;
        case Ablation::H1:
            h.h = 1;
            h.n = {h.n.front()};
            break;
    }
    return h;
}

// ---------------------------------------------------------------------------

/// Deterministic core of augment: offsets are (row, col) into the padded frame, in [0, 2*pad].
inline void augment_with_offsets(std::vector<Tensor>& obs_batch, std::size_t pad,
                                 const std::vector<std::pair<long, long>>& offsets) {
    const Shape s = obs_batch.front().shape();
    const std::size_t B = s[0], G = s[1], C = s[3];
    const long g = static_cast<long>(G), p = static_cast<long>(pad);
    std::vector<double> buf(G * G * C);
    for (Tensor& t : obs_batch) {
        for (std::size_t b = 0; b < B; ++b) {
            const auto [oy, ox] = offsets[b];
            if (oy == p && ox == p) continue;
            double* img = t.ptr() + b * G * G * C;
            for (long r = 0; r < g; ++r) {
                const long sr = std::clamp(r + oy - p, 0L, g - 1);
                for (long c = 0; c < g; ++c) {
                    const long sc = std::clamp(c + ox - p, 0L, g - 1);
                    std::copy_n(img + (sr * g + sc) * static_cast<long>(C), C,
                                buf.data() + (r * g + c) * static_cast<long>(C));
                }
            }
            std::copy(buf.begin(), buf.end(), img);
        }
    }
}

/// Replicate-pads each frame by `pad` and crops back to the original size. One crop offset per
/// trajectory row, shared by all of that row's observations.
inline void augment(std::vector<Tensor>& obs_batch, std::size_t pad, Rng& rng) {
    if (obs_batch.empty()) return;
    const Shape s = obs_batch.front().shape();
    if (s.size() != 4) throw std::invalid_argument("augment expects [B, G, G, C] observations");
    const std::size_t B = s[0], G = s[1];
    if (pad >= G) throw std::invalid_argument("augment: pad must be smaller than the frame size");
    if (pad == 0) return;
    std::vector<std::pair<long, long>> offsets(B);
    for (auto& o : offsets) {
        o.first = static_cast<long>(uniform_index(rng, 2 * pad + 1));
        o.second = static_cast<long>(uniform_index(rng, 2 * pad + 1));
    }
    augment_with_offsets(obs_batch, pad, offsets);
}

// ---------------------------------------------------------------------------

struct Checkpoint {
    long step = 0;
    double mean_return = 0.0;
    bool operator==(const Checkpoint&) const = default;
};

struct RunRecord {
    std::string config_hash;
    std::string task;
    std::string ablation;
    std::uint64_t seed = 0;
    double max_return = 0.0;
    std::string checkpoint_path;
    std::vector<Checkpoint> checkpoints;
};

// RunRecord file: JSON lines. Line 1 is a header
//   {"record":"hksl-run","version":1,"config_hash":..,"task":..,"ablation":..,"seed":..,
//    "max_return":..,"checkpoint":..}
// followed by one line per evaluation checkpoint: {"step":S,"mean_return":R}.

inline std::string encode_run_record(const RunRecord& r) {
    nlohmann::ordered_json head{{"record", "hksl-run"},     {"version", 1},      {"config_hash", r.config_hash},
                                {"task", r.task},           {"ablation", r.ablation}, {"seed", r.seed},
                                {"max_return", r.max_return}, {"checkpoint", r.checkpoint_path}};
    std::string out = head.dump() + "\n";
    for (const auto& c : r.checkpoints) {
        nlohmann::ordered_json line{{"step", c.step}, {"mean_return", c.mean_return}};
        out += line.dump() + "\n";
    }
    return out;
}

inline RunRecord decode_run_record(const std::string& text) {
    RunRecord r;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (header) {
            if (j.value("record", "") != "hksl-run") throw std::runtime_error("not a run record");
            r.config_hash = j.at("config_hash").get<std::string>();
            r.task = j.at("task").get<std::string>();
            r.ablation = j.at("ablation").get<std::string>();
            r.seed = j.at("seed").get<std::uint64_t>();
            r.max_return = j.at("max_return").get<double>();
            r.checkpoint_path = j.at("checkpoint").get<std::string>();
            header = false;
            continue;
        }
        Checkpoint c{j.at("step").get<long>(), j.at("mean_return").get<double>()};
        if (!r.checkpoints.empty() && c.step <= r.checkpoints.back().step)
            throw std::runtime_error("run record steps are not increasing");
        r.checkpoints.push_back(c);
    }
    if (header) throw std::runtime_error("empty run record");
    return r;
}

inline void save_run_record(const std::filesystem::path& p, const RunRecord& r) {
    write_file_atomic(p, encode_run_record(r));
}
inline RunRecord load_run_record(const std::filesystem::path& p) { return decode_run_record(read_file(p)); }

// ---------------------------------------------------------------------------

/// Mean episodic return of the deterministic (mean) policy. Episode i is seeded from
/// derive_seed(eval_seed, "eval-episode", i), so repeated calls see the same episodes.
inline double evaluate(const Agent& agent, const EnvConfig& env_cfg, int episodes, std::uint64_t eval_seed) {
    Rng unused(0);
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        Env env(env_cfg);
        Observation obs = env.reset(derive_seed(eval_seed, "eval-episode", static_cast<std::uint64_t>(e)));
        while (!env.done()) {
            auto a = agent.act(obs, ActionMode::Deterministic, unused);
            auto r = env.step(a);
            total += r.reward;
            obs = r.observation;
        }
    }
    return total / episodes;
}

/// Same episodes as evaluate(), uniformly random actions.
inline double evaluate_random(const EnvConfig& env_cfg, int episodes, std::uint64_t eval_seed) {
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        Env env(env_cfg);
        Rng act = make_rng(eval_seed, "random-eval-actions", static_cast<std::uint64_t>(e));
        env.reset(derive_seed(eval_seed, "eval-episode", static_cast<std::uint64_t>(e)));
        while (!env.done()) {
            std::vector<double> a(kActionDim);
            for (double& v : a) v = uniform(act, -1.0, 1.0);
            total += env.step(a).reward;
        }
    }
    return total / episodes;
}

// ---------------------------------------------------------------------------

struct TrainHooks {
    std::function<void(long step, double mean_return)> on_checkpoint;
    /// Called after each post-warmup update with the agent, for inspection in tests.
    std::function<void(long step, Agent&)> after_update;
};

struct TrainResult {
    RunRecord record;
    std::unique_ptr<Agent> agent;
    std::size_t replay_size = 0;
    long hksl_updates = 0;
    long critic_updates = 0;
};

/// One (config, seed) run. Random streams: "init" (parameters), "env-episode" (episode seeds),
/// "warmup" (random actions), "action" (policy noise), "replay" (sampling), "augment" (crops),
/// "target" (target-policy noise), "actor" (actor-update noise), "eval" (evaluation episodes).
inline TrainResult train_run(const TrainConfig& cfg, const std::string& config_hash = "", TrainHooks hooks = {}) {
    cfg.validate();
    const HierarchyConfig hc = effective_hierarchy(cfg);
    Rng init = make_rng(cfg.seed, "init");
    auto agent = std::make_unique<Agent>(cfg.model, hc, cfg.sac, init);
    ReplayMemory replay(cfg.replay_capacity, kActionDim);
    Rng warmup = make_rng(cfg.seed, "warmup");
    Rng action_rng = make_rng(cfg.seed, "action");
    Rng replay_rng = make_rng(cfg.seed, "replay");
    Rng aug_rng = make_rng(cfg.seed, "augment");
    Rng target_rng = make_rng(cfg.seed, "target");
    Rng actor_rng = make_rng(cfg.seed, "actor");
    const std::uint64_t eval_seed = derive_seed(cfg.seed, "eval");

    TrainResult res;
    res.record.config_hash = config_hash;
    res.record.task = to_string(cfg.env.task);
    res.record.ablation = to_string(cfg.ablation);
    res.record.seed = cfg.seed;
    res.record.max_return = cfg.env.max_return();

    Env env(cfg.env);
    std::uint64_t episode = 0;
    Observation obs = env.reset(derive_seed(cfg.seed, "env-episode", episode));
    replay.start_episode(obs.frames.back());

    for (long step = 1; step <= cfg.total_steps; ++step) {
        std::vector<double> action(kActionDim);
        if (step <= cfg.init_steps) {
            for (double& v : action) v = uniform(warmup, -1.0, 1.0);
        } else {
            action = agent->act(obs, ActionMode::Stochastic, action_rng);
        }
        StepResult sr = env.step(action);
        replay.append({action, sr.reward, sr.observation.frames.back(), sr.done});
        obs = sr.observation;
        if (sr.done) {
            obs = env.reset(derive_seed(cfg.seed, "env-episode", ++episode));
            replay.start_episode(obs.frames.back());
        }

        if (step > cfg.init_steps) {
            TrajectoryBatch batch = replay.sample_trajectories(cfg.batch_size, hc.k, replay_rng);
            augment(batch.obs, cfg.image_pad, aug_rng);
            if (cfg.ablation != Ablation::NoRepr) {
                agent->hksl_update(batch);
                ++res.hksl_updates;
            }
            agent->critic_update(batch, target_rng);
            ++res.critic_updates;
            agent->actor_and_alpha_update(batch, actor_rng);
            if (hooks.after_update) hooks.after_update(step, *agent);
        }

        if (step % cfg.eval_period == 0) {
            agent->check_finite();
            const double ret = evaluate(*agent, cfg.env, cfg.eval_episodes, eval_seed);
            res.record.checkpoints.push_back({step, ret});
            if (hooks.on_checkpoint) hooks.on_checkpoint(step, ret);
        }
    }
    res.replay_size = replay.size();
    res.agent = std::move(agent);
    return res;
}

}  // namespace hksl
