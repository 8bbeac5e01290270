#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/models.hpp"
#include "hksl/replay.hpp"
#include "hksl/tensor.hpp"

namespace hksl {

/// Levels are indexed from the finest (0) to the coarsest (h - 1).
struct HierarchyConfig {
    std::size_t h = 2;
    std::vector<std::size_t> n{1, 3};
    std::size_t k = 6;
    bool no_c = false;
    bool shared_encoder = false;
    bool all_n1 = false;

    void validate() const {
        if (h < 1) throw std::invalid_argument("hierarchy needs at least one level");
        if (n.size() != h)
            throw std::invalid_argument("n must list one skip per level (" + std::to_string(h) + "), got " +
                                        std::to_string(n.size()));
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (n[i] < 1) throw std::invalid_argument("level skips must be >= 1");
            if (i > 0 && n[i] < n[i - 1]) throw std::invalid_argument("level skips n must be sorted ascending");
        }
        if (k < *std::max_element(n.begin(), n.end()))
            throw std::invalid_argument("trajectory length k must be >= the largest skip");
    }

    std::size_t skip(std::size_t level) const { return all_n1 ? 1 : n.at(level); }
    /// Number of predictions level `level` makes in a length-k trajectory.
    std::size_t steps(std::size_t level) const { return k / skip(level); }
};

struct Level {
    ForwardCell forward;
    Projection projection;
    std::optional<CommManager> comm;  // message from level + 1; absent on the top level or with no_c
};

/// All representation-learning parameters: per-level encoders (online and momentum), forward models,
/// projections and communication managers.
class Hierarchy {
  public:
    Hierarchy(const ModelConfig& model, const HierarchyConfig& cfg, Rng& rng) : model_(model), cfg_(cfg) {
        cfg_.validate();
        const std::size_t encs = cfg_.shared_encoder ? 1 : cfg_.h;
        encoders_.reserve(encs);
        momentum_.reserve(encs);
        for (std::size_t i = 0; i < encs; ++i) {
            encoders_.emplace_back(model_, rng);
            momentum_.push_back(encoders_.back());
        }
        const std::size_t d = model_.feature_dim;
        levels_.resize(cfg_.h);
        for (std::size_t l = 0; l < cfg_.h; ++l) {
            const bool comm = !cfg_.no_c && l + 1 < cfg_.h;
            levels_[l].forward = ForwardCell(d, cfg_.skip(l) * model_.action_dim, comm, rng);
            levels_[l].projection = Projection(d, model_.proj_hidden, rng);
            if (comm) levels_[l].comm.emplace(d, cfg_.steps(l + 1) + 1, cfg_.steps(l), model_.comm_hidden, rng);
        }
    }
    Hierarchy(const Hierarchy&) = delete;
    Hierarchy& operator=(const Hierarchy&) = delete;

    const HierarchyConfig& config() const { return cfg_; }
    const ModelConfig& model() const { return model_; }
    std::size_t levels() const { return cfg_.h; }

    Encoder& encoder(std::size_t l) { return encoders_[cfg_.shared_encoder ? 0 : l]; }
    const Encoder& encoder(std::size_t l) const { return encoders_[cfg_.shared_encoder ? 0 : l]; }
    Encoder& momentum_encoder(std::size_t l) { return momentum_[cfg_.shared_encoder ? 0 : l]; }
    const Encoder& momentum_encoder(std::size_t l) const { return momentum_[cfg_.shared_encoder ? 0 : l]; }
    Level& level(std::size_t l) { return levels_[l]; }
    const Level& level(std::size_t l) const { return levels_[l]; }
    std::size_t encoder_count() const { return encoders_.size(); }

    ParamList encoder_params(std::size_t l) { return params_of(encoder(l), enc_name(l)); }
    ParamList momentum_params(std::size_t l) { return params_of(momentum_encoder(l), enc_name(l) + ".momentum"); }

    /// Parameters trained by the representation loss.
    ParamList trainable_params() {
        ParamList out;
        for (std::size_t i = 0; i < encoders_.size(); ++i) encoders_[i].collect(enc_name(i), out);
        for (std::size_t l = 0; l < cfg_.h; ++l) {
            const std::string p = "level" + std::to_string(l);
            levels_[l].forward.collect(p + ".forward", out);
            levels_[l].projection.collect(p + ".projection", out);
            if (levels_[l].comm) levels_[l].comm->collect(p + ".comm", out);
        }
        return out;
    }

    ParamList all_params() {
        ParamList out = trainable_params();
        for (std::size_t i = 0; i < momentum_.size(); ++i) momentum_[i].collect(enc_name(i) + ".momentum", out);
        return out;
    }

    void update_momentum(double tau) {
        for (std::size_t i = 0; i < encoders_.size(); ++i) ema_update(encoders_[i], momentum_[i], tau);
    }

  private:
    std::string enc_name(std::size_t l) const {
        return cfg_.shared_encoder ? std::string("shared.encoder") : "level" + std::to_string(l) + ".encoder";
    }

    ModelConfig model_;
    HierarchyConfig cfg_;
    std::vector<Encoder> encoders_;
    std::vector<Encoder> momentum_;
    std::vector<Level> levels_;
};

struct LevelRollout {
    std::size_t level = 0;
    Var z0;                        // encoder output for o_1
    std::vector<Var> predictions;  // N^l predicted latents
    std::vector<Var> projections;  // w^l of each prediction
    std::vector<Var> targets;      // momentum encodings of o_{1 + t n^l}, stop-gradient
    std::vector<Var> messages;     // message received at each step (empty if none)
};

namespace detail {

/// Stacks observation tensors along the batch axis: k tensors of [B, ...] -> [k*B, ...].
inline Tensor stack_batches(const std::vector<const Tensor*>& parts) {
    Shape s = parts.front()->shape();
    const std::size_t per = parts.front()->size();
    s[0] *= parts.size();
    Tensor out(s);
    for (std::size_t i = 0; i < parts.size(); ++i) std::copy_n(parts[i]->ptr(), per, out.ptr() + i * per);
    return out;
}

/// Splits rows of a constant [k*B, D] value into k constants of [B, D].
inline std::vector<Var> split_rows(Tape& t, const Tensor& v, std::size_t parts) {
    const std::size_t rows = v.dim(0) / parts, d = v.cols();
    std::vector<Var> out;
    for (std::size_t i = 0; i < parts; ++i) {
        Tensor piece({rows, d});
        std::copy_n(v.ptr() + i * rows * d, rows * d, piece.ptr());
        out.push_back(t.constant(std::move(piece)));
    }
    return out;
}

}  // namespace detail

/// Encodes a batch of observations with a momentum encoder; the result is a constant.
inline Tensor encode_constant(const Encoder& enc, const Tensor& obs) {
    Tape scratch;
    return enc(scratch, scratch.constant(obs), false).value();
}

/// Rolls every level through the trajectory batch, top level first so messages exist before the
/// level below steps. Observations are used as given (augment beforehand). Without targets only
/// obs[0] is read.
inline std::vector<LevelRollout> rollout(const Hierarchy& hier, Tape& t, const TrajectoryBatch& batch,
                                         bool trainable = true, bool with_targets = true) {
    const auto& cfg = hier.config();
    if (batch.k < cfg.k)
        throw std::invalid_argument("trajectory of length " + std::to_string(batch.k) + " is shorter than k=" +
                                    std::to_string(cfg.k));
    const std::size_t B = batch.batch;
    std::vector<LevelRollout> out;
    std::vector<Var> upper_reps;  // reps of the level above, chronological
    for (std::size_t li = cfg.h; li-- > 0;) {
        const Level& lvl = hier.level(li);
        const std::size_t n = cfg.skip(li), N = cfg.steps(li);
        LevelRollout r;
        r.level = li;
        r.z0 = hier.encoder(li)(t, t.constant(batch.obs[0]), trainable);

        if (with_targets) {
            std::vector<const Tensor*> target_obs;
            for (std::size_t j = 1; j <= N; ++j) target_obs.push_back(&batch.obs[j * n]);
            const Tensor targets = encode_constant(hier.momentum_encoder(li), detail::stack_batches(target_obs));
            r.targets = detail::split_rows(t, targets, N);
        }

        std::optional<Var> upper_concat;
        if (lvl.comm) upper_concat = concat(upper_reps);
        Var z = r.z0;
        for (std::size_t j = 0; j < N; ++j) {
            std::vector<Var> acts;
            for (std::size_t i = j * n; i < (j + 1) * n; ++i) acts.push_back(t.constant(batch.actions[i]));
            Var a_bar = acts.size() == 1 ? acts.front() : concat(acts);
            std::optional<Var> msg;
            if (lvl.comm) {
                msg = (*lvl.comm)(t, *upper_concat, t.constant(one_hot(B, j, N)), trainable);
                r.messages.push_back(*msg);
            }
            z = lvl.forward(t, z, a_bar, msg, trainable);
            r.predictions.push_back(z);
            r.projections.push_back(lvl.projection(t, z, trainable));
        }
        upper_reps.clear();
        upper_reps.push_back(r.z0);
        for (Var p : r.predictions) upper_reps.push_back(p);
        out.push_back(std::move(r));
    }
    return out;
}

/// Row-wise ||normalize(a) - normalize(b)||^2, shape [B, 1]; lies in [0, 4].
inline Var normalized_sq_dist(Var a, Var b) { return sq_dist(l2_normalize(a), l2_normalize(b)); }

struct HkslLoss {
    Var total;
    std::vector<Var> per_level;  // indexed by level (finest first)
    std::vector<LevelRollout> rollouts;
    std::size_t terms_per_trajectory = 0;
};

/// Sum over levels and steps of the batch-mean normalized distance between projected predictions
/// and momentum targets. `level_mask`, when given, restricts which levels contribute.
inline HkslLoss hksl_loss(const Hierarchy& hier, Tape& t, const TrajectoryBatch& batch,
                          const std::vector<bool>& level_mask = {}) {
    HkslLoss out;
    out.rollouts = rollout(hier, t, batch);
    out.per_level.resize(hier.levels());
    std::vector<Var> included;
    for (const auto& r : out.rollouts) {
        std::vector<Var> terms;
        for (std::size_t j = 0; j < r.projections.size(); ++j)
            terms.push_back(mean(normalized_sq_dist(r.projections[j], r.targets[j])));
        Var level_sum = terms.front();
        for (std::size_t j = 1; j < terms.size(); ++j) level_sum = add(level_sum, terms[j]);
        out.per_level[r.level] = level_sum;
        if (level_mask.empty() || level_mask.at(r.level)) {
            included.push_back(level_sum);
            out.terms_per_trajectory += terms.size();
        }
    }
    if (included.empty()) throw std::invalid_argument("hksl_loss: level mask excludes every level");
    out.total = included.front();
    for (std::size_t i = 1; i < included.size(); ++i) out.total = add(out.total, included[i]);
    return out;
}

}  // namespace hksl
