#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/adam.hpp"
#include "hksl/envs.hpp"
#include "hksl/hksl.hpp"
#include "hksl/models.hpp"
#include "hksl/replay.hpp"

namespace hksl {

struct SacConfig {
    double gamma = 0.99;
    double lr = 1e-3;       // critic, actor and temperature
    double hksl_lr = 1e-3;  // representation loss
    double init_alpha = 0.1;
    double critic_tau = 0.01;
    double encoder_tau = 0.05;
    int target_update_freq = 2;
    int actor_update_freq = 1;
};

struct CriticUpdateResult {
    std::vector<double> level_losses;
    bool targets_updated = false;
};

struct ActorUpdateResult {
    bool updated = false;
    double actor_loss = 0.0;
    double alpha_loss = 0.0;
    double mean_log_prob = 0.0;
};

/// Thrown when an update produces a non-finite loss or parameter.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// SAC host: one critic (and target critic) per level fed by that level's encoder, an actor on the
/// concatenation of every level's representation, and a learned temperature.
class Agent {
  public:
    Agent(const ModelConfig& model, const HierarchyConfig& hier, const SacConfig& sac, Rng& init_rng)
        : model_(model), sac_(sac), hierarchy_(model, hier, init_rng) {
        critics_.reserve(hier.h);
        targets_.reserve(hier.h);
        for (std::size_t l = 0; l < hier.h; ++l) {
            critics_.emplace_back(model.feature_dim, model, init_rng);
            targets_.push_back(critics_.back());
        }
        actor_ = Actor(hier.h * model.feature_dim, model, init_rng);
        log_alpha_ = Tensor::scalar(std::log(sac.init_alpha));
        if (sac_.target_update_freq < 1 || sac_.actor_update_freq < 1)
            throw std::invalid_argument("update frequencies must be >= 1");
    }
    Agent(const Agent&) = delete;
    Agent& operator=(const Agent&) = delete;

    const ModelConfig& model() const { return model_; }
    const SacConfig& sac() const { return sac_; }
    Hierarchy& hierarchy() { return hierarchy_; }
    const Hierarchy& hierarchy() const { return hierarchy_; }
    std::size_t levels() const { return hierarchy_.levels(); }
    Critic& critic(std::size_t l) { return critics_[l]; }
    const Critic& critic(std::size_t l) const { return critics_[l]; }
    Critic& target_critic(std::size_t l) { return targets_[l]; }
    Actor& actor() { return actor_; }
    const Actor& actor() const { return actor_; }
    Tensor& log_alpha() { return log_alpha_; }
    double alpha() const { return std::exp(log_alpha_[0]); }
    double target_entropy() const { return -static_cast<double>(model_.action_dim); }
    long critic_updates() const { return critic_updates_; }
    long actor_calls() const { return actor_calls_; }

    ParamList critic_params(std::size_t l) { return params_of(critics_[l], "level" + std::to_string(l) + ".critic"); }
    ParamList target_critic_params(std::size_t l) {
        return params_of(targets_[l], "level" + std::to_string(l) + ".critic_target");
    }
    ParamList actor_params() { return params_of(actor_, "actor"); }

    /// Every parameter in checkpoint order.
    ParamList all_params() {
        ParamList out = hierarchy_.all_params();
        for (std::size_t l = 0; l < levels(); ++l) {
            for (auto& p : critic_params(l)) out.push_back(p);
            for (auto& p : target_critic_params(l)) out.push_back(p);
        }
        for (auto& p : actor_params()) out.push_back(p);
        out.push_back({"log_alpha", &log_alpha_});
        return out;
    }

    /// [B, h*d] concatenation of every level's online representation.
    Var encode_all(Tape& t, const Tensor& obs, bool trainable) const {
        std::vector<Var> reps;
        Var x = t.constant(obs);
        for (std::size_t l = 0; l < levels(); ++l) reps.push_back(hierarchy_.encoder(l)(t, x, trainable));
        return reps.size() == 1 ? reps.front() : concat(reps);
    }

    /// Single observation -> action in (-1, 1)^A.
    std::vector<double> act(const Observation& obs, ActionMode mode, Rng& rng) const {
        Tape t;
        Tensor x = obs.to_tensor();
        x = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
        ActorOutput out = actor_(t, encode_all(t, x, false), mode, &rng, false);
        const auto& a = out.action.value();
        return {a.data().begin(), a.data().end()};
    }

    // -----------------------------------------------------------------------
    // Loss construction. Each builder records onto the caller's tape so tests can inspect gradients.

    /// Sum over levels of the twin-head squared Bellman error with n^l-step targets.
    std::vector<Var> critic_losses(Tape& t, const TrajectoryBatch& batch, Rng& rng) const {
        const auto& hc = hierarchy_.config();
        const std::size_t B = batch.batch;
        std::vector<Var> losses;
        for (std::size_t l = 0; l < levels(); ++l) {
            const std::size_t n = hc.skip(l);
            if (batch.k < n)
                throw std::invalid_argument("trajectory length " + std::to_string(batch.k) + " < level skip " +
                                            std::to_string(n));
            Tensor y = bellman_targets(batch, l, n, rng);
            Var z = hierarchy_.encoder(l)(t, t.constant(batch.obs[0]), true);
            QHeads q = critics_[l](t, z, t.constant(batch.actions[0]), true);
            Var target = t.constant(y.reshaped({B, 1}));
            Var loss = mean(square(sub(q.q1, target)));
            if (critics_[l].twin) loss = add(loss, mean(square(sub(q.q2, target))));
            losses.push_back(loss);
        }
        return losses;
    }

    /// n-step targets for level l: rewards from the trajectory plus the discounted soft value at
    /// o_{1+n}, evaluated with the momentum encoder and target critic.
    Tensor bellman_targets(const TrajectoryBatch& batch, std::size_t l, std::size_t n, Rng& rng) const {
        const std::size_t B = batch.batch;
        Tape t;
        const Tensor& next_obs = batch.obs[n];
        ActorOutput next = actor_(t, encode_all(t, next_obs, false), ActionMode::Stochastic, &rng, false);
        Var zbar = hierarchy_.momentum_encoder(l)(t, t.constant(next_obs), false);
        Var qbar = critic_eval(targets_[l], t, zbar, next.action, QReduce::Min, false).front();
        const double a = alpha();
        Tensor y({B});
        std::vector<double> rewards(batch.k);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < batch.k; ++i) rewards[i] = batch.reward(b, i);
            const double v = qbar.value()[b] - a * next.log_prob.value()[b];
            y[b] = n_step_return(rewards, 0, n, sac_.gamma, v);
        }
        return y;
    }

    /// Negated summed-Q soft objective. Encoders are registered (so their zero gradient is
    /// observable) but their outputs are cut from the graph.
    struct ActorLoss {
        Var loss;
        Var log_prob;
    };
    ActorLoss actor_loss(Tape& t, const Tensor& obs, Rng& rng, bool critics_trainable = false) const {
        std::vector<Var> reps;
        Var x = t.constant(obs);
        for (std::size_t l = 0; l < levels(); ++l) reps.push_back(stop_gradient(hierarchy_.encoder(l)(t, x, true)));
        Var zc = reps.size() == 1 ? reps.front() : concat(reps);
        ActorOutput out = actor_(t, zc, ActionMode::Stochastic, &rng, true);
        Var qsum;
        for (std::size_t l = 0; l < levels(); ++l) {
            Var q = critic_eval(critics_[l], t, reps[l], out.action, QReduce::Min, critics_trainable).front();
            qsum = l == 0 ? q : add(qsum, q);
        }
        Var alpha_const = t.constant(Tensor::scalar(alpha()));
        Var loss = mean(sub(scale_by(out.log_prob, alpha_const), qsum));
        return {loss, out.log_prob};
    }

    // -----------------------------------------------------------------------
    // Updates.

    double hksl_update(const TrajectoryBatch& batch) {
        Tape t;
        HkslLoss loss = hksl_loss(hierarchy_, t, batch);
        const double v = loss.total.value().item();
        if (!std::isfinite(v)) throw NumericalError("representation loss is not finite");
        Gradients g = backward(t, loss.total);
        ParamList params = hierarchy_.trainable_params();
        adam_step(tensors_of(params), g, hksl_opt_, sac_.hksl_lr);
        return v;
    }

    CriticUpdateResult critic_update(const TrajectoryBatch& batch, Rng& rng) {
        Tape t;
        std::vector<Var> losses = critic_losses(t, batch, rng);
        CriticUpdateResult res;
        Var total = losses.front();
        for (std::size_t i = 0; i < losses.size(); ++i) {
            res.level_losses.push_back(losses[i].value().item());
            if (i) total = add(total, losses[i]);
        }
        if (!std::isfinite(total.value().item())) throw NumericalError("critic loss is not finite");
        Gradients g = backward(t, total);
        ParamList params;
        for (std::size_t l = 0; l < levels(); ++l) {
            for (auto& p : critic_params(l)) params.push_back(p);
        }
        for (std::size_t i = 0; i < hierarchy_.encoder_count(); ++i)
            for (auto& p : hierarchy_.encoder_params(i)) params.push_back(p);
        adam_step(tensors_of(params), g, critic_opt_, sac_.lr);
        ++critic_updates_;
        if (critic_updates_ % sac_.target_update_freq == 0) {
            update_targets();
            res.targets_updated = true;
        }
        return res;
    }

    void update_targets() {
        for (std::size_t l = 0; l < levels(); ++l) ema_update(critics_[l], targets_[l], sac_.critic_tau);
        hierarchy_.update_momentum(sac_.encoder_tau);
    }

    ActorUpdateResult actor_and_alpha_update(const TrajectoryBatch& batch, Rng& rng) {
        ActorUpdateResult res;
        const bool due = actor_calls_ % sac_.actor_update_freq == 0;
        ++actor_calls_;
        if (!due) return res;
        res.updated = true;
        double mean_lp = 0.0;
        {
            Tape t;
            ActorLoss al = actor_loss(t, batch.obs[0], rng);
            res.actor_loss = al.loss.value().item();
            if (!std::isfinite(res.actor_loss)) throw NumericalError("actor loss is not finite");
            for (double v : al.log_prob.value().data()) mean_lp += v;
            mean_lp /= static_cast<double>(al.log_prob.value().size());
            Gradients g = backward(t, al.loss);
            adam_step(tensors_of(actor_params()), g, actor_opt_, sac_.lr);
        }
        {
            Tape t;
            Var la = t.param(log_alpha_);
            Var loss = scale(la, -(mean_lp + target_entropy()));
            res.alpha_loss = loss.value().item();
            Gradients g = backward(t, loss);
            adam_step({&log_alpha_}, g, alpha_opt_, sac_.lr);
        }
        res.mean_log_prob = mean_lp;
        return res;
    }

    /// Throws NumericalError if any parameter is NaN or infinite.
    void check_finite() {
        for (const auto& p : all_params())
            for (double v : p.tensor->data())
                if (!std::isfinite(v)) throw NumericalError("parameter " + p.name + " became non-finite");
    }

  private:
    ModelConfig model_;
    SacConfig sac_;
    Hierarchy hierarchy_;
    std::vector<Critic> critics_;
    std::vector<Critic> targets_;
    Actor actor_;
    Tensor log_alpha_;
    AdamState hksl_opt_, critic_opt_, actor_opt_, alpha_opt_;
    long critic_updates_ = 0;
    long actor_calls_ = 0;
};

}  // namespace hksl
