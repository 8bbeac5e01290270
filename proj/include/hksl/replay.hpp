#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/envs.hpp"
#include "hksl/rng.hpp"
#include "hksl/tensor.hpp"

namespace hksl {

struct Transition {
    std::vector<double> action;
    double reward = 0.0;
    Frame next_frame;  // newest frame of the observation after the step
    bool done = false;
};

/// Length-k trajectories: k+1 observations, k actions, k rewards per row.
struct TrajectoryBatch {
    std::size_t batch = 0;
    std::size_t k = 0;
    std::vector<Tensor> obs;      // k+1 tensors of [B, G, G, 9]
    std::vector<Tensor> actions;  // k tensors of [B, A]
    Tensor rewards;               // [B, k]
    Tensor dones;                 // [B, k], done flag of each transition
    std::vector<std::uint64_t> episode_ids;
    std::vector<std::size_t> starts;  // 1-based start index within the episode

    double reward(std::size_t b, std::size_t i) const { return rewards[b * k + i]; }
};

/// Episode-delimited replay memory. Frames are stored once per step; frame stacks are rebuilt on
/// sampling. Capacity is counted in transitions and eviction drops whole episodes, oldest first.
class ReplayMemory {
  public:
    struct Episode {
        std::uint64_t id = 0;
        std::vector<Frame> frames;  // frames[0] is the reset frame; frames[t] follows transition t
        std::vector<double> actions;
        std::vector<double> rewards;
        bool done = false;
        std::size_t length() const { return rewards.size(); }

        /// Observation before transition t (1-based).
        void write_observation(std::size_t t, double* dst) const {
            Observation o;
            for (std::size_t f = 0; f < kFrameStack; ++f) {
                const long idx = static_cast<long>(t) - 1 - static_cast<long>(kFrameStack - 1 - f);
                o.frames[f] = frames[static_cast<std::size_t>(std::max<long>(idx, 0))];
            }
            o.write_into(dst);
        }
    };

    ReplayMemory(std::size_t capacity, std::size_t action_dim) : capacity_(capacity), action_dim_(action_dim) {
        if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return size_; }
    std::size_t num_episodes() const { return episodes_.size(); }
    const std::deque<Episode>& episodes() const { return episodes_; }

    /// Opens a new episode with the reset frame. A still-open episode is closed as-is.
    void start_episode(const Frame& first) {
        Episode e;
        e.id = next_id_++;
        e.frames.push_back(first);
        episodes_.push_back(std::move(e));
        open_ = true;
    }

    void append(const Transition& tr) {
        if (!open_) throw std::logic_error("append without an open episode; call start_episode first");
        if (tr.action.size() != action_dim_) throw std::invalid_argument("transition action has wrong dimension");
        Episode& e = episodes_.back();
        if (!e.frames.empty() && tr.next_frame.pixels.size() != e.frames.front().pixels.size())
            throw std::invalid_argument("transition frame has wrong size");
        e.frames.push_back(tr.next_frame);
        e.actions.insert(e.actions.end(), tr.action.begin(), tr.action.end());
        e.rewards.push_back(tr.reward);
        ++size_;
        if (tr.done) {
            e.done = true;
            open_ = false;
        }
        evict();
    }

    /// Trajectory of k steps starting at 1-based index s is eligible when s <= T - k.
    std::size_t eligible_episodes(std::size_t k) const {
        std::size_t n = 0;
        for (const auto& e : episodes_) n += e.length() >= k + 1;
        return n;
    }

    TrajectoryBatch sample_trajectories(std::size_t batch, std::size_t k, Rng& rng) const {
        if (k == 0) throw std::invalid_argument("trajectory length k must be positive");
        std::vector<const Episode*> eligible;
        for (const auto& e : episodes_)
            if (e.length() >= k + 1) eligible.push_back(&e);
        if (eligible.empty())
            throw std::runtime_error("no stored episode has at least k+1=" + std::to_string(k + 1) +
                                     " transitions; collect more data before sampling");
        const std::size_t g = episodes_.front().frames.front().grid;
        const std::size_t obs_size = g * g * 3 * kFrameStack;
        TrajectoryBatch out;
        out.batch = batch;
        out.k = k;
        out.obs.assign(k + 1, Tensor({batch, g, g, 3 * kFrameStack}));
        out.actions.assign(k, Tensor({batch, action_dim_}));
        out.rewards = Tensor({batch, k});
        out.dones = Tensor({batch, k});
        for (std::size_t b = 0; b < batch; ++b) {
            const Episode& e = *eligible[uniform_index(rng, eligible.size())];
            const std::size_t start = 1 + uniform_index(rng, e.length() - k);
            out.episode_ids.push_back(e.id);
            out.starts.push_back(start);
            for (std::size_t i = 0; i <= k; ++i) e.write_observation(start + i, out.obs[i].ptr() + b * obs_size);
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t tr = start - 1 + i;  // 0-based transition index
                std::copy_n(e.actions.begin() + static_cast<long>(tr * action_dim_), action_dim_,
                            out.actions[i].ptr() + b * action_dim_);
                out.rewards[b * k + i] = e.rewards[tr];
                out.dones[b * k + i] = (e.done && tr + 1 == e.length()) ? 1.0 : 0.0;
            }
        }
        return out;
    }

  private:
    void evict() {
        while (size_ > capacity_ && episodes_.size() > 1) {
            size_ -= episodes_.front().length();
            episodes_.pop_front();
        }
    }

    std::size_t capacity_;
    std::size_t action_dim_;
    std::size_t size_ = 0;
    std::uint64_t next_id_ = 0;
    bool open_ = false;
    std::deque<Episode> episodes_;
};

/// Sum_{i<n} gamma^i r[start+i] + gamma^n * bootstrap.
inline double n_step_return(std::span<const double> rewards, std::size_t start, std::size_t n, double gamma,
                            double bootstrap_value) {
    if (start + n > rewards.size())
        throw std::out_of_range("n-step horizon " + std::to_string(start + n) + " exceeds trajectory length " +
                                std::to_string(rewards.size()));
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
    double ret = 0.0, disc = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        ret += disc * rewards[start + i];
        disc *= gamma;
    }
    return ret + disc * bootstrap_value;
}

}  // namespace hksl
