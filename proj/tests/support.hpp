#pragma once

#include "hksl/models.hpp"
#include "hksl/replay.hpp"
#include "hksl/rng.hpp"
#include "hksl/tensor.hpp"

namespace hksl::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = uniform(rng, lo, hi);
    return t;
}

template <class Module>
void zero_params(Module& m) {
    for (const auto& p : params_of(m)) p.tensor->fill(0.0);
}

inline ModelConfig small_model(std::size_t grid = 8) {
    ModelConfig c;
    c.grid = grid;
    c.conv_filters = 4;
    c.feature_dim = 4;
    c.comm_hidden = 6;
    c.proj_hidden = 6;
    c.mlp_hidden = 8;
    return c;
}

/// Random observations and actions; rewards filled with `reward`.
inline TrajectoryBatch random_batch(std::size_t batch, std::size_t k, std::size_t grid, Rng& rng, double reward = 0.0,
                                    std::size_t action_dim = 2) {
    TrajectoryBatch b;
    b.batch = batch;
    b.k = k;
    for (std::size_t i = 0; i <= k; ++i) b.obs.push_back(random_tensor({batch, grid, grid, 9}, rng, 0.0, 1.0));
    for (std::size_t i = 0; i < k; ++i) b.actions.push_back(random_tensor({batch, action_dim}, rng));
    b.rewards = Tensor({batch, k}, reward);
    b.dones = Tensor({batch, k});
    b.episode_ids.assign(batch, 0);
    b.starts.assign(batch, 1);
    return b;
}

inline bool all_zero(const Tensor& t) {
    for (double v : t.data())
        if (v != 0.0) return false;
    return true;
}

/// True when `g` holds no entry for `p` or only zeros.
inline bool no_gradient(const Gradients& g, const Tensor* p) {
    auto it = g.find(p);
    return it == g.end() || all_zero(it->second);
}

}  // namespace hksl::testing
