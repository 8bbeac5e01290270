#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "hksl/tensor.hpp"

namespace hksl {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter moment estimates. Moments are created lazily at the first step that touches a parameter.
class AdamState {
  public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }

    struct Moments {
        Tensor m;
        Tensor v;
    };
    const Moments* moments(ParamId p) const {
        auto it = moments_.find(p);
        return it == moments_.end() ? nullptr : &it->second;
    }

    /// One bias-corrected Adam update over `params`. Parameters absent from `grads` are left untouched.
    void step(const std::vector<Tensor*>& params, const Gradients& grads, double lr) {
        if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
        for (Tensor* p : params) {
            auto g = grads.find(p);
            if (g != grads.end() && g->second.shape() != p->shape())
                throw std::invalid_argument("adam: gradient shape " + shape_str(g->second.shape()) +
                                            " does not match parameter " + shape_str(p->shape()));
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (Tensor* p : params) {
            auto g = grads.find(p);
            if (g == grads.end()) continue;
            auto [it, fresh] = moments_.try_emplace(p);
            if (fresh) it->second = Moments{Tensor(p->shape()), Tensor(p->shape())};
            Tensor& m = it->second.m;
            Tensor& v = it->second.v;
            const Tensor& grad = g->second;
            for (std::size_t i = 0; i < p->size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                (*p)[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

  private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::unordered_map<ParamId, Moments> moments_;
};

inline void adam_step(const std::vector<Tensor*>& params, const Gradients& grads, AdamState& state, double lr) {
    state.step(params, grads, lr);
}

}  // namespace hksl
