#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hksl/checkpoint.hpp"
#include "hksl/rng.hpp"
#include "hksl/tensor.hpp"

namespace hksl {

struct ModelConfig {
    std::size_t grid = 24;
    std::size_t frame_channels = 9;  // 3 stacked RGB frames
    std::size_t conv_filters = 16;
    std::vector<std::size_t> conv_strides{2, 1};
    std::size_t feature_dim = 50;
    std::size_t comm_hidden = 128;
    std::size_t proj_hidden = 128;
    std::size_t mlp_hidden = 256;
    std::size_t action_dim = 2;
    bool twin_q = true;
    double log_std_min = -10.0;
    double log_std_max = 2.0;
};

/// Named reference to one parameter tensor, in a fixed declaration order.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};
using ParamList = std::vector<ParamRef>;

inline std::vector<Tensor*> tensors_of(const ParamList& list) {
    std::vector<Tensor*> out;
    out.reserve(list.size());
    for (const auto& p : list) out.push_back(p.tensor);
    return out;
}

inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data()) v = uniform(rng, -bound, bound);
    return t;
}

/// Parameters enter the tape as trainable leaves or as constants (momentum copies, frozen paths).
inline Var use_param(Tape& tape, const Tensor& p, bool trainable) {
    return trainable ? tape.param(p) : tape.constant(p);
}

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng)
        : weight(uniform_init({in, out}, in, rng)), bias(uniform_init({out}, in, rng)) {}

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    Var operator()(Tape& t, Var x, bool trainable = true) const {
        if (x.value().cols() != in_features())
            throw std::invalid_argument("linear: expected " + std::to_string(in_features()) + " input features, got " +
                                        std::to_string(x.value().cols()));
        return add_row(matmul(x, use_param(t, weight, trainable)), use_param(t, bias, trainable));
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

struct Conv3x3 {
    Tensor weight;  // [out, 9 * in]
    Tensor bias;    // [out]
    std::size_t stride = 1;

    Conv3x3() = default;
    Conv3x3(std::size_t in, std::size_t out, std::size_t stride_, Rng& rng)
        : weight(uniform_init({out, 9 * in}, 9 * in, rng)), bias(uniform_init({out}, 9 * in, rng)), stride(stride_) {}

    Var operator()(Tape& t, Var x, bool trainable = true) const {
        return conv2d(x, use_param(t, weight, trainable), use_param(t, bias, trainable), stride);
    }

    void collect(const std::string& prefix, ParamList& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

/// Two-layer ReLU MLP: in -> hidden -> out, no output activation.
struct Mlp2 {
    Linear l1, l2;

    Mlp2() = default;
    Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : l1(in, hidden, rng), l2(hidden, out, rng) {}

    Var operator()(Tape& t, Var x, bool trainable = true) const { return l2(t, relu(l1(t, x, trainable)), trainable); }

    void collect(const std::string& prefix, ParamList& out) {
        l1.collect(prefix + ".l1", out);
        l2.collect(prefix + ".l2", out);
    }
};

// ---------------------------------------------------------------------------

/// Conv stack -> linear -> layer norm with learned scale and shift.
struct Encoder {
    std::vector<Conv3x3> convs;
    Linear fc;
    Tensor ln_scale, ln_shift;
    std::size_t grid = 0, channels = 0;

    Encoder() = default;
    Encoder(const ModelConfig& cfg, Rng& rng) : grid(cfg.grid), channels(cfg.frame_channels) {
        std::size_t in = cfg.frame_channels, side = cfg.grid;
        for (std::size_t s : cfg.conv_strides) {
            convs.emplace_back(in, cfg.conv_filters, s, rng);
            in = cfg.conv_filters;
            side = (side - 1) / s + 1;
        }
        fc = Linear(side * side * in, cfg.feature_dim, rng);
        ln_scale = Tensor({cfg.feature_dim}, 1.0);
        ln_shift = Tensor({cfg.feature_dim}, 0.0);
    }

    std::size_t feature_dim() const { return fc.out_features(); }

    /// obs: [B, G, G, C] -> [B, feature_dim].
    Var operator()(Tape& t, Var obs, bool trainable = true) const {
        const Shape& s = obs.shape();
        if (s.size() != 4 || s[1] != grid || s[2] != grid || s[3] != channels)
            throw std::invalid_argument("encoder: expected observation [B," + std::to_string(grid) + "," +
                                        std::to_string(grid) + "," + std::to_string(channels) + "], got " +
                                        shape_str(s));
        Var h = obs;
        for (const auto& c : convs) h = relu(c(t, h, trainable));
        const std::size_t b = h.shape()[0];
        h = reshape(h, {b, h.value().size() / b});
        h = layer_norm(fc(t, h, trainable));
        return add_row(mul_row(h, use_param(t, ln_scale, trainable)), use_param(t, ln_shift, trainable));
    }

    void collect(const std::string& prefix, ParamList& out) {
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + ".conv" + std::to_string(i), out);
        fc.collect(prefix + ".fc", out);
        out.push_back({prefix + ".ln.scale", &ln_scale});
        out.push_back({prefix + ".ln.shift", &ln_shift});
    }
};

/// GRU-style forward model with an optional second pathway driven by a communication message.
/// The two pathways are averaged when the message is present.
struct ForwardCell {
    Linear gru_u, gru_r, gru_h;
    std::optional<Linear> c_u, c_r, c_h;
    std::size_t latent = 0, action_in = 0;

    ForwardCell() = default;
    ForwardCell(std::size_t latent_dim, std::size_t action_concat_dim, bool with_comm, Rng& rng)
        : gru_u(action_concat_dim + latent_dim, latent_dim, rng),
          gru_r(action_concat_dim + latent_dim, latent_dim, rng),
          gru_h(latent_dim + action_concat_dim, latent_dim, rng),
          latent(latent_dim),
          action_in(action_concat_dim) {
        if (with_comm) {
            c_u.emplace(2 * latent_dim, latent_dim, rng);
            c_r.emplace(2 * latent_dim, latent_dim, rng);
            c_h.emplace(2 * latent_dim, latent_dim, rng);
        }
    }

    bool has_comm() const { return c_u.has_value(); }

    Var operator()(Tape& t, Var z, Var actions, std::optional<Var> message, bool trainable = true) const {
        if (message.has_value() != has_comm())
            throw std::invalid_argument(has_comm() ? "forward cell on a lower level requires a communication message"
                                                   : "forward cell on the top level takes no communication message");
        if (z.value().cols() != latent || actions.value().cols() != action_in)
            throw std::invalid_argument("forward cell: input widths do not match");
        Var u = sigmoid(gru_u(t, concat({actions, z}), trainable));
        Var r = sigmoid(gru_r(t, concat({actions, z}), trainable));
        Var h = tanh(gru_h(t, concat({mul(r, z), actions}), trainable));
        Var one_minus_u = add_scalar(neg(u), 1.0);
        Var g_gru = add(mul(one_minus_u, z), mul(u, h));
        if (!message) return g_gru;
        Var m = *message;
        if (m.value().cols() != latent) throw std::invalid_argument("forward cell: message width mismatch");
        Var uc = sigmoid((*c_u)(t, concat({m, z}), trainable));
        Var rc = sigmoid((*c_r)(t, concat({m, z}), trainable));
        Var hc = tanh((*c_h)(t, concat({mul(rc, m), z}), trainable));
        Var g_c = add(mul(add_scalar(neg(uc), 1.0), z), mul(uc, hc));
        return scale(add(g_c, g_gru), 0.5);
    }

    void collect(const std::string& prefix, ParamList& out) {
        gru_u.collect(prefix + ".gru_u", out);
        gru_r.collect(prefix + ".gru_r", out);
        gru_h.collect(prefix + ".gru_h", out);
        if (has_comm()) {
            c_u->collect(prefix + ".c_u", out);
            c_r->collect(prefix + ".c_r", out);
            c_h->collect(prefix + ".c_h", out);
        }
    }
};

inline Tensor one_hot(std::size_t batch, std::size_t index, std::size_t length) {
    if (index >= length) throw std::out_of_range("one_hot: index out of range");
    Tensor t({batch, length});
    for (std::size_t b = 0; b < batch; ++b) t[b * length + index] = 1.0;
    return t;
}

/// Maps all representations of a coarser level plus the finer level's one-hot step to a message.
struct CommManager {
    Mlp2 net;
    std::size_t latent = 0, upper_reps = 0, lower_steps = 0;

    CommManager() = default;
    CommManager(std::size_t latent_dim, std::size_t upper_rep_count, std::size_t lower_step_count,
                std::size_t hidden, Rng& rng)
        : net(upper_rep_count * latent_dim + lower_step_count, hidden, latent_dim, rng),
          latent(latent_dim),
          upper_reps(upper_rep_count),
          lower_steps(lower_step_count) {}

    std::size_t input_dim() const { return upper_reps * latent + lower_steps; }

    /// level_reps: [B, upper_reps * latent] in chronological order; step_onehot: [B, lower_steps].
    Var operator()(Tape& t, Var level_reps, Var step_onehot, bool trainable = true) const {
        if (level_reps.value().cols() != upper_reps * latent || step_onehot.value().cols() != lower_steps)
            throw std::invalid_argument("communication manager: expected " + std::to_string(upper_reps * latent) +
                                        " representation features and a one-hot of length " +
                                        std::to_string(lower_steps));
        return net(t, concat({level_reps, step_onehot}), trainable);
    }

    void collect(const std::string& prefix, ParamList& out) { net.collect(prefix, out); }
};

struct Projection {
    Mlp2 net;

    Projection() = default;
    Projection(std::size_t latent_dim, std::size_t hidden, Rng& rng) : net(latent_dim, hidden, latent_dim, rng) {}

    Var operator()(Tape& t, Var z, bool trainable = true) const { return net(t, z, trainable); }
    void collect(const std::string& prefix, ParamList& out) { net.collect(prefix, out); }
};

// ---------------------------------------------------------------------------

enum class ActionMode { Stochastic, Deterministic };

struct ActorOutput {
    Var action;    // [B, A], squashed into (-1, 1)
    Var log_prob;  // [B, 1]
    Var mean;      // pre-squash mean [B, A]
    Var log_std;   // [B, A]
};

/// Tanh-squashed diagonal Gaussian policy.
struct Actor {
    Linear l1, l2, head;
    std::size_t action_dim = 0;
    double log_std_min = -10.0, log_std_max = 2.0;

    Actor() = default;
    Actor(std::size_t input_dim, const ModelConfig& cfg, Rng& rng)
        : l1(input_dim, cfg.mlp_hidden, rng),
          l2(cfg.mlp_hidden, cfg.mlp_hidden, rng),
          head(cfg.mlp_hidden, 2 * cfg.action_dim, rng),
          action_dim(cfg.action_dim),
          log_std_min(cfg.log_std_min),
          log_std_max(cfg.log_std_max) {}

    static constexpr double kSquashEps = 1e-6;

    ActorOutput operator()(Tape& t, Var z_concat, ActionMode mode, Rng* rng, bool trainable = true) const {
        Var h = relu(l2(t, relu(l1(t, z_concat, trainable)), trainable));
        Var out = head(t, h, trainable);
        for (double v : out.value().data())
            if (!std::isfinite(v)) throw std::domain_error("actor produced a non-finite output");
        Var mean = slice_cols(out, 0, action_dim);
        Var raw = tanh(slice_cols(out, action_dim, 2 * action_dim));
        Var log_std = add_scalar(scale(add_scalar(raw, 1.0), 0.5 * (log_std_max - log_std_min)), log_std_min);
        Tensor noise(mean.shape());
        if (mode == ActionMode::Stochastic) {
            if (!rng) throw std::invalid_argument("stochastic action sampling needs an rng");
            for (double& v : noise.data()) v = standard_normal(*rng);
        }
        Var eps = t.constant(noise);
        Var pre = add(mean, mul(exp(log_std), eps));
        Var action = tanh(pre);
        const double a = static_cast<double>(action_dim);
        Var gauss = row_sum(sub(scale(square(eps), -0.5), log_std));
        Var squash = row_sum(log(add_scalar(neg(square(action)), 1.0 + kSquashEps)));
        Var log_prob = add_scalar(sub(gauss, squash), -0.5 * std::log(2.0 * std::numbers::pi) * a);
        return {action, log_prob, mean, log_std};
    }

    void collect(const std::string& prefix, ParamList& out) {
        l1.collect(prefix + ".l1", out);
        l2.collect(prefix + ".l2", out);
        head.collect(prefix + ".head", out);
    }
};

struct QHeads {
    Var q1;
    Var q2;  // equals q1 for a single-head critic
};

/// One or two Q heads over [z | action].
struct Critic {
    Mlp2 trunk1, trunk2;
    Linear out1, out2;
    bool twin = true;

    Critic() = default;
    Critic(std::size_t latent_dim, const ModelConfig& cfg, Rng& rng) : twin(cfg.twin_q) {
        const std::size_t in = latent_dim + cfg.action_dim;
        trunk1 = Mlp2(in, cfg.mlp_hidden, cfg.mlp_hidden, rng);
        out1 = Linear(cfg.mlp_hidden, 1, rng);
        if (twin) {
            trunk2 = Mlp2(in, cfg.mlp_hidden, cfg.mlp_hidden, rng);
            out2 = Linear(cfg.mlp_hidden, 1, rng);
        }
    }

    QHeads operator()(Tape& t, Var z, Var action, bool trainable = true) const {
        Var x = concat({z, action});
        Var q1 = out1(t, relu(trunk1(t, x, trainable)), trainable);
        if (!twin) return {q1, q1};
        Var q2 = out2(t, relu(trunk2(t, x, trainable)), trainable);
        return {q1, q2};
    }

    void collect(const std::string& prefix, ParamList& out) {
        trunk1.collect(prefix + ".q1.trunk", out);
        out1.collect(prefix + ".q1.out", out);
        if (twin) {
            trunk2.collect(prefix + ".q2.trunk", out);
            out2.collect(prefix + ".q2.out", out);
        }
    }
};

enum class QReduce { Both, Min };

/// Returns [q1, q2] for Both, [min(q1, q2)] for Min.
inline std::vector<Var> critic_eval(const Critic& critic, Tape& t, Var z, Var action, QReduce reduce,
                                    bool trainable = true) {
    QHeads q = critic(t, z, action, trainable);
    if (reduce == QReduce::Min) return {critic.twin ? minimum(q.q1, q.q2) : q.q1};
    return {q.q1, q.q2};
}

// ---------------------------------------------------------------------------

template <class Module>
ParamList params_of(Module& m, const std::string& prefix = "") {
    ParamList out;
    m.collect(prefix.empty() ? "m" : prefix, out);
    return out;
}

/// momentum <- (1 - tau) * momentum + tau * online, element-wise over aligned parameter lists.
inline void ema_update(const ParamList& online, const ParamList& momentum, double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("ema tau must lie in (0, 1]");
    if (online.size() != momentum.size()) throw std::invalid_argument("ema: parameter lists differ in length");
    for (std::size_t i = 0; i < online.size(); ++i) {
        const Tensor& o = *online[i].tensor;
        Tensor& m = *momentum[i].tensor;
        if (o.shape() != m.shape())
            throw std::invalid_argument("ema: shape mismatch at " + online[i].name + ": " + shape_str(o.shape()) +
                                        " vs " + shape_str(m.shape()));
        if (tau == 1.0) {
            m = o;
            continue;
        }
        for (std::size_t j = 0; j < o.size(); ++j) m[j] = (1.0 - tau) * m[j] + tau * o[j];
    }
}

template <class Module>
void ema_update(Module& online, Module& momentum, double tau) {
    ema_update(params_of(online), params_of(momentum), tau);
}

inline std::vector<NamedTensor> snapshot(const ParamList& list) {
    std::vector<NamedTensor> out;
    out.reserve(list.size());
    for (const auto& p : list) out.push_back({p.name, *p.tensor});
    return out;
}

/// Copies records into an aligned parameter list; names and shapes must match exactly.
inline void restore(const ParamList& list, const std::vector<NamedTensor>& records) {
    if (records.size() != list.size())
        throw std::runtime_error("checkpoint has " + std::to_string(records.size()) + " records, model expects " +
                                 std::to_string(list.size()));
    for (std::size_t i = 0; i < list.size(); ++i) {
        if (records[i].name != list[i].name) throw std::runtime_error("checkpoint record order mismatch at " + list[i].name);
        if (records[i].value.shape() != list[i].tensor->shape())
            throw std::runtime_error("checkpoint shape mismatch at " + list[i].name);
        *list[i].tensor = records[i].value;
    }
}

}  // namespace hksl
