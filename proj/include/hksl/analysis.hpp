#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hksl/envs.hpp"
#include "hksl/evalstats.hpp"
#include "hksl/hksl.hpp"
#include "hksl/rng.hpp"
#include "hksl/tensor.hpp"

namespace hksl {

// ---------------------------------------------------------------------------
// Linear probes.

/// y = x W + b. Fit on centered data so the ridge term never shrinks the bias.
struct LinearProbe {
    Eigen::MatrixXd weight;  // [d, outputs]
    Eigen::RowVectorXd bias;

    Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const { return (x * weight).rowwise() + bias; }
};

inline constexpr double kProbeRidge = 1e-6;

inline LinearProbe fit_linear_probe(const Eigen::MatrixXd& reps, const Eigen::MatrixXd& targets) {
    const auto n = reps.rows(), d = reps.cols();
    if (targets.rows() != n) throw std::invalid_argument("probe: reps and targets have different sample counts");
    if (n < d + 1)
        throw std::invalid_argument("probe: need at least " + std::to_string(d + 1) + " samples, got " +
                                    std::to_string(n));
    const Eigen::RowVectorXd xm = reps.colwise().mean(), ym = targets.colwise().mean();
    const Eigen::MatrixXd xc = reps.rowwise() - xm;
    const Eigen::MatrixXd yc = targets.rowwise() - ym;
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += kProbeRidge;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-15))
        throw std::runtime_error("probe: representation matrix is rank-deficient even with ridge regularization");
    LinearProbe p;
    p.weight = ldlt.solve(xc.transpose() * yc);
    if (!p.weight.allFinite()) throw std::runtime_error("probe: solution is not finite");
    p.bias = ym - xm * p.weight;
    return p;
}

/// Mean squared residual over all entries.
inline double probe_residual(const LinearProbe& p, const Eigen::MatrixXd& reps, const Eigen::MatrixXd& targets) {
    return (p.predict(reps) - targets).squaredNorm() / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Models under analysis.

/// What the analysis needs from an agent. Time indices are 1-based: observation t is the frame
/// stack seen before action t, and its ground truth is ep.steps[t - 1].truth.
class LatentModel {
  public:
    virtual ~LatentModel() = default;
    virtual std::size_t levels() const = 0;
    virtual std::size_t skip(std::size_t level) const = 0;
    virtual std::size_t horizon() const = 0;
    /// One [ts.size(), d] matrix per level.
    virtual std::vector<Eigen::MatrixXd> encode(const EpisodeLog& ep, std::span<const std::size_t> ts) const = 0;
    /// out[l][j] is [starts.size(), d]: level l's latent after (j + 1) * skip(l) logged actions.
    virtual std::vector<std::vector<Eigen::MatrixXd>> rollout(const EpisodeLog& ep,
                                                              std::span<const std::size_t> starts) const = 0;
    /// Messages received by the finest level, one [starts.size(), d] matrix per step.
    virtual std::vector<Eigen::MatrixXd> messages(const EpisodeLog& ep, std::span<const std::size_t> starts) const = 0;
};

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.cols());
    m = as_matrix(t, t.dim(0), t.cols());
    return m;
}

/// Adapter over a trained hierarchy (no gradients recorded).
class HierarchyModel : public LatentModel {
  public:
    explicit HierarchyModel(const Hierarchy& h) : hier_(h) {}

    std::size_t levels() const override { return hier_.levels(); }
    std::size_t skip(std::size_t l) const override { return hier_.config().skip(l); }
    std::size_t horizon() const override { return hier_.config().k; }

    std::vector<Eigen::MatrixXd> encode(const EpisodeLog& ep, std::span<const std::size_t> ts) const override {
        const Tensor obs = stack_observations(ep, ts);
        std::vector<Eigen::MatrixXd> out;
        for (std::size_t l = 0; l < levels(); ++l) {
            Tape t;
            out.push_back(to_matrix(hier_.encoder(l)(t, t.constant(obs), false).value()));
        }
        return out;
    }

    std::vector<std::vector<Eigen::MatrixXd>> rollout(const EpisodeLog& ep,
                                                      std::span<const std::size_t> starts) const override {
        Tape t;
        std::vector<std::vector<Eigen::MatrixXd>> out(levels());
        for (const auto& r : run(t, ep, starts))
            for (Var p : r.predictions) out[r.level].push_back(to_matrix(p.value()));
        return out;
    }

    std::vector<Eigen::MatrixXd> messages(const EpisodeLog& ep, std::span<const std::size_t> starts) const override {
        Tape t;
        std::vector<Eigen::MatrixXd> out;
        for (const auto& r : run(t, ep, starts))
            if (r.level == 0)
                for (Var m : r.messages) out.push_back(to_matrix(m.value()));
        return out;
    }

  private:
    static Tensor stack_observations(const EpisodeLog& ep, std::span<const std::size_t> ts) {
        const std::size_t g = ep.grid, per = g * g * 3 * kFrameStack;
        Tensor obs = Tensor::uninitialized({ts.size(), g, g, 3 * kFrameStack});
        for (std::size_t i = 0; i < ts.size(); ++i) ep.observation(ts[i]).write_into(obs.ptr() + i * per);
        return obs;
    }

    std::vector<LevelRollout> run(Tape& t, const EpisodeLog& ep, std::span<const std::size_t> starts) const {
        const std::size_t k = horizon();
        TrajectoryBatch batch;
        batch.batch = starts.size();
        batch.k = k;
        batch.obs.resize(k + 1);
        batch.obs[0] = stack_observations(ep, starts);
        for (std::size_t i = 0; i < k; ++i) {
            Tensor a({starts.size(), kActionDim});
            for (std::size_t b = 0; b < starts.size(); ++b) {
                const auto& act = ep.steps.at(starts[b] + i).action;
                std::copy(act.begin(), act.end(), a.ptr() + b * kActionDim);
            }
            batch.actions.push_back(std::move(a));
        }
        return hksl::rollout(hier_, t, batch, false, false);
    }

    const Hierarchy& hier_;
};

// ---------------------------------------------------------------------------
// Specialization probe.

struct ProbeErrorRow {
    std::size_t level = 0;
    std::size_t step = 0;  // environment steps after the encoded observation
    std::string target;    // "ball" or "cup"
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
};

/// Number of transitions in a logged episode.
inline std::size_t episode_transitions(const EpisodeLog& ep) { return ep.steps.empty() ? 0 : ep.steps.size() - 1; }

/// Non-overlapping rollout windows: starts 1, 1 + k, ... while start + k <= T.
inline std::vector<std::size_t> window_starts(const EpisodeLog& ep, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t s = 1; s + k <= episode_transitions(ep); s += k) out.push_back(s);
    return out;
}

inline Eigen::RowVector4d truth_row(const EpisodeLog& ep, std::size_t t) {
    const GroundTruth& g = ep.steps.at(t - 1).truth;
    return {g.ball.x, g.ball.y, g.cup.x, g.cup.y};
}

/// Probes are fit per level on encoder outputs for every observation of the fit episodes, then
/// applied to forward-model latents of the eval episodes at each level's native step grid.
/// Step 0 is the encoder output itself.
inline std::vector<ProbeErrorRow> probe_rollout_error(const LatentModel& model, const std::vector<EpisodeLog>& fit,
                                                      const std::vector<EpisodeLog>& eval) {
    if (fit.empty() || eval.empty()) throw std::invalid_argument("probe: fit and eval episode sets must be non-empty");
    std::set<std::uint64_t> fit_ids;
    for (const auto& e : fit) fit_ids.insert(e.seed);
    for (const auto& e : eval)
        if (fit_ids.count(e.seed)) throw std::invalid_argument("probe: episode " + std::to_string(e.seed) + " is in both fit and eval sets");

    const std::size_t L = model.levels(), k = model.horizon();
    std::vector<Eigen::MatrixXd> reps(L);
    Eigen::MatrixXd truth;
    {
        std::vector<std::vector<Eigen::MatrixXd>> parts(L);
        std::vector<Eigen::RowVector4d> rows;
        for (const auto& ep : fit) {
            std::vector<std::size_t> ts;
            for (std::size_t t = 1; t <= episode_transitions(ep) + 1; ++t) {
                ts.push_back(t);
                rows.push_back(truth_row(ep, t));
            }
            auto enc = model.encode(ep, ts);
            for (std::size_t l = 0; l < L; ++l) parts[l].push_back(std::move(enc[l]));
        }
        truth.resize(static_cast<long>(rows.size()), 4);
        for (std::size_t i = 0; i < rows.size(); ++i) truth.row(static_cast<long>(i)) = rows[i];
        for (std::size_t l = 0; l < L; ++l) {
            reps[l].resize(truth.rows(), parts[l].front().cols());
            long r = 0;
            for (const auto& m : parts[l]) {
                reps[l].middleRows(r, m.rows()) = m;
                r += m.rows();
            }
        }
    }
    std::vector<LinearProbe> probes;
    for (std::size_t l = 0; l < L; ++l) probes.push_back(fit_linear_probe(reps[l], truth));

    // errors[l][step][target]
    std::vector<std::vector<std::array<std::vector<double>, 2>>> errors(L, std::vector<std::array<std::vector<double>, 2>>(k + 1));
    auto record = [&](std::size_t l, std::size_t step, const Eigen::MatrixXd& latent, const EpisodeLog& ep,
                      const std::vector<std::size_t>& starts) {
        const Eigen::MatrixXd pred = probes[l].predict(latent);
        for (long i = 0; i < pred.rows(); ++i) {
            const Eigen::RowVector4d g = truth_row(ep, starts[static_cast<std::size_t>(i)] + step);
            errors[l][step][0].push_back((pred.row(i).head<2>() - g.head<2>()).norm());
            errors[l][step][1].push_back((pred.row(i).tail<2>() - g.tail<2>()).norm());
        }
    };
    for (const auto& ep : eval) {
        const std::vector<std::size_t> starts = window_starts(ep, k);
        if (starts.empty()) continue;
        const auto enc = model.encode(ep, starts);
        const auto roll = model.rollout(ep, starts);
        for (std::size_t l = 0; l < L; ++l) {
            record(l, 0, enc[l], ep, starts);
            for (std::size_t j = 0; j < roll[l].size(); ++j) record(l, (j + 1) * model.skip(l), roll[l][j], ep, starts);
        }
    }

    std::vector<ProbeErrorRow> out;
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t s = 0; s <= k; ++s)
            for (int tg = 0; tg < 2; ++tg) {
                const auto& v = errors[l][s][static_cast<std::size_t>(tg)];
                if (v.empty()) continue;
                const double m = mean_score(v);
                double var = 0.0;
                for (double x : v) var += (x - m) * (x - m);
                out.push_back({l, s, tg == 0 ? "ball" : "cup", m, std::sqrt(var / static_cast<double>(v.size())), v.size()});
            }
    return out;
}

/// Columns: level,step,target,mean,std,count
inline std::string probe_csv(const std::vector<ProbeErrorRow>& rows) {
    std::string out = "level,step,target,mean,std,count\n";
    for (const auto& r : rows)
        out += std::to_string(r.level) + "," + std::to_string(r.step) + "," + r.target + "," + format_double(r.mean) +
               "," + format_double(r.stddev) + "," + std::to_string(r.count) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Communication-manager analysis.

/// c's outputs along sampled trajectories: result[i][t] is the message at finest-level step t of
/// trajectory i. Episodes are chosen uniformly, starts uniformly over 1..T-k.
inline std::vector<std::vector<Eigen::VectorXd>> sample_c_outputs(const LatentModel& model,
                                                                  const std::vector<EpisodeLog>& episodes,
                                                                  std::size_t num_trajectories, Rng& rng) {
    if (model.levels() < 2) throw std::invalid_argument("communication analysis needs at least two levels");
    if (episodes.empty()) throw std::invalid_argument("communication analysis needs stored episodes");
    const std::size_t k = model.horizon();
    std::vector<std::vector<Eigen::VectorXd>> out;
    for (std::size_t i = 0; i < num_trajectories; ++i) {
        const EpisodeLog& ep = episodes[uniform_index(rng, episodes.size())];
        const std::size_t T = episode_transitions(ep);
        if (T < k + 1) throw std::invalid_argument("episode too short for a length-k trajectory");
        const std::size_t start = 1 + uniform_index(rng, T - k);
        const auto msgs = model.messages(ep, std::span<const std::size_t>(&start, 1));
        if (msgs.empty()) throw std::invalid_argument("model has no communication manager");
        std::vector<Eigen::VectorXd> row;
        for (const auto& m : msgs) row.push_back(m.row(0).transpose());
        out.push_back(std::move(row));
    }
    return out;
}

/// Element-wise mean over trajectories of pairwise l2 distances between c's outputs at each step.
inline Eigen::MatrixXd c_distance_matrix(const std::vector<std::vector<Eigen::VectorXd>>& outputs) {
    if (outputs.empty()) throw std::invalid_argument("no trajectories");
    const auto N = static_cast<long>(outputs.front().size());
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(N, N);
    for (const auto& traj : outputs) {
        if (static_cast<long>(traj.size()) != N) throw std::invalid_argument("trajectories have different lengths");
        for (long i = 0; i < N; ++i)
            for (long j = i + 1; j < N; ++j) {
                const double v = (traj[static_cast<std::size_t>(i)] - traj[static_cast<std::size_t>(j)]).norm();
                d(i, j) += v;
                d(j, i) += v;
            }
    }
    return d / static_cast<double>(outputs.size());
}

inline Eigen::MatrixXd c_distance_matrix(const LatentModel& model, const std::vector<EpisodeLog>& episodes,
                                         std::size_t num_trajectories, Rng& rng) {
    return c_distance_matrix(sample_c_outputs(model, episodes, num_trajectories, rng));
}

inline std::string matrix_csv(const Eigen::MatrixXd& m) {
    std::string out;
    for (long i = 0; i < m.rows(); ++i) {
        for (long j = 0; j < m.cols(); ++j) out += (j ? "," : "") + format_double(m(i, j));
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// PCA.

struct PcaResult {
    Eigen::MatrixXd components;  // [dims, D], orthonormal rows
    Eigen::VectorXd explained_variance_ratio;
    Eigen::MatrixXd coordinates;  // [n, dims]
};

inline constexpr double kPcaTolerance = 1e-10;
inline constexpr int kPcaMaxIterations = 10000;

/// Top eigenvectors of the sample covariance by power iteration with deflation. Convergence is
/// declared when ||C v - lambda v|| <= tol * trace(C).
inline PcaResult pca_project(const Eigen::MatrixXd& data, std::size_t dims, std::uint64_t seed = 0) {
    const long n = data.rows(), D = data.cols();
    if (dims < 1 || static_cast<long>(dims) > D) throw std::invalid_argument("pca: dims must lie in [1, D]");
    if (n < static_cast<long>(dims) + 1)
        throw std::invalid_argument("pca: need at least dims + 1 = " + std::to_string(dims + 1) + " vectors");
    const Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    const double total = cov.trace();

    PcaResult out;
    out.components.resize(static_cast<long>(dims), D);
    out.explained_variance_ratio.resize(static_cast<long>(dims));
    Eigen::MatrixXd deflated = cov;
    Rng rng = make_rng(seed, "pca");
    auto orthogonalize = [&](Eigen::VectorXd& v, long found) {
        for (long c = 0; c < found; ++c) v -= out.components.row(c).dot(v) * out.components.row(c).transpose();
    };
    for (long c = 0; c < static_cast<long>(dims); ++c) {
        Eigen::VectorXd v(D);
        for (long i = 0; i < D; ++i) v[i] = standard_normal(rng);
        orthogonalize(v, c);
        v.normalize();
        double lambda = 0.0;
        bool converged = false;
        for (int it = 0; it < kPcaMaxIterations; ++it) {
            Eigen::VectorXd w = deflated * v;
            lambda = v.dot(w);
            if ((w - lambda * v).norm() <= kPcaTolerance * std::max(total, 1e-300)) {
                converged = true;
                break;
            }
            orthogonalize(w, c);
            const double norm = w.norm();
            if (norm == 0.0) {
                converged = true;  // remaining variance is zero; any orthogonal direction will do
                break;
            }
            v = w / norm;
        }
        if (!converged)
            throw std::runtime_error("pca: power iteration did not converge in " + std::to_string(kPcaMaxIterations) +
                                     " iterations for component " + std::to_string(c));
        orthogonalize(v, c);
        v.normalize();
        out.components.row(c) = v.transpose();
        out.explained_variance_ratio[c] = total > 0.0 ? std::max(lambda, 0.0) / total : 0.0;
        deflated -= lambda * v * v.transpose();
    }
    out.coordinates = centered * out.components.transpose();
    return out;
}

}  // namespace hksl
