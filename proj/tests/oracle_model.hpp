#pragma once

#include <cmath>

#include "hksl/analysis.hpp"

namespace hksl::testing {

/// Two-level stand-in for a trained agent. The coarse level's latent holds the true ball position
/// (the slow factor), the fine level's holds the cup position; both carry two deterministic
/// nuisance features. Predictions read the ground truth at the predicted step, so a correct
/// measurement pipeline must report zero coarse-level ball error.
class OracleModel : public LatentModel {
  public:
    std::size_t levels() const override { return 2; }
    std::size_t skip(std::size_t l) const override { return l == 0 ? 1 : 3; }
    std::size_t horizon() const override { return 6; }

    std::vector<Eigen::MatrixXd> encode(const EpisodeLog& ep, std::span<const std::size_t> ts) const override {
        std::vector<Eigen::MatrixXd> out(2, Eigen::MatrixXd(static_cast<long>(ts.size()), 4));
        for (std::size_t i = 0; i < ts.size(); ++i)
            for (std::size_t l = 0; l < 2; ++l) out[l].row(static_cast<long>(i)) = latent(ep, l, ts[i]);
        return out;
    }

    std::vector<std::vector<Eigen::MatrixXd>> rollout(const EpisodeLog& ep,
                                                      std::span<const std::size_t> starts) const override {
        std::vector<std::vector<Eigen::MatrixXd>> out(2);
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t j = 0; j < horizon() / skip(l); ++j) {
                Eigen::MatrixXd m(static_cast<long>(starts.size()), 4);
                for (std::size_t i = 0; i < starts.size(); ++i)
                    m.row(static_cast<long>(i)) = latent(ep, l, starts[i] + (j + 1) * skip(l));
                out[l].push_back(std::move(m));
            }
        return out;
    }

    std::vector<Eigen::MatrixXd> messages(const EpisodeLog& ep, std::span<const std::size_t> starts) const override {
        std::vector<Eigen::MatrixXd> out;
        for (std::size_t t = 0; t < horizon(); ++t) {
            Eigen::MatrixXd m(static_cast<long>(starts.size()), 3);
            for (std::size_t i = 0; i < starts.size(); ++i) {
                const auto g = truth_row(ep, starts[i]);
                m.row(static_cast<long>(i)) << g[0] + 0.1 * static_cast<double>(t), g[1], std::sin(static_cast<double>(t));
            }
            out.push_back(std::move(m));
        }
        return out;
    }

  private:
    static Eigen::RowVector4d latent(const EpisodeLog& ep, std::size_t level, std::size_t t) {
        const Eigen::RowVector4d g = truth_row(ep, t);
        const double s = static_cast<double>(t) + 0.37 * static_cast<double>(ep.seed % 101);
        if (level == 1) return {g[0], g[1], std::sin(1.3 * s), std::cos(0.7 * s)};
        return {g[2], g[3], std::sin(2.1 * s), std::cos(1.9 * s)};
    }
};

}  // namespace hksl::testing
