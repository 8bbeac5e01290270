#include <gtest/gtest.h>

#include "hksl/analysis.hpp"
#include "oracle_model.hpp"
#include "support.hpp"

using namespace hksl;
using namespace hksl::testing;

namespace {

Eigen::MatrixXd random_matrix(long r, long c, Rng& rng) {
    Eigen::MatrixXd m(r, c);
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) m(i, j) = standard_normal(rng);
    return m;
}

std::vector<EpisodeLog> episodes(std::uint64_t first, std::size_t count, int length = 40, std::size_t grid = 24) {
    EnvConfig cfg;
    cfg.episode_length = length;
    cfg.grid = grid;
    std::vector<EpisodeLog> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(record_random_episode(cfg, first + i));
    return out;
}

const ProbeErrorRow& find_row(const std::vector<ProbeErrorRow>& rows, std::size_t level, std::size_t step,
                              const std::string& target) {
    for (const auto& r : rows)
        if (r.level == level && r.step == step && r.target == target) return r;
    throw std::runtime_error("row not found");
}

Eigen::MatrixXd random_orthonormal(long rows, long cols, Rng& rng) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(rows, cols, rng));
    return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

}  // namespace

TEST(LinearProbe, RecoversExactLinearMap) {
    Rng rng(1);
    const Eigen::MatrixXd x = random_matrix(200, 6, rng), w = random_matrix(6, 2, rng);
    Eigen::RowVector2d b(0.3, -1.2);
    const Eigen::MatrixXd y = (x * w).rowwise() + b;
    const LinearProbe p = fit_linear_probe(x, y);
    EXPECT_LT(probe_residual(p, x, y), 1e-8);
    EXPECT_NEAR(p.bias[0], 0.3, 1e-6);
}

TEST(LinearProbe, ConstantTargetsGiveBiasOnly) {
    Rng rng(2);
    const Eigen::MatrixXd x = random_matrix(100, 5, rng);
    const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(100, 2, 0.75);
    const LinearProbe p = fit_linear_probe(x, y);
    EXPECT_LT(p.weight.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(p.bias[0], 0.75, 1e-10);
    EXPECT_NEAR(p.bias[1], 0.75, 1e-10);
}

TEST(LinearProbe, NoWorseThanMeanPredictor) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(10 + s);
        const Eigen::MatrixXd x = random_matrix(60, 8, rng), y = random_matrix(60, 2, rng);
        const LinearProbe p = fit_linear_probe(x, y);
        const Eigen::MatrixXd mean_pred = y.colwise().mean().replicate(60, 1);
        EXPECT_LE(probe_residual(p, x, y), (mean_pred - y).squaredNorm() / 120.0);
    }
}

TEST(LinearProbe, Errors) {
    Rng rng(3);
    EXPECT_THROW(fit_linear_probe(random_matrix(5, 5, rng), random_matrix(5, 2, rng)), std::invalid_argument);
    EXPECT_THROW(fit_linear_probe(random_matrix(10, 2, rng), random_matrix(9, 2, rng)), std::invalid_argument);
    Eigen::MatrixXd bad = random_matrix(50, 3, rng);
    bad.col(0) *= 1e12;
    bad.col(1).setZero();
    EXPECT_THROW(fit_linear_probe(bad, random_matrix(50, 2, rng)), std::runtime_error);
}

// ---------------------------------------------------------------------------

TEST(ProbeRolloutError, OracleAgentSeparatesLevels) {
    OracleModel oracle;
    const auto rows = probe_rollout_error(oracle, episodes(100, 6), episodes(200, 3));
    for (const auto& r : rows) {
        EXPECT_GE(r.mean, 0.0);
        EXPECT_TRUE(std::isfinite(r.mean));
    }
    for (std::size_t step : {0, 3, 6}) EXPECT_LT(find_row(rows, 1, step, "ball").mean, 1e-6) << step;
    for (std::size_t step : {0, 1, 2, 3, 4, 5, 6}) {
        EXPECT_GT(find_row(rows, 0, step, "ball").mean, 0.01) << step;
        EXPECT_LT(find_row(rows, 0, step, "cup").mean, 1e-6) << step;
    }
    // The coarse level reports only on its own grid.
    for (const auto& r : rows)
        if (r.level == 1) EXPECT_EQ(r.step % 3, 0u);
    EXPECT_EQ(find_row(rows, 1, 3, "ball").count, 3u * 6u);
}

TEST(ProbeRolloutError, FitAndEvalMustBeDisjoint) {
    OracleModel oracle;
    EXPECT_THROW(probe_rollout_error(oracle, episodes(1, 2), episodes(2, 2)), std::invalid_argument);
    EXPECT_THROW(probe_rollout_error(oracle, {}, episodes(2, 2)), std::invalid_argument);
}

TEST(ProbeRolloutError, RunsOnAHierarchy) {
    Rng rng(4);
    HierarchyConfig hc;
    Hierarchy hier(small_model(12), hc, rng);
    HierarchyModel model(hier);
    const auto rows = probe_rollout_error(model, episodes(10, 2, 20, 12), episodes(20, 1, 20, 12));
    EXPECT_EQ(rows.size(), 2u * (7 + 3));
    const std::string csv = probe_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "level,step,target,mean,std,count");
}

TEST(HierarchyModel, ShapesMatchTheHierarchy) {
    Rng rng(5);
    HierarchyConfig hc;
    Hierarchy hier(small_model(12), hc, rng);
    HierarchyModel model(hier);
    const auto ep = episodes(1, 1, 20, 12).front();
    const std::vector<std::size_t> starts{1, 7};
    const auto roll = model.rollout(ep, starts);
    ASSERT_EQ(roll.size(), 2u);
    EXPECT_EQ(roll[0].size(), 6u);
    EXPECT_EQ(roll[1].size(), 2u);
    EXPECT_EQ(roll[1][0].rows(), 2);
    EXPECT_EQ(model.messages(ep, starts).size(), 6u);
    const auto enc = model.encode(ep, starts);
    EXPECT_EQ(enc[0].cols(), 4);
}

// ---------------------------------------------------------------------------

TEST(CommDistance, SymmetricZeroDiagonalAndTriangle) {
    OracleModel oracle;
    Rng rng(6);
    const auto eps = episodes(300, 4);
    const auto outputs = sample_c_outputs(oracle, eps, 20, rng);
    for (const auto& traj : outputs) {
        const Eigen::MatrixXd d = c_distance_matrix({traj});
        for (long i = 0; i < d.rows(); ++i)
            for (long j = 0; j < d.cols(); ++j)
                for (long m = 0; m < d.cols(); ++m) EXPECT_LE(d(i, j), d(i, m) + d(m, j) + 1e-12);
    }
    const Eigen::MatrixXd d = c_distance_matrix(outputs);
    ASSERT_EQ(d.rows(), 6);
    EXPECT_LE((d - d.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(d.diagonal().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GE(d.minCoeff(), 0.0);
    EXPECT_GT(d(0, 5), d(0, 1));
}

TEST(CommDistance, ZeroedCommunicationGivesZeroMatrix) {
    Rng rng(7);
    HierarchyConfig hc;
    Hierarchy hier(small_model(12), hc, rng);
    zero_params(*hier.level(0).comm);
    HierarchyModel model(hier);
    const Eigen::MatrixXd d = c_distance_matrix(model, episodes(1, 2, 20, 12), 5, rng);
    EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
}

TEST(CommDistance, SingleLevelIsAnError) {
    Rng rng(8);
    HierarchyConfig hc;
    hc.h = 1;
    hc.n = {1};
    Hierarchy hier(small_model(12), hc, rng);
    HierarchyModel model(hier);
    EXPECT_THROW(c_distance_matrix(model, episodes(1, 1, 20, 12), 2, rng), std::invalid_argument);
}

TEST(MatrixCsv, Format) {
    Eigen::MatrixXd m(2, 2);
    m << 0, 1.5, 1.5, 0;
    EXPECT_EQ(matrix_csv(m), "0,1.5\n1.5,0\n");
}

// ---------------------------------------------------------------------------

TEST(Pca, RankOneDataExplainsEverything) {
    Rng rng(9);
    Eigen::VectorXd u = random_matrix(50, 1, rng).col(0).normalized();
    Eigen::MatrixXd data(300, 50);
    for (long i = 0; i < 300; ++i) data.row(i) = (3.0 * standard_normal(rng)) * u.transpose() + Eigen::RowVectorXd::Constant(50, 2.0);
    const PcaResult p = pca_project(data, 2);
    EXPECT_NEAR(p.explained_variance_ratio[0], 1.0, 1e-6);
    EXPECT_NEAR(std::abs(p.components.row(0).dot(u.transpose())), 1.0, 1e-8);
    const Eigen::MatrixXd gram = p.components * p.components.transpose();
    EXPECT_LE((gram - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(p.coordinates.rows(), 300);
}

TEST(Pca, KnownCovarianceRatios) {
    Rng rng(10);
    const Eigen::MatrixXd basis = random_orthonormal(10, 2, rng);
    Eigen::MatrixXd data(10000, 10);
    for (long i = 0; i < 10000; ++i)
        data.row(i) = (basis.col(0) * (2.0 * standard_normal(rng)) + basis.col(1) * standard_normal(rng)).transpose();
    const PcaResult p = pca_project(data, 3);
    EXPECT_NEAR(p.explained_variance_ratio[0], 0.8, 0.05);
    EXPECT_NEAR(p.explained_variance_ratio[1], 0.2, 0.05);
    EXPECT_NEAR(p.explained_variance_ratio[2], 0.0, 1e-12);
    const Eigen::MatrixXd gram = p.components * p.components.transpose();
    EXPECT_LE((gram - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Pca, RowOrderDoesNotMatter) {
    Rng rng(11);
    Eigen::MatrixXd data = random_matrix(80, 6, rng);
    data.col(0) *= 5.0;
    data.col(3) *= 2.0;
    Eigen::MatrixXd reversed = data.colwise().reverse();
    const PcaResult a = pca_project(data, 2), b = pca_project(reversed, 2);
    for (long c = 0; c < 2; ++c) EXPECT_NEAR(std::abs(a.components.row(c).dot(b.components.row(c))), 1.0, 1e-8);
}

TEST(Pca, Errors) {
    Rng rng(12);
    EXPECT_THROW(pca_project(random_matrix(3, 5, rng), 3), std::invalid_argument);
    EXPECT_THROW(pca_project(random_matrix(10, 5, rng), 0), std::invalid_argument);
    EXPECT_THROW(pca_project(random_matrix(10, 5, rng), 6), std::invalid_argument);
}
