#include <gtest/gtest.h>

#include "hksl/hksl.hpp"
#include "support.hpp"

using namespace hksl;
using namespace hksl::testing;

namespace {

HierarchyConfig two_level(std::size_t k = 6) {
    HierarchyConfig c;
    c.h = 2;
    c.n = {1, 3};
    c.k = k;
    return c;
}

Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, v);
}

}  // namespace

TEST(HierarchyConfig, Validation) {
    HierarchyConfig c = two_level();
    EXPECT_NO_THROW(c.validate());
    c.n = {3, 1};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.n = {1};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = two_level(2);
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.h = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Rollout, SingleLevelHasNoMessages) {
    Rng rng(1);
    HierarchyConfig c;
    c.h = 1;
    c.n = {1};
    c.k = 4;
    Hierarchy hier(small_model(), c, rng);
    auto batch = random_batch(2, 4, 8, rng);
    Tape t;
    auto r = rollout(hier, t, batch);
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r[0].predictions.size(), 4u);
    EXPECT_TRUE(r[0].messages.empty());
    EXPECT_FALSE(hier.level(0).forward.has_comm());
}

TEST(Rollout, TwoLevelStepCountsTopFirst) {
    Rng rng(2);
    Hierarchy hier(small_model(), two_level(), rng);
    auto batch = random_batch(3, 6, 8, rng);
    Tape t;
    auto r = rollout(hier, t, batch);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].level, 1u);
    EXPECT_EQ(r[0].predictions.size(), 2u);
    EXPECT_EQ(r[0].targets.size(), 2u);
    EXPECT_TRUE(r[0].messages.empty());
    EXPECT_EQ(r[1].level, 0u);
    EXPECT_EQ(r[1].predictions.size(), 6u);
    EXPECT_EQ(r[1].messages.size(), 6u);
    EXPECT_EQ(hier.level(0).comm->input_dim(), 3 * 4 + 6u);
    EXPECT_EQ(hier.level(1).forward.action_in, 6u);
    for (const auto& p : r[1].predictions) EXPECT_EQ(p.shape(), (Shape{3, 4}));
}

TEST(Rollout, TargetsAreMomentumEncodingsAtSkippedSteps) {
    Rng rng(3);
    Hierarchy hier(small_model(), two_level(), rng);
    auto batch = random_batch(2, 6, 8, rng);
    Tape t;
    auto r = rollout(hier, t, batch);
    // Targets are encoded as one stacked batch, so GEMM blocking may differ in the last bits.
    auto expect_close = [](const Tensor& a, const Tensor& b) {
        ASSERT_EQ(a.shape(), b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    };
    expect_close(r[0].targets[1].value(), encode_constant(hier.momentum_encoder(1), batch.obs[6]));
    expect_close(r[1].targets[2].value(), encode_constant(hier.momentum_encoder(0), batch.obs[3]));
    for (const auto& v : r[1].targets) EXPECT_FALSE(v.requires_grad());
}

TEST(Rollout, NoCommunicationFlag) {
    Rng rng(4);
    HierarchyConfig c = two_level();
    c.no_c = true;
    Hierarchy hier(small_model(), c, rng);
    auto batch = random_batch(2, 6, 8, rng);
    Tape t;
    auto r = rollout(hier, t, batch);
    EXPECT_TRUE(r[1].messages.empty());
    EXPECT_FALSE(hier.level(0).comm.has_value());
    EXPECT_FALSE(hier.level(0).forward.has_comm());
}

TEST(Rollout, AllN1GivesEqualStepCounts) {
    Rng rng(5);
    HierarchyConfig c = two_level();
    c.all_n1 = true;
    Hierarchy hier(small_model(), c, rng);
    auto batch = random_batch(2, 6, 8, rng);
    Tape t;
    auto r = rollout(hier, t, batch);
    EXPECT_EQ(r[0].predictions.size(), 6u);
    EXPECT_EQ(r[1].predictions.size(), 6u);
}

TEST(Rollout, SharedEncoderIsOneModule) {
    Rng rng(6);
    HierarchyConfig c = two_level();
    c.shared_encoder = true;
    Hierarchy hier(small_model(), c, rng);
    EXPECT_EQ(hier.encoder_count(), 1u);
    EXPECT_EQ(&hier.encoder(0), &hier.encoder(1));
}

TEST(Rollout, ShortTrajectoryIsAnError) {
    Rng rng(7);
    Hierarchy hier(small_model(), two_level(), rng);
    auto batch = random_batch(1, 5, 8, rng);
    Tape t;
    EXPECT_THROW(rollout(hier, t, batch), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(LossGeometry, ParallelOrthogonalAntiParallel) {
    Tape t;
    Var a = t.constant(row({1.0, 0.0, 0.0}));
    EXPECT_NEAR(normalized_sq_dist(a, t.constant(row({3.0, 0.0, 0.0}))).value().item(), 0.0, 1e-12);
    EXPECT_NEAR(normalized_sq_dist(a, t.constant(row({0.0, 0.5, 0.0}))).value().item(), 2.0, 1e-12);
    EXPECT_NEAR(normalized_sq_dist(a, t.constant(row({-2.0, 0.0, 0.0}))).value().item(), 4.0, 1e-12);
}

TEST(LossGeometry, TermsLieInZeroToFour) {
    Rng rng(8);
    Tape t;
    Var d = normalized_sq_dist(t.constant(random_tensor({500, 5}, rng)), t.constant(random_tensor({500, 5}, rng)));
    for (double v : d.value().data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 4.0);
    }
}

TEST(HkslLoss, EightTermsPerTrajectory) {
    Rng rng(9);
    Hierarchy hier(small_model(), two_level(), rng);
    auto batch = random_batch(2, 6, 8, rng);
    Tape t;
    HkslLoss loss = hksl_loss(hier, t, batch);
    EXPECT_EQ(loss.terms_per_trajectory, 8u);
    EXPECT_GE(loss.total.value().item(), 0.0);
    EXPECT_LE(loss.total.value().item(), 32.0);
    EXPECT_NEAR(loss.total.value().item(), loss.per_level[0].value().item() + loss.per_level[1].value().item(), 1e-12);
    EXPECT_THROW(hksl_loss(hier, t, batch, {false, false}), std::invalid_argument);
}

TEST(HkslLoss, MomentumEncodersGetNoGradient) {
    Rng rng(10);
    Hierarchy hier(small_model(), two_level(), rng);
    auto batch = random_batch(2, 6, 8, rng);
    Tape t;
    Gradients g = backward(t, hksl_loss(hier, t, batch).total);
    for (std::size_t l = 0; l < 2; ++l)
        for (const auto& p : hier.momentum_params(l)) EXPECT_TRUE(no_gradient(g, p.tensor)) << p.name;
    bool any = false;
    for (const auto& p : hier.encoder_params(0)) any = any || !no_gradient(g, p.tensor);
    EXPECT_TRUE(any);
}

TEST(HkslLoss, FineLossReachesCoarseLevelOnlyThroughCommunication) {
    for (bool no_c : {false, true}) {
        Rng rng(11);
        HierarchyConfig c = two_level();
        c.no_c = no_c;
        Hierarchy hier(small_model(), c, rng);
        auto batch = random_batch(2, 6, 8, rng);
        Tape t;
        Gradients g = backward(t, hksl_loss(hier, t, batch, {true, false}).total);
        bool reached = false;
        for (const auto& p : params_of(hier.level(1).forward)) reached = reached || !no_gradient(g, p.tensor);
        EXPECT_EQ(reached, !no_c);
        for (const auto& p : params_of(hier.level(1).projection)) EXPECT_TRUE(no_gradient(g, p.tensor));
    }
}

TEST(HkslLoss, MiniatureHierarchyMatchesFiniteDifferences) {
    Rng rng(12);
    HierarchyConfig c = two_level(3);
    Hierarchy hier(small_model(), c, rng);
    auto batch = random_batch(2, 3, 8, rng);
    const auto params = tensors_of(hier.trainable_params());
    const double err = finite_diff_check([&](Tape& t) { return hksl_loss(hier, t, batch).total; }, params, 1e-6);
    EXPECT_LT(err, 1e-4);
}
