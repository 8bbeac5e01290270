#include <gtest/gtest.h>

#include "hksl/trainer.hpp"
#include "support.hpp"

using namespace hksl;
using namespace hksl::testing;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.env.grid = 12;
    c.env.episode_length = 10;
    c.model = small_model(12);
    c.hierarchy.k = 3;
    c.total_steps = 30;
    c.eval_period = 15;
    c.eval_episodes = 2;
    c.init_steps = 15;
    c.batch_size = 4;
    c.image_pad = 2;
    return c;
}

std::vector<NamedTensor> snapshot_of(Agent& a) { return snapshot(a.all_params()); }

}  // namespace

TEST(Augment, PadZeroIsIdentity) {
    Rng rng(1);
    std::vector<Tensor> obs{random_tensor({2, 8, 8, 9}, rng), random_tensor({2, 8, 8, 9}, rng)};
    const auto before = obs;
    augment(obs, 0, rng);
    EXPECT_EQ(obs, before);
}

TEST(Augment, CentreOffsetIsIdentityAndShapeIsKept) {
    Rng rng(2);
    std::vector<Tensor> obs{random_tensor({3, 8, 8, 9}, rng)};
    const auto before = obs;
    augment_with_offsets(obs, 4, {{4, 4}, {4, 4}, {4, 4}});
    EXPECT_EQ(obs, before);
    augment(obs, 4, rng);
    EXPECT_EQ(obs[0].shape(), before[0].shape());
    EXPECT_THROW(augment(obs, 8, rng), std::invalid_argument);
}

TEST(Augment, OneCropPerTrajectoryRow) {
    Rng rng(3);
    Tensor frame = random_tensor({1, 8, 8, 9}, rng);
    Tensor two({2, 8, 8, 9});
    std::copy_n(frame.ptr(), frame.size(), two.ptr());
    std::copy_n(frame.ptr(), frame.size(), two.ptr() + frame.size());
    std::vector<Tensor> obs{two, two, two};
    augment(obs, 3, rng);
    EXPECT_EQ(obs[0], obs[1]);
    EXPECT_EQ(obs[1], obs[2]);
    // Offset (0, 0): pixel (r, c) reads the replicate-padded source at (r - pad, c - pad).
    std::vector<Tensor> shifted{frame};
    augment_with_offsets(shifted, 2, {{0, 0}});
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) {
            const std::size_t sr = r < 2 ? 0 : r - 2, sc = c < 2 ? 0 : c - 2;
            EXPECT_EQ(shifted[0][(r * 8 + c) * 9 + 4], frame[(sr * 8 + sc) * 9 + 4]);
        }
}

// ---------------------------------------------------------------------------

TEST(TrainConfig, Validation) {
    TrainConfig c = tiny_config();
    EXPECT_NO_THROW(c.validate());
    c.eval_period = 7;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.hierarchy.no_c = true;
    c.ablation = Ablation::H1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.init_steps = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.model.grid = 24;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainConfig, AblationWiring) {
    TrainConfig c = tiny_config();
    c.ablation = Ablation::AllN1;
    EXPECT_TRUE(effective_hierarchy(c).all_n1);
    c.ablation = Ablation::NoC;
    EXPECT_TRUE(effective_hierarchy(c).no_c);
    c.ablation = Ablation::SharedEncoder;
    EXPECT_TRUE(effective_hierarchy(c).shared_encoder);
    c.ablation = Ablation::H1;
    const auto h1 = effective_hierarchy(c);
    EXPECT_EQ(h1.h, 1u);
    EXPECT_EQ(h1.n, std::vector<std::size_t>{1});
    c.ablation = Ablation::NoRepr;
    EXPECT_EQ(effective_hierarchy(c).h, 2u);
    for (Ablation a : all_ablations()) EXPECT_EQ(parse_ablation(to_string(a)), a);
    EXPECT_THROW(parse_ablation("none"), std::invalid_argument);
}

TEST(TrainRun, IdenticalSeedsAreBitIdentical) {
    const TrainConfig c = tiny_config();
    auto a = train_run(c, "h");
    auto b = train_run(c, "h");
    EXPECT_EQ(encode_run_record(a.record), encode_run_record(b.record));
    const auto sa = snapshot_of(*a.agent), sb = snapshot_of(*b.agent);
    ASSERT_EQ(sa.size(), sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i].value, sb[i].value) << sa[i].name;
    TrainConfig other = c;
    other.seed = 2;
    EXPECT_NE(snapshot_of(*train_run(other).agent)[0].value, sa[0].value);
}

TEST(TrainRun, UpdateCountsReplaySizeAndCheckpoints) {
    TrainConfig c = tiny_config();
    auto r = train_run(c);
    EXPECT_EQ(r.hksl_updates, 15);
    EXPECT_EQ(r.critic_updates, 15);
    EXPECT_EQ(r.replay_size, 30u);
    ASSERT_EQ(r.record.checkpoints.size(), 2u);
    EXPECT_EQ(r.record.checkpoints[0].step, 15);
    EXPECT_EQ(r.record.checkpoints[1].step, 30);
    for (const auto& cp : r.record.checkpoints) {
        EXPECT_GE(cp.mean_return, 0.0);
        EXPECT_LE(cp.mean_return, c.env.max_return());
    }
    // Eviction drops whole episodes, so a full buffer holds at most `capacity` transitions.
    c.replay_capacity = 25;
    EXPECT_EQ(train_run(c).replay_size, 20u);
}

TEST(TrainRun, NoReprFreezesForwardModels) {
    TrainConfig c = tiny_config();
    c.ablation = Ablation::NoRepr;
    Rng init = make_rng(c.seed, "init");
    Agent fresh(c.model, effective_hierarchy(c), c.sac, init);
    auto r = train_run(c);
    EXPECT_EQ(r.hksl_updates, 0);
    Hierarchy& trained = r.agent->hierarchy();
    for (std::size_t l = 0; l < 2; ++l) {
        auto before = params_of(fresh.hierarchy().level(l).forward);
        auto after = params_of(trained.level(l).forward);
        for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(*before[i].tensor, *after[i].tensor);
        auto pb = params_of(fresh.hierarchy().level(l).projection), pa = params_of(trained.level(l).projection);
        for (std::size_t i = 0; i < pb.size(); ++i) EXPECT_EQ(*pb[i].tensor, *pa[i].tensor);
    }
    EXPECT_NE(fresh.hierarchy().encoder(0).fc.weight, trained.encoder(0).fc.weight);
}

TEST(TrainRun, EveryAblationRuns) {
    for (Ablation a : all_ablations()) {
        TrainConfig c = tiny_config();
        c.ablation = a;
        c.total_steps = 20;
        c.eval_period = 20;
        auto r = train_run(c);
        EXPECT_EQ(r.record.ablation, to_string(a));
        EXPECT_EQ(r.record.checkpoints.size(), 1u);
    }
}

// ---------------------------------------------------------------------------

TEST(Evaluate, RepeatableBoundedAndSingleEpisodeMatchesRollout) {
    TrainConfig c = tiny_config();
    Rng rng(5);
    Agent agent(c.model, c.hierarchy, c.sac, rng);
    const double a = evaluate(agent, c.env, 3, 42), b = evaluate(agent, c.env, 3, 42);
    EXPECT_EQ(a, b);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, c.env.max_return());
    Env env(c.env);
    Observation obs = env.reset(derive_seed(42, "eval-episode", 0));
    double total = 0.0;
    Rng unused(0);
    while (!env.done()) {
        auto r = env.step(agent.act(obs, ActionMode::Deterministic, unused));
        total += r.reward;
        obs = r.observation;
    }
    EXPECT_EQ(evaluate(agent, c.env, 1, 42), total);
    const double rnd = evaluate_random(c.env, 5, 1);
    EXPECT_GE(rnd, 0.0);
    EXPECT_LE(rnd, c.env.max_return());
}

TEST(RunRecordFormat, RoundTripAndMonotoneSteps) {
    RunRecord r{"abc", "two-timescale-catch", "full", 3, 500.0, "x.ckpt", {{1000, 12.5}, {2000, 40.0}}};
    const RunRecord back = decode_run_record(encode_run_record(r));
    EXPECT_EQ(encode_run_record(back), encode_run_record(r));
    EXPECT_EQ(back.checkpoints, r.checkpoints);
    EXPECT_THROW(decode_run_record("{\"record\":\"hksl-run\",\"version\":1,\"config_hash\":\"a\",\"task\":\"t\","
                                   "\"ablation\":\"full\",\"seed\":1,\"max_return\":1,\"checkpoint\":\"\"}\n"
                                   "{\"step\":2,\"mean_return\":0}\n{\"step\":1,\"mean_return\":0}\n"),
                 std::runtime_error);
    EXPECT_THROW(decode_run_record(""), std::runtime_error);
}
