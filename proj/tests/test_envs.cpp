#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "hksl/envs.hpp"

using namespace hksl;

namespace {

std::vector<double> random_action(Rng& rng) { return {uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)}; }

double max_deviation(const Frame& a, const Frame& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.intensity(i) - b.intensity(i)));
    return m;
}

}  // namespace

TEST(EnvReset, SameSeedIsBitIdentical) {
    for (Distractor d : {Distractor::None, Distractor::Color, Distractor::Camera}) {
        EnvConfig cfg;
        cfg.distractor = d;
        Env a(cfg), b(cfg);
        EXPECT_EQ(a.reset(7), b.reset(7));
        Rng r1(1), r2(1);
        for (int i = 0; i < 20; ++i) {
            auto sa = a.step(random_action(r1));
            auto sb = b.step(random_action(r2));
            EXPECT_EQ(sa.observation, sb.observation);
            EXPECT_EQ(sa.reward, sb.reward);
        }
    }
}

TEST(EnvReset, DistractorSeedIrrelevantWithoutDistractor) {
    EnvConfig c1, c2;
    c2.distractor_seed = 99;
    Env a(c1), b(c2);
    EXPECT_EQ(a.reset(3), b.reset(3));
}

TEST(EnvReset, FrameStackOfThreeRepeatedFrames) {
    Env env(EnvConfig{});
    Observation o = env.reset(1);
    EXPECT_EQ(o.frames.size(), 3u);
    EXPECT_EQ(o.frames[0], o.frames[1]);
    EXPECT_EQ(o.frames[1], o.frames[2]);
    EXPECT_EQ(o.to_tensor().shape(), (Shape{24, 24, 9}));
    EXPECT_EQ(env.state().step, 0);
}

TEST(EnvReset, InitialDistribution) {
    EnvConfig cfg;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Env env(cfg);
        env.reset(s);
        const GroundTruth g = ground_truth(env.state());
        EXPECT_EQ(g.cup.x, 0.0);
        EXPECT_EQ(g.cup.y, 0.0);
        EXPECT_NEAR(std::hypot(g.ball.x, g.ball.y), cfg.physics.tether_length, 1e-12);
    }
}

TEST(EnvStep, BallInCatchRadiusGivesFullRepeatReward) {
    Env env(EnvConfig{});
    env.reset(1);
    env.teleport_ball({0.05, 0.0});
    const std::vector<double> zero{0.0, 0.0};
    EXPECT_EQ(env.step(zero).reward, 4.0);
}

TEST(EnvStep, ZeroActionFromRestApartGivesZero) {
    Env env(EnvConfig{});
    env.reset(1);
    const std::vector<double> zero{0.0, 0.0};
    EXPECT_EQ(env.step(zero).reward, 0.0);
}

TEST(EnvStep, RejectsBadActionsAndFinishedEpisodes) {
    EnvConfig cfg;
    cfg.episode_length = 2;
    Env env(cfg);
    env.reset(1);
    EXPECT_THROW(env.step(std::vector<double>{1.5, 0.0}), std::invalid_argument);
    EXPECT_THROW(env.step(std::vector<double>{0.0}), std::invalid_argument);
    const std::vector<double> zero{0.0, 0.0};
    env.step(zero);
    EXPECT_TRUE(env.step(zero).done);
    EXPECT_THROW(env.step(zero), std::logic_error);
}

TEST(EnvStep, RewardBoundsAndArenaClamp) {
    EnvConfig cfg;
    Env env(cfg);
    Rng rng(5);
    for (std::uint64_t e = 0; e < 5; ++e) {
        env.reset(e);
        double ret = 0.0;
        while (!env.done()) {
            auto r = env.step(random_action(rng));
            EXPECT_GE(r.reward, 0.0);
            EXPECT_LE(r.reward, cfg.action_repeat);
            ret += r.reward;
            const GroundTruth g = ground_truth(env.state());
            for (double v : {g.ball.x, g.ball.y, g.cup.x, g.cup.y}) {
                EXPECT_GE(v, -1.0);
                EXPECT_LE(v, 1.0);
            }
        }
        EXPECT_LE(ret, cfg.max_return());
    }
}

TEST(EnvStep, CupRespondsWithinOneSubstepBallDoesNot) {
    EnvConfig cfg;
    cfg.action_repeat = 1;
    Env env(cfg);
    env.reset(2);
    const EnvState before = env.state();
    env.step(std::vector<double>{1.0, -1.0});
    const EnvState after = env.state();
    const double dcup = std::hypot(after.cup_pos.x - before.cup_pos.x, after.cup_pos.y - before.cup_pos.y);
    const double dball = std::hypot(after.ball_pos.x - before.ball_pos.x, after.ball_pos.y - before.ball_pos.y);
    // Semi-implicit Euler: |dx_cup| = dt^2 * F / m * damping; the ball sits on the slack circle.
    const auto& pc = cfg.physics;
    EXPECT_NEAR(dcup, pc.dt * pc.dt * pc.force_scale * std::sqrt(2.0) / pc.cup_mass * pc.damping, 1e-12);
    EXPECT_GT(dcup, 100.0 * dball);
}

TEST(EnvStep, FastSlowSeparationFromResetStates) {
    EnvConfig cfg;
    Rng rng(8);
    double cup = 0.0, ball = 0.0;
    const int trials = 500;
    for (int i = 0; i < trials; ++i) {
        Env env(cfg);
        env.reset(static_cast<std::uint64_t>(i));
        const EnvState s0 = env.state();
        env.step(random_action(rng));
        const EnvState s1 = env.state();
        cup += std::hypot(s1.cup_pos.x - s0.cup_pos.x, s1.cup_pos.y - s0.cup_pos.y);
        ball += std::hypot(s1.ball_pos.x - s0.ball_pos.x, s1.ball_pos.y - s0.ball_pos.y);
    }
    EXPECT_GT(cup / trials, 5.0 * ball / trials);
}

TEST(EnvGroundTruth, DistractorsChangePixelsOnly) {
    Rng act(3);
    std::vector<std::vector<double>> actions;
    for (int i = 0; i < 40; ++i) actions.push_back(random_action(act));
    EnvConfig clean;
    Env a(clean);
    a.reset(4);
    for (Distractor d : {Distractor::Color, Distractor::Camera})
        for (Difficulty diff : {Difficulty::Easy, Difficulty::Medium}) {
            EnvConfig cfg;
            cfg.distractor = d;
            cfg.difficulty = diff;
            Env b(cfg);
            a.reset(4);
            b.reset(4);
            for (const auto& u : actions) {
                auto ra = a.step(u);
                auto rb = b.step(u);
                EXPECT_EQ(ra.reward, rb.reward);
                EXPECT_EQ(ra.done, rb.done);
                EXPECT_EQ(a.state().ball_pos.x, b.state().ball_pos.x);
                EXPECT_EQ(a.state().cup_pos.y, b.state().cup_pos.y);
            }
        }
}

// ---------------------------------------------------------------------------

TEST(Distractor, NoneIsIdentity) {
    Env env(EnvConfig{});
    Frame f = env.reset(1).frames.back();
    Rng rng(1);
    EXPECT_EQ(apply_distractor(f, Distractor::None, Difficulty::Medium, rng), f);
}

TEST(Distractor, ColorDeviationBounded) {
    Env env(EnvConfig{});
    Rng act(2), rng(3);
    env.reset(1);
    for (int i = 0; i < 50; ++i) {
        const Frame f = env.step(random_action(act)).observation.frames.back();
        EXPECT_LE(max_deviation(apply_distractor(f, Distractor::Color, Difficulty::Easy, rng), f), 0.1);
        EXPECT_LE(max_deviation(apply_distractor(f, Distractor::Color, Difficulty::Medium, rng), f), 0.3);
    }
}

TEST(Distractor, CameraTranslationShiftsColumns) {
    Frame f(8);
    for (std::size_t i = 0; i < f.pixels.size(); ++i) f.pixels[i] = static_cast<std::uint8_t>(i % 251);
    const Frame out = translate_frame(f, 1, 0);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 1; c < 8; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(out.at(r, c, ch), f.at(r, c - 1, ch));
        for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(out.at(r, 0, ch), f.at(r, 0, ch));
    }
}

TEST(Distractor, CameraShiftWithinDifficulty) {
    Frame f(10);
    f.at(5, 5, 0) = 200;
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const Frame out = apply_distractor(f, Distractor::Camera, Difficulty::Easy, rng);
        std::size_t hits = 0;
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 10; ++c)
                if (out.at(r, c, 0) == 200) {
                    ++hits;
                    EXPECT_LE(std::abs(static_cast<int>(r) - 5), 1);
                    EXPECT_LE(std::abs(static_cast<int>(c) - 5), 1);
                }
        EXPECT_EQ(hits, 1u);
    }
}

TEST(Render, BodiesUseDistinctColorsAndStayInFrame) {
    EnvState s;
    s.ball_pos = {0.5, 0.5};
    const Frame f = render(s, 24);
    std::size_t red = 0, green = 0;
    for (std::size_t p = 0; p < 24 * 24; ++p) {
        red += f.pixels[p * 3] == 255;
        green += f.pixels[p * 3 + 1] == 255;
    }
    EXPECT_EQ(red, 3u);
    EXPECT_EQ(green, 4u);
}

TEST(EpisodeLog, RoundTripsThroughText) {
    EnvConfig cfg;
    cfg.episode_length = 12;
    const EpisodeLog log = record_random_episode(cfg, 5);
    ASSERT_EQ(log.steps.size(), 13u);
    const EpisodeLog back = decode_episode_log(encode_episode_log(log));
    ASSERT_EQ(back.steps.size(), log.steps.size());
    for (std::size_t t = 0; t < log.steps.size(); ++t) {
        EXPECT_EQ(back.steps[t].frame, log.steps[t].frame);
        EXPECT_EQ(back.steps[t].action, log.steps[t].action);
        EXPECT_EQ(back.steps[t].truth.ball.x, log.steps[t].truth.ball.x);
    }
    EXPECT_EQ(back.observation(5), log.observation(5));
}
