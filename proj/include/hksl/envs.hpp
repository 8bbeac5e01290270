#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hksl/checkpoint.hpp"
#include "hksl/rng.hpp"
#include "hksl/tensor.hpp"

namespace hksl {

// Frozen physics constants. Both tasks share the same point-mass integrator.
struct PhysicsConstants {
    double dt = 0.05;
    double tether_k = 8.0;       // spring stiffness of the tether, active only when stretched
    double tether_length = 0.5;  // slack length of the tether
    double damping = 0.9;        // per-sub-step velocity retention
    double cup_mass = 1.0;
    double ball_mass = 0.5;
    double force_scale = 2.0;
    double catch_radius = 0.1;
    double target_radius = 0.1;
    double target_min_dist = 0.3;  // point-reacher target placement annulus
    double target_max_dist = 0.8;
};

enum class Task { TwoTimescaleCatch, PointReacher };
enum class Distractor { None, Color, Camera };
enum class Difficulty { Easy, Medium };

inline std::string to_string(Task t) { return t == Task::TwoTimescaleCatch ? "two-timescale-catch" : "point-reacher"; }
inline std::string to_string(Distractor d) {
    switch (d) {
        case Distractor::None: return "none";
        case Distractor::Color: return "color";
        case Distractor::Camera: return "camera";
    }
    return "?";
}
inline std::string to_string(Difficulty d) { return d == Difficulty::Easy ? "easy" : "medium"; }

inline Task parse_task(const std::string& s) {
    if (s == "two-timescale-catch") return Task::TwoTimescaleCatch;
    if (s == "point-reacher") return Task::PointReacher;
    throw std::invalid_argument("unknown task '" + s + "'");
}
inline Distractor parse_distractor(const std::string& s) {
    if (s == "none") return Distractor::None;
    if (s == "color") return Distractor::Color;
    if (s == "camera") return Distractor::Camera;
    throw std::invalid_argument("unknown distractor kind '" + s + "'");
}
inline Difficulty parse_difficulty(const std::string& s) {
    if (s == "easy") return Difficulty::Easy;
    if (s == "medium") return Difficulty::Medium;
    throw std::invalid_argument("unknown difficulty '" + s + "'");
}

struct EnvConfig {
    Task task = Task::TwoTimescaleCatch;
    Distractor distractor = Distractor::None;
    Difficulty difficulty = Difficulty::Easy;
    int action_repeat = 4;
    int episode_length = 125;  // agent steps
    std::size_t grid = 24;
    std::uint64_t distractor_seed = 0;
    PhysicsConstants physics{};

    void validate() const {
        if (action_repeat < 1) throw std::invalid_argument("action_repeat must be >= 1");
        if (episode_length < 1) throw std::invalid_argument("episode_length must be >= 1");
        if (grid < 8) throw std::invalid_argument("grid must be >= 8 pixels");
    }

    /// Largest possible raw episode return: one unit per simulator sub-step.
    double max_return() const { return static_cast<double>(episode_length) * action_repeat; }
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

struct EnvState {
    Vec2 cup_pos, cup_vel;
    Vec2 ball_pos, ball_vel;
    int step = 0;
};

struct GroundTruth {
    Vec2 ball;
    Vec2 cup;
};

inline GroundTruth ground_truth(const EnvState& s) { return {s.ball_pos, s.cup_pos}; }

/// One rendered RGB frame, channels-last, stored as 8-bit levels (intensity = level / 255).
struct Frame {
    std::size_t grid = 0;
    std::vector<std::uint8_t> pixels;

    Frame() = default;
    explicit Frame(std::size_t g) : grid(g), pixels(g * g * 3, 0) {}
    std::uint8_t& at(std::size_t row, std::size_t col, std::size_t ch) { return pixels[(row * grid + col) * 3 + ch]; }
    std::uint8_t at(std::size_t row, std::size_t col, std::size_t ch) const {
        return pixels[(row * grid + col) * 3 + ch];
    }
    double intensity(std::size_t i) const { return pixels[i] / 255.0; }
    bool operator==(const Frame&) const = default;
};

inline constexpr std::size_t kFrameStack = 3;

/// Stack of the most recent frames, oldest first.
struct Observation {
    std::array<Frame, kFrameStack> frames;

    std::size_t grid() const { return frames[0].grid; }
    void push(Frame f) {
        std::rotate(frames.begin(), frames.begin() + 1, frames.end());
        frames.back() = std::move(f);
    }
    static Observation repeated(const Frame& f) {
        Observation o;
        o.frames.fill(f);
        return o;
    }
    /// [G, G, 3 * stack] with channel index = frame * 3 + rgb.
    Tensor to_tensor() const {
        const std::size_t g = grid();
        Tensor t({g, g, 3 * kFrameStack});
        write_into(t.ptr());
        return t;
    }
    void write_into(double* dst) const {
        const std::size_t g = grid();
        for (std::size_t p = 0; p < g * g; ++p)
            for (std::size_t f = 0; f < kFrameStack; ++f)
                for (std::size_t c = 0; c < 3; ++c) dst[p * 9 + f * 3 + c] = frames[f].pixels[p * 3 + c] / 255.0;
    }
    bool operator==(const Observation&) const = default;
};

namespace render_detail {

inline constexpr std::array<std::uint8_t, 3> kCupColor{255, 64, 64};
inline constexpr std::array<std::uint8_t, 3> kBallColor{64, 255, 64};

inline long to_pixel(double world, std::size_t grid, bool flip) {
    const double u = flip ? (1.0 - world) * 0.5 : (world + 1.0) * 0.5;
    long p = static_cast<long>(std::floor(u * static_cast<double>(grid)));
    return std::clamp<long>(p, 0, static_cast<long>(grid) - 1);
}

inline void paint(Frame& f, long row, long col, const std::array<std::uint8_t, 3>& color) {
    if (row < 0 || col < 0 || row >= static_cast<long>(f.grid) || col >= static_cast<long>(f.grid)) return;
    for (std::size_t c = 0; c < 3; ++c) f.at(static_cast<std::size_t>(row), static_cast<std::size_t>(col), c) = color[c];
}

}  // namespace render_detail

/// Cup as a 3-pixel bracket, ball as a 2x2 disc, no anti-aliasing.
inline Frame render(const EnvState& s, std::size_t grid) {
    using namespace render_detail;
    Frame f(grid);
    const long br = to_pixel(s.ball_pos.y, grid, true), bc = to_pixel(s.ball_pos.x, grid, false);
    paint(f, br, bc, kBallColor);
    paint(f, br, bc + 1, kBallColor);
    paint(f, br + 1, bc, kBallColor);
    paint(f, br + 1, bc + 1, kBallColor);
    const long cr = to_pixel(s.cup_pos.y, grid, true), cc = to_pixel(s.cup_pos.x, grid, false);
    paint(f, cr, cc - 1, kCupColor);
    paint(f, cr + 1, cc, kCupColor);
    paint(f, cr, cc + 1, kCupColor);
    return f;
}

struct DistractorMagnitude {
    double color;      // max per-channel offset, intensity units
    int camera_shift;  // max viewport translation, pixels
};

inline DistractorMagnitude distractor_magnitude(Difficulty d) {
    return d == Difficulty::Easy ? DistractorMagnitude{0.1, 1} : DistractorMagnitude{0.3, 3};
}

/// Viewport translation by (dx, dy) pixels; vacated pixels replicate the nearest edge.
inline Frame translate_frame(const Frame& in, int dx, int dy) {
    Frame out(in.grid);
    const long g = static_cast<long>(in.grid);
    for (long r = 0; r < g; ++r)
        for (long c = 0; c < g; ++c) {
            const long sr = std::clamp<long>(r - dy, 0, g - 1);
            const long sc = std::clamp<long>(c - dx, 0, g - 1);
            for (std::size_t ch = 0; ch < 3; ++ch)
                out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch) =
                    in.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc), ch);
        }
    return out;
}

/// Color: one offset per channel applied to every non-background pixel. Camera: random translation.
/// Offsets are truncated onto the 8-bit grid so the bound holds exactly.
inline Frame apply_distractor(const Frame& frame, Distractor kind, Difficulty difficulty, Rng& rng) {
    const auto mag = distractor_magnitude(difficulty);
    switch (kind) {
        case Distractor::None: return frame;
        case Distractor::Color: {
            std::array<int, 3> off{};
            for (auto& o : off) o = static_cast<int>(std::trunc(uniform(rng, -mag.color, mag.color) * 255.0));
            Frame out = frame;
            const std::size_t px = frame.grid * frame.grid;
            for (std::size_t p = 0; p < px; ++p) {
                const bool body = frame.pixels[p * 3] || frame.pixels[p * 3 + 1] || frame.pixels[p * 3 + 2];
                if (!body) continue;
                for (std::size_t c = 0; c < 3; ++c)
                    out.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::clamp(frame.pixels[p * 3 + c] + off[c], 0, 255));
            }
            return out;
        }
        case Distractor::Camera: {
            std::uniform_int_distribution<int> shift(-mag.camera_shift, mag.camera_shift);
            const int dx = shift(rng);
            const int dy = shift(rng);
            return translate_frame(frame, dx, dy);
        }
    }
    throw std::invalid_argument("unknown distractor kind");
}

struct StepResult {
    Observation observation;
    double reward = 0.0;
    bool done = false;
};

inline constexpr std::size_t kActionDim = 2;

/// Pixel POMDP with a directly-actuated cup (fast factor) and a tethered ball (slow factor).
/// For point-reacher the "ball" is a static target.
class Env {
  public:
    explicit Env(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const EnvConfig& config() const { return cfg_; }
    const EnvState& state() const { return state_; }
    std::size_t action_dim() const { return kActionDim; }
    bool done() const { return state_.step >= cfg_.episode_length; }
    const Observation& observation() const { return obs_; }

    Observation reset(std::uint64_t seed) {
        Rng init = make_rng(seed, "env-init");
        distractor_rng_ = make_rng(seed ^ mix64(cfg_.distractor_seed), "env-distractor");
        state_ = EnvState{};
        const double theta = uniform(init, 0.0, 2.0 * std::numbers::pi);
        if (cfg_.task == Task::TwoTimescaleCatch) {
            state_.ball_pos = {cfg_.physics.tether_length * std::cos(theta), cfg_.physics.tether_length * std::sin(theta)};
        } else {
            const double r = uniform(init, cfg_.physics.target_min_dist, cfg_.physics.target_max_dist);
            state_.ball_pos = {r * std::cos(theta), r * std::sin(theta)};
        }
        obs_ = Observation::repeated(current_frame());
        return obs_;
    }

    StepResult step(std::span<const double> action) {
        if (action.size() != kActionDim)
            throw std::invalid_argument("action must have " + std::to_string(kActionDim) + " components");
        for (double a : action)
            if (!(a >= -1.0 && a <= 1.0)) throw std::invalid_argument("action component outside [-1, 1]");
        if (done()) throw std::logic_error("step called on a finished episode; call reset first");
        double reward = 0.0;
        for (int i = 0; i < cfg_.action_repeat; ++i) {
            substep(action);
            reward += in_reward_zone() ? 1.0 : 0.0;
        }
        ++state_.step;
        obs_.push(current_frame());
        return {obs_, reward, done()};
    }

    /// Test hook: place the ball at rest at `pos`.
    void teleport_ball(Vec2 pos) {
        state_.ball_pos = clamp_arena(pos);
        state_.ball_vel = {};
    }

    bool in_reward_zone() const {
        const double dx = state_.ball_pos.x - state_.cup_pos.x, dy = state_.ball_pos.y - state_.cup_pos.y;
        const double r = cfg_.task == Task::TwoTimescaleCatch ? cfg_.physics.catch_radius : cfg_.physics.target_radius;
        return std::hypot(dx, dy) < r;
    }

  private:
    static Vec2 clamp_arena(Vec2 p) { return {std::clamp(p.x, -1.0, 1.0), std::clamp(p.y, -1.0, 1.0)}; }

    static void integrate(Vec2& pos, Vec2& vel, Vec2 force, double mass, const PhysicsConstants& pc) {
        vel.x = (vel.x + pc.dt * force.x / mass) * pc.damping;
        vel.y = (vel.y + pc.dt * force.y / mass) * pc.damping;
        pos.x += pc.dt * vel.x;
        pos.y += pc.dt * vel.y;
        for (auto [p, v] : {std::pair{&pos.x, &vel.x}, std::pair{&pos.y, &vel.y}}) {
            if (*p > 1.0 || *p < -1.0) {
                *p = std::clamp(*p, -1.0, 1.0);
                *v = 0.0;
            }
        }
    }

    void substep(std::span<const double> action) {
        const auto& pc = cfg_.physics;
        Vec2 f_cup{pc.force_scale * action[0], pc.force_scale * action[1]};
        if (cfg_.task == Task::TwoTimescaleCatch) {
            const double dx = state_.ball_pos.x - state_.cup_pos.x, dy = state_.ball_pos.y - state_.cup_pos.y;
            const double dist = std::hypot(dx, dy);
            Vec2 f_ball{};
            if (dist > pc.tether_length) {
                const double tension = pc.tether_k * (dist - pc.tether_length);
                const Vec2 dir{dx / dist, dy / dist};
                f_cup.x += tension * dir.x;
                f_cup.y += tension * dir.y;
                f_ball = {-tension * dir.x, -tension * dir.y};
            }
            integrate(state_.cup_pos, state_.cup_vel, f_cup, pc.cup_mass, pc);
            integrate(state_.ball_pos, state_.ball_vel, f_ball, pc.ball_mass, pc);
        } else {
            integrate(state_.cup_pos, state_.cup_vel, f_cup, pc.cup_mass, pc);
        }
    }

    Frame current_frame() {
        return apply_distractor(render(state_, cfg_.grid), cfg_.distractor, cfg_.difficulty, distractor_rng_);
    }

    EnvConfig cfg_;
    EnvState state_{};
    Observation obs_{};
    Rng distractor_rng_{0};
};

// ---------------------------------------------------------------------------
// Episode log: JSON lines. Line 1 is a header
//   {"grid": G, "action_dim": A, "task": "...", "seed": S}
// followed by one line per recorded step t = 0..T:
//   {"t": t, "frame": [G*G*3 levels 0..255], "action": [..] | null, "reward": r,
//    "ball": [x, y], "cup": [x, y]}
// where "frame" is the newest rendered frame after the step (t = 0 is the reset frame, with
// null action and zero reward).

struct EpisodeStep {
    Frame frame;
    std::vector<double> action;  // empty at t = 0
    double reward = 0.0;
    GroundTruth truth;
};

struct EpisodeLog {
    std::size_t grid = 0;
    std::string task;
    std::uint64_t seed = 0;
    std::vector<EpisodeStep> steps;

    /// Frame stack as seen before action t (1-based), i.e. ending at frame t-1.
    Observation observation(std::size_t t) const {
        Observation o;
        for (std::size_t f = 0; f < kFrameStack; ++f) {
            const long idx = static_cast<long>(t) - 1 - static_cast<long>(kFrameStack - 1 - f);
            o.frames[f] = steps[static_cast<std::size_t>(std::max<long>(idx, 0))].frame;
        }
        return o;
    }
};

inline std::string encode_episode_log(const EpisodeLog& log) {
    using nlohmann::json;
    std::string out = json{{"grid", log.grid}, {"action_dim", kActionDim}, {"task", log.task}, {"seed", log.seed}}.dump();
    out += '\n';
    for (std::size_t t = 0; t < log.steps.size(); ++t) {
        const auto& s = log.steps[t];
        json line{{"t", t},
                  {"frame", s.frame.pixels},
                  {"action", s.action.empty() ? json(nullptr) : json(s.action)},
                  {"reward", s.reward},
                  {"ball", {s.truth.ball.x, s.truth.ball.y}},
                  {"cup", {s.truth.cup.x, s.truth.cup.y}}};
        out += line.dump();
        out += '\n';
    }
    return out;
}

inline EpisodeLog decode_episode_log(const std::string& text) {
    using nlohmann::json;
    EpisodeLog log;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        json j = json::parse(line);
        if (header) {
            log.grid = j.at("grid").get<std::size_t>();
            log.task = j.at("task").get<std::string>();
            log.seed = j.at("seed").get<std::uint64_t>();
            header = false;
            continue;
        }
        EpisodeStep s;
        s.frame.grid = log.grid;
        s.frame.pixels = j.at("frame").get<std::vector<std::uint8_t>>();
        if (s.frame.pixels.size() != log.grid * log.grid * 3) throw std::runtime_error("episode log: bad frame size");
        if (!j.at("action").is_null()) s.action = j.at("action").get<std::vector<double>>();
        s.reward = j.at("reward").get<double>();
        s.truth.ball = {j.at("ball")[0].get<double>(), j.at("ball")[1].get<double>()};
        s.truth.cup = {j.at("cup")[0].get<double>(), j.at("cup")[1].get<double>()};
        log.steps.push_back(std::move(s));
    }
    if (header) throw std::runtime_error("episode log: missing header");
    return log;
}

inline void save_episode_log(const std::filesystem::path& path, const EpisodeLog& log) {
    write_file_atomic(path, encode_episode_log(log));
}
inline EpisodeLog load_episode_log(const std::filesystem::path& path) { return decode_episode_log(read_file(path)); }

/// Runs one episode with actions drawn uniformly from [-1, 1]^A and records everything.
inline EpisodeLog record_random_episode(const EnvConfig& cfg, std::uint64_t seed) {
    Env env(cfg);
    Rng act_rng = make_rng(seed, "random-policy");
    EpisodeLog log{cfg.grid, to_string(cfg.task), seed, {}};
    env.reset(seed);
    log.steps.push_back({env.observation().frames.back(), {}, 0.0, ground_truth(env.state())});
    while (!env.done()) {
        std::vector<double> a(kActionDim);
        for (double& v : a) v = uniform(act_rng, -1.0, 1.0);
        auto r = env.step(a);
        log.steps.push_back({r.observation.frames.back(), a, r.reward, ground_truth(env.state())});
    }
    return log;
}

}  // namespace hksl
