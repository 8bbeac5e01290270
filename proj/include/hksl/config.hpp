#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "hksl/checkpoint.hpp"
#include "hksl/trainer.hpp"

namespace hksl {

/// Raised for anything wrong with user-supplied configuration (exit code 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Config file schema (JSON). Every section and key is optional; omitted values take the defaults
// of TrainConfig. Unknown sections or keys are rejected.
//
//   env:       task, distractor, difficulty, action_repeat, episode_length, grid, distractor_seed
//   hierarchy: h, n, k, no_c, shared_encoder, all_n1
//   model:     conv_filters, conv_strides, feature_dim, comm_hidden, proj_hidden, mlp_hidden,
//              twin_q, log_std_min, log_std_max
//   sac:       gamma, lr, hksl_lr, init_alpha, critic_tau, encoder_tau, target_update_freq,
//              actor_update_freq
//   train:     total_steps, eval_period, eval_episodes, init_steps, batch_size, replay_capacity,
//              image_pad, seed, ablation

namespace detail {

using Setter = std::function<void(const nlohmann::json&)>;

template <class T>
Setter set(T& field) {
    return [&field](const nlohmann::json& v) { field = v.get<T>(); };
}

template <class T, class Parse>
Setter set_parsed(T& field, Parse parse) {
    return [&field, parse](const nlohmann::json& v) { field = parse(v.get<std::string>()); };
}

inline void apply_section(const nlohmann::json& obj, const std::string& section,
                          const std::map<std::string, Setter>& setters) {
    if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : obj.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
        try {
            it->second(value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + section + "." + key + "' has the wrong type: " + e.what());
        } catch (const std::invalid_argument& e) {
            throw ConfigError("config key '" + section + "." + key + "': " + e.what());
        }
    }
}

}  // namespace detail

/// Resolves a JSON document into a validated TrainConfig.
inline TrainConfig config_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    TrainConfig c;
    using detail::set;
    using detail::set_parsed;
    const std::map<std::string, std::map<std::string, detail::Setter>> schema{
        {"env",
         {{"task", set_parsed(c.env.task, parse_task)},
          {"distractor", set_parsed(c.env.distractor, parse_distractor)},
          {"difficulty", set_parsed(c.env.difficulty, parse_difficulty)},
          {"action_repeat", set(c.env.action_repeat)},
          {"episode_length", set(c.env.episode_length)},
          {"grid", set(c.env.grid)},
          {"distractor_seed", set(c.env.distractor_seed)}}},
        {"hierarchy",
         {{"h", set(c.hierarchy.h)},
          {"n", set(c.hierarchy.n)},
          {"k", set(c.hierarchy.k)},
          {"no_c", set(c.hierarchy.no_c)},
          {"shared_encoder", set(c.hierarchy.shared_encoder)},
          {"all_n1", set(c.hierarchy.all_n1)}}},
        {"model",
         {{"conv_filters", set(c.model.conv_filters)},
          {"conv_strides", set(c.model.conv_strides)},
          {"feature_dim", set(c.model.feature_dim)},
          {"comm_hidden", set(c.model.comm_hidden)},
          {"proj_hidden", set(c.model.proj_hidden)},
          {"mlp_hidden", set(c.model.mlp_hidden)},
          {"twin_q", set(c.model.twin_q)},
          {"log_std_min", set(c.model.log_std_min)},
          {"log_std_max", set(c.model.log_std_max)}}},
        {"sac",
         {{"gamma", set(c.sac.gamma)},
          {"lr", set(c.sac.lr)},
          {"hksl_lr", set(c.sac.hksl_lr)},
          {"init_alpha", set(c.sac.init_alpha)},
          {"critic_tau", set(c.sac.critic_tau)},
          {"encoder_tau", set(c.sac.encoder_tau)},
          {"target_update_freq", set(c.sac.target_update_freq)},
          {"actor_update_freq", set(c.sac.actor_update_freq)}}},
        {"train",
         {{"total_steps", set(c.total_steps)},
          {"eval_period", set(c.eval_period)},
          {"eval_episodes", set(c.eval_episodes)},
          {"init_steps", set(c.init_steps)},
          {"batch_size", set(c.batch_size)},
          {"replay_capacity", set(c.replay_capacity)},
          {"image_pad", set(c.image_pad)},
          {"seed", set(c.seed)},
          {"ablation", set_parsed(c.ablation, parse_ablation)}}},
    };
    for (const auto& [section, body] : doc.items()) {
        auto it = schema.find(section);
        if (it == schema.end()) throw ConfigError("unknown config key '" + section + "'");
        detail::apply_section(body, section, it->second);
    }
    c.model.grid = c.env.grid;
    if (c.model.conv_strides.empty()) throw ConfigError("model.conv_strides must not be empty");
    for (std::size_t s : c.model.conv_strides)
        if (s != 1 && s != 2) throw ConfigError("model.conv_strides entries must be 1 or 2");
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return c;
}

/// Fully resolved config as JSON; keys sorted, so dump() is canonical.
inline nlohmann::json config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["env"] = {{"task", to_string(c.env.task)},
                {"distractor", to_string(c.env.distractor)},
                {"difficulty", to_string(c.env.difficulty)},
                {"action_repeat", c.env.action_repeat},
                {"episode_length", c.env.episode_length},
                {"grid", c.env.grid},
                {"distractor_seed", c.env.distractor_seed}};
    j["hierarchy"] = {{"h", c.hierarchy.h},
                      {"n", c.hierarchy.n},
                      {"k", c.hierarchy.k},
                      {"no_c", c.hierarchy.no_c},
                      {"shared_encoder", c.hierarchy.shared_encoder},
                      {"all_n1", c.hierarchy.all_n1}};
    j["model"] = {{"conv_filters", c.model.conv_filters}, {"conv_strides", c.model.conv_strides},
                  {"feature_dim", c.model.feature_dim},   {"comm_hidden", c.model.comm_hidden},
                  {"proj_hidden", c.model.proj_hidden},   {"mlp_hidden", c.model.mlp_hidden},
                  {"twin_q", c.model.twin_q},             {"log_std_min", c.model.log_std_min},
                  {"log_std_max", c.model.log_std_max}};
    j["sac"] = {{"gamma", c.sac.gamma},
                {"lr", c.sac.lr},
                {"hksl_lr", c.sac.hksl_lr},
                {"init_alpha", c.sac.init_alpha},
                {"critic_tau", c.sac.critic_tau},
                {"encoder_tau", c.sac.encoder_tau},
                {"target_update_freq", c.sac.target_update_freq},
                {"actor_update_freq", c.sac.actor_update_freq}};
    j["train"] = {{"total_steps", c.total_steps},
                  {"eval_period", c.eval_period},
                  {"eval_episodes", c.eval_episodes},
                  {"init_steps", c.init_steps},
                  {"batch_size", c.batch_size},
                  {"replay_capacity", c.replay_capacity},
                  {"image_pad", c.image_pad},
                  {"seed", c.seed},
                  {"ablation", to_string(c.ablation)}};
    return j;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// 16 hex digits of FNV-1a over the canonical JSON of the resolved config.
inline std::string config_hash(const TrainConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config_to_json(c).dump())));
    return buf;
}

inline TrainConfig parse_config_text(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = text.find_first_not_of(" \t\r\n") == std::string::npos ? nlohmann::json::object()
                                                                      : nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(doc);
}

inline TrainConfig parse_config_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse_config_text(read_file(path));
}

}  // namespace hksl
