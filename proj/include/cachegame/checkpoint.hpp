#pragma once

// Policy checkpoints as a single JSON document: format tag and version, the
// environment and training configuration, the flat parameter vector and the
// rollout RNG state.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cachegame/config.hpp"
#include "cachegame/policy.hpp"
#include "cachegame/ppo.hpp"

namespace cachegame {

inline constexpr const char* kCheckpointFormat = "cachegame-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ExperimentConfig config;
  std::vector<float> params;
  std::size_t env_steps = 0;
  std::size_t updates = 0;
  std::string rng_state;

  /// Rebuilds the policy; throws ContractError when the parameter count does
  /// not fit the configured architecture.
  PolicyNet<float> policy() const {
    auto net = make_policy<float>(config.env, config.train.policy, 0);
    if (net.num_params() != params.size())
      throw ContractError("checkpoint holds " + std::to_string(params.size()) + " parameters, architecture needs " +
                          std::to_string(net.num_params()));
    net.set_params(std::span<const float>(params));
    return net;
  }
};

inline Checkpoint make_checkpoint(const ExperimentConfig& config, const TrainResult& r) {
  Checkpoint c;
  c.config = config;
  c.params.assign(r.policy.params().begin(), r.policy.params().end());
  c.env_steps = r.env_steps;
  c.updates = r.updates;
  c.rng_state = r.rng_state;
  return c;
}

inline Json to_json(const Checkpoint& c) {
  return {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"config", to_json(c.config)},
          {"env_steps", c.env_steps},    {"updates", c.updates},          {"rng_state", c.rng_state},
          {"params", c.params}};
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json(c).dump() << '\n';
  if (!out) throw std::runtime_error("failed to write checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
    throw std::runtime_error(path.string() + " is not a cachegame checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version in " + path.string());
  Checkpoint c;
  c.config = experiment_from_json(j.at("config"));
  c.params = j.at("params").get<std::vector<float>>();
  c.env_steps = j.at("env_steps").get<std::size_t>();
  c.updates = j.at("updates").get<std::size_t>();
  c.rng_state = j.at("rng_state").get<std::string>();
  return c;
}

} // namespace cachegame
