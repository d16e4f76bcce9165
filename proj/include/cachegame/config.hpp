#pragma once

// Experiment configuration: one JSON document describing the cache, the
// guessing game, the learner and the run. Every key is optional; unknown keys
// are rejected. `lines: N` is shorthand for a single-level direct-mapped cache
// of N lines with the matching address ranges and T = W = 2N + 4.
//
// Precedence: command-line overrides > file values > defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cachegame/cache.hpp"
#include "cachegame/env.hpp"
#include "cachegame/errors.hpp"
#include "cachegame/ppo.hpp"

namespace cachegame {

using Json = nlohmann::ordered_json;

enum class ConfigErrorCode : int { MissingFile = 1, Schema = 2, Invariant = 3 };

class ExperimentConfigError : public ConfigError {
public:
  ExperimentConfigError(ConfigErrorCode code, const std::string& what) : ConfigError(what), code_(code) {}
  ConfigErrorCode code() const { return code_; }

private:
  ConfigErrorCode code_;
};

/// Default training budget for a sweep entry of `lines` cache lines.
inline std::size_t default_sweep_steps(std::size_t lines) {
  if (lines <= 8) return 200'000;
  if (lines <= 16) return 500'000;
  return 1'000'000;
}

struct SweepConfig {
  std::vector<std::size_t> lines{8, 16, 24, 32, 40};
  /// Training budget per entry of `lines`; a single value applies to all.
  std::vector<std::size_t> train_steps{200'000, 500'000, 1'000'000, 1'000'000, 1'000'000};
};

struct ExperimentConfig {
  EnvConfig env;
  TrainConfig train;
  std::string agent = "rl";
  std::string out = "runs/default";
  std::uint64_t seed = 0;
  /// Greedy evaluation episodes for `eval`, and per cell in `sweep`.
  std::size_t eval_episodes = 1000;
  /// Episodes for `baseline` and the sweep's baseline columns.
  std::size_t baseline_episodes = 20'000;
  SweepConfig sweep;

  void validate() const {
    env.validate();
    train.validate();
    policy_config_for(env, train.policy).validate();
    if (agent != "rl" && agent != "random" && agent != "prime_probe" && agent != "flush_reload")
      throw ConfigError("agent must be one of rl, random, prime_probe, flush_reload");
    if (eval_episodes == 0 || baseline_episodes == 0) throw ConfigError("episode counts must be positive");
    if (sweep.lines.empty()) throw ConfigError("sweep.lines must not be empty");
    for (auto l : sweep.lines)
      if (l == 0) throw ConfigError("sweep.lines entries must be positive");
    if (sweep.train_steps.size() != 1 && sweep.train_steps.size() != sweep.lines.size())
      throw ConfigError("sweep.train_steps needs one value or one per sweep.lines entry");
  }

  std::size_t sweep_steps(std::size_t i) const {
    return sweep.train_steps.size() == 1 ? sweep.train_steps.front() : sweep.train_steps.at(i);
  }
};

/// Command-line values that take precedence over the file.
struct ConfigOverrides {
  std::optional<std::string> agent;
  std::optional<std::size_t> lines;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ExperimentConfigError(ConfigErrorCode::Schema, where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k))
      throw ExperimentConfigError(ConfigErrorCode::Schema,
                                  "unknown key '" + k + "'" + (where.empty() ? "" : " in " + where));
  }
}

/// Non-negative integer, whether parsed as unsigned or built from a signed literal.
inline bool is_count(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.at(key).is_boolean()) throw std::invalid_argument("expected a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!is_count(j.at(key))) throw std::invalid_argument("expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.at(key).is_number()) throw std::invalid_argument("expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.at(key).is_string()) throw std::invalid_argument("expected a string");
    }
    out = j.at(key).get<T>();
  } catch (const std::exception& e) {
    const std::string path = where.empty() ? std::string(key) : where + "." + key;
    throw ExperimentConfigError(ConfigErrorCode::Schema, "bad value for '" + path + "': " + e.what());
  }
}

inline AddressRange read_range(const Json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 2 || !is_count(j[0]) || !is_count(j[1]))
    throw ExperimentConfigError(ConfigErrorCode::Schema, what + " must be [first, count]");
  return AddressRange{j[0].get<Address>(), j[1].get<Address>()};
}

inline Json range_json(const AddressRange& r) { return Json::array({r.first, r.count}); }

} // namespace detail

inline Json to_json(const CacheGeometry& g) {
  Json levels = Json::array();
  for (const auto& l : g.levels)
    levels.push_back({{"sets", l.sets}, {"ways", l.associativity}, {"hit_latency", l.hit_latency}});
  return {{"levels", levels}, {"inclusive", g.inclusive}, {"policy", std::string(to_string(g.policy))}};
}

inline Json to_json(const DefenseConfig& d) {
  return {{"partition", d.partition}, {"attacker_share", d.attacker_share}, {"randomize", d.randomize}};
}

inline Json to_json(const RewardConfig& r) { return {{"correct", r.correct}, {"wrong", r.wrong}, {"step", r.step}}; }

inline Json to_json(const PolicyConfig& p) {
  return {{"width", p.width},   {"heads", p.heads}, {"depth", p.depth},
          {"ffn_dim", p.ffn_dim}, {"guess_logit_bias", p.guess_logit_bias}};
}

inline Json to_json(const TrainConfig& t) {
  Json j = {{"gamma", t.gamma},
            {"gae_lambda", t.gae_lambda},
            {"clip", t.clip},
            {"learning_rate", t.learning_rate},
            {"entropy_coef", t.entropy_coef},
            {"value_coef", t.value_coef},
            {"max_grad_norm", t.max_grad_norm},
            {"adam_eps", t.adam_eps},
            {"num_envs", t.num_envs},
            {"horizon", t.horizon},
            {"minibatch", t.minibatch},
            {"epochs", t.epochs},
            {"total_episodes", t.total_episodes},
            {"total_steps", t.total_steps},
            {"eval_interval", t.eval_interval},
            {"eval_episodes", t.eval_episodes},
            {"target_success", t.target_success},
            {"divergence_warmup", t.divergence_warmup},
            {"divergence_patience", t.divergence_patience}};
  const Json arch = to_json(t.policy);
  for (const auto& [k, v] : arch.items()) j[k] = v;
  return j;
}

/// Environment fields as they appear at the top level of an experiment file.
inline Json env_json(const EnvConfig& e) {
  return {{"cache", to_json(e.geometry)},
          {"defense", to_json(e.defense)},
          {"attacker_range", detail::range_json(e.attacker_range)},
          {"victim_range", detail::range_json(e.victim_range)},
          {"allow_empty", e.allow_empty},
          {"max_steps", e.max_steps},
          {"window", e.window},
          {"multi_guess", e.multi_guess},
          {"shared_addresses", e.shared_addresses},
          {"reward", to_json(e.reward)}};
}

/// Fully explicit form of a validated config. Parsing it yields the same
/// configuration.
inline Json to_json(const ExperimentConfig& c) {
  Json j = env_json(c.env);
  j["train"] = to_json(c.train);
  j["agent"] = c.agent;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["eval_episodes"] = c.eval_episodes;
  j["baseline_episodes"] = c.baseline_episodes;
  j["sweep"] = {{"lines", c.sweep.lines}, {"train_steps", c.sweep.train_steps}};
  return j;
}

inline TrainConfig train_from_json(const Json& j, TrainConfig t = {}) {
  const std::string w = "train";
  detail::check_keys(j,
                     {"gamma", "gae_lambda", "clip", "learning_rate", "entropy_coef", "value_coef", "max_grad_norm",
                      "adam_eps", "num_envs", "horizon", "minibatch", "epochs", "total_episodes", "total_steps",
                      "eval_interval", "eval_episodes", "target_success", "divergence_warmup", "divergence_patience",
                      "width", "heads", "depth", "ffn_dim", "guess_logit_bias"},
                     w);
  detail::read(j, "gamma", t.gamma, w);
  detail::read(j, "gae_lambda", t.gae_lambda, w);
  detail::read(j, "clip", t.clip, w);
  detail::read(j, "learning_rate", t.learning_rate, w);
  detail::read(j, "entropy_coef", t.entropy_coef, w);
  detail::read(j, "value_coef", t.value_coef, w);
  detail::read(j, "max_grad_norm", t.max_grad_norm, w);
  detail::read(j, "adam_eps", t.adam_eps, w);
  detail::read(j, "num_envs", t.num_envs, w);
  detail::read(j, "horizon", t.horizon, w);
  detail::read(j, "minibatch", t.minibatch, w);
  detail::read(j, "epochs", t.epochs, w);
  detail::read(j, "total_episodes", t.total_episodes, w);
  detail::read(j, "total_steps", t.total_steps, w);
  detail::read(j, "eval_interval", t.eval_interval, w);
  detail::read(j, "eval_episodes", t.eval_episodes, w);
  detail::read(j, "target_success", t.target_success, w);
  detail::read(j, "divergence_warmup", t.divergence_warmup, w);
  detail::read(j, "divergence_patience", t.divergence_patience, w);
  detail::read(j, "width", t.policy.width, w);
  detail::read(j, "heads", t.policy.heads, w);
  detail::read(j, "depth", t.policy.depth, w);
  detail::read(j, "ffn_dim", t.policy.ffn_dim, w);
  detail::read(j, "guess_logit_bias", t.policy.guess_logit_bias, w);
  return t;
}

inline CacheGeometry geometry_from_json(const Json& j) {
  detail::check_keys(j, {"levels", "inclusive", "policy"}, "cache");
  CacheGeometry g;
  g.levels.clear();
  if (!j.contains("levels") || !j.at("levels").is_array())
    throw ExperimentConfigError(ConfigErrorCode::Schema, "cache.levels must be an array");
  for (const auto& lj : j.at("levels")) {
    detail::check_keys(lj, {"sets", "ways", "hit_latency"}, "cache.levels[]");
    LevelGeometry l;
    l.hit_latency = static_cast<unsigned>(g.levels.size() + 1);
    detail::read(lj, "sets", l.sets, "cache.levels[]");
    detail::read(lj, "ways", l.associativity, "cache.levels[]");
    detail::read(lj, "hit_latency", l.hit_latency, "cache.levels[]");
    g.levels.push_back(l);
  }
  detail::read(j, "inclusive", g.inclusive, "cache");
  std::string policy = "lru";
  detail::read(j, "policy", policy, "cache");
  try {
    g.policy = parse_replacement_policy(policy);
  } catch (const ConfigError& e) {
    throw ExperimentConfigError(ConfigErrorCode::Schema, e.what());
  }
  return g;
}

/// Builds a validated ExperimentConfig from a parsed document.
inline ExperimentConfig experiment_from_json(Json j, const ConfigOverrides& ov = {}) {
  if (!j.is_object()) throw ExperimentConfigError(ConfigErrorCode::Schema, "config must be a JSON object");
  if (ov.lines) {
    j.erase("cache");
    j.erase("attacker_range");
    j.erase("victim_range");
    j["lines"] = *ov.lines;
  }
  if (ov.agent) j["agent"] = *ov.agent;
  if (ov.seed) j["seed"] = *ov.seed;
  if (ov.out) j["out"] = *ov.out;

  detail::check_keys(j,
                     {"lines", "cache", "defense", "attacker_range", "victim_range", "allow_empty", "max_steps",
                      "window", "multi_guess", "shared_addresses", "reward", "train", "agent", "out", "seed",
                      "eval_episodes", "baseline_episodes", "sweep"},
                     "");
  if (j.contains("lines") && j.contains("cache"))
    throw ExperimentConfigError(ConfigErrorCode::Schema, "give either 'lines' or 'cache', not both");

  ExperimentConfig c;
  bool shared = false;
  detail::read(j, "shared_addresses", shared, "");
  std::size_t lines = 8;
  detail::read(j, "lines", lines, "");
  if (lines == 0) throw ExperimentConfigError(ConfigErrorCode::Invariant, "lines must be positive");
  if (j.contains("cache")) {
    c.env.geometry = geometry_from_json(j.at("cache"));
    if (c.env.geometry.levels.empty())
      throw ExperimentConfigError(ConfigErrorCode::Invariant, "cache needs at least one level");
    lines = c.env.geometry.levels.front().sets;
    const EnvConfig base = EnvConfig::for_lines(lines, shared);
    c.env.attacker_range = base.attacker_range;
    c.env.victim_range = base.victim_range;
    c.env.max_steps = base.max_steps;
    c.env.window = base.window;
  } else {
    c.env = EnvConfig::for_lines(lines, shared);
  }
  c.env.shared_addresses = shared;

  if (j.contains("defense")) {
    const auto& d = j.at("defense");
    detail::check_keys(d, {"partition", "attacker_share", "randomize"}, "defense");
    detail::read(d, "partition", c.env.defense.partition, "defense");
    detail::read(d, "attacker_share", c.env.defense.attacker_share, "defense");
    detail::read(d, "randomize", c.env.defense.randomize, "defense");
  }
  if (j.contains("attacker_range")) c.env.attacker_range = detail::read_range(j.at("attacker_range"), "attacker_range");
  if (j.contains("victim_range")) c.env.victim_range = detail::read_range(j.at("victim_range"), "victim_range");
  detail::read(j, "allow_empty", c.env.allow_empty, "");
  const bool explicit_steps = j.contains("max_steps");
  detail::read(j, "max_steps", c.env.max_steps, "");
  if (explicit_steps && !j.contains("window")) c.env.window = c.env.max_steps;
  if (!explicit_steps && j.contains("attacker_range")) {
    c.env.max_steps = 2 * c.env.attacker_range.count + 4;
    c.env.window = c.env.max_steps;
  }
  detail::read(j, "window", c.env.window, "");
  detail::read(j, "multi_guess", c.env.multi_guess, "");
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    detail::check_keys(r, {"correct", "wrong", "step"}, "reward");
    detail::read(r, "correct", c.env.reward.correct, "reward");
    detail::read(r, "wrong", c.env.reward.wrong, "reward");
    detail::read(r, "step", c.env.reward.step, "reward");
  }
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  detail::read(j, "agent", c.agent, "");
  detail::read(j, "out", c.out, "");
  detail::read(j, "seed", c.seed, "");
  detail::read(j, "eval_episodes", c.eval_episodes, "");
  detail::read(j, "baseline_episodes", c.baseline_episodes, "");
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    detail::check_keys(s, {"lines", "train_steps"}, "sweep");
    try {
      if (s.contains("lines")) {
        c.sweep.lines = s.at("lines").get<std::vector<std::size_t>>();
        c.sweep.train_steps.clear();
        for (auto l : c.sweep.lines) c.sweep.train_steps.push_back(default_sweep_steps(l));
      }
      if (s.contains("train_steps")) c.sweep.train_steps = s.at("train_steps").get<std::vector<std::size_t>>();
    } catch (const std::exception& e) {
      throw ExperimentConfigError(ConfigErrorCode::Schema, std::string("bad sweep entry: ") + e.what());
    }
  }

  c.env.discount = c.train.gamma;
  c.train.seed = c.seed;
  c.env.seed = derive_seed(c.seed, "env");
  try {
    c.validate();
  } catch (const ExperimentConfigError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ExperimentConfigError(ConfigErrorCode::Invariant, e.what());
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const ConfigOverrides& ov = {}) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ExperimentConfigError(ConfigErrorCode::Schema, std::string("malformed JSON: ") + e.what());
  }
  return experiment_from_json(std::move(j), ov);
}

/// Reads, fills defaults and validates an experiment file.
inline ExperimentConfig parse_config(const std::filesystem::path& path, const ConfigOverrides& ov = {}) {
  std::ifstream in(path);
  if (!in) throw ExperimentConfigError(ConfigErrorCode::MissingFile, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), ov);
}

/// Writes the effective configuration to `dir`/config.json.
inline std::filesystem::path write_config_echo(const ExperimentConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "config.json";
  std::ofstream out(path);
  out << to_json(c).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed to write " + path.string());
  return path;
}

} // namespace cachegame
