#pragma once

// Command implementations behind the `cachegame` executable. Each command
// takes a validated ExperimentConfig, writes its artifacts under
// `config.out`, and returns a small summary. Argument parsing lives in the
// executable.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cachegame/agents.hpp"
#include "cachegame/analysis.hpp"
#include "cachegame/checkpoint.hpp"
#include "cachegame/config.hpp"
#include "cachegame/ppo.hpp"
#include "cachegame/trace.hpp"

namespace cachegame::cli {

namespace fs = std::filesystem;

enum ExitCode : int { Ok = 0, ConfigFailure = 2, RuntimeFailure = 3, CheckFailure = 4 };

/// Builds a scripted or random agent by name. `rl` is handled by callers.
inline std::unique_ptr<Agent> make_scripted_agent(const std::string& name, const Environment& env, std::uint64_t seed) {
  if (name == "random") return std::make_unique<RandomAgent>(env.config(), seed);
  if (name == "prime_probe") return std::make_unique<PrimeProbeAgent>(env, seed);
  if (name == "flush_reload") return std::make_unique<FlushReloadAgent>(env, seed);
  throw ConfigError("agent '" + name + "' is not a scripted agent");
}

inline EnvConfig eval_env(const ExperimentConfig& c) {
  EnvConfig e = c.env;
  e.seed = derive_seed(c.seed, "eval");
  return e;
}

inline void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

inline Json to_json(const EvalResult& r) {
  return {{"episodes", r.episodes},
          {"guesses", r.guesses},
          {"correct_guesses", r.correct_guesses},
          {"success_rate", r.success_rate},
          {"mean_length", r.mean_length}};
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  TrainResult result;
  EvalResult final_eval;
  fs::path checkpoint;
  fs::path metrics;
};

/// Trains a policy and writes config.json, metrics.csv, losses.csv,
/// checkpoint.json and train.json. Progress goes to `log` when given.
inline TrainSummary cmd_train(const ExperimentConfig& c, std::ostream* log = nullptr) {
  if (c.agent != "rl") throw ConfigError("train needs agent 'rl' (got '" + c.agent + "')");
  const fs::path out = c.out;
  write_config_echo(c, out);

  const auto start = std::chrono::steady_clock::now();
  TrainHooks hooks;
  if (log) {
    hooks.on_update = [&](const TrainResult& r) {
      if (c.train.eval_interval > 0 && r.updates % c.train.eval_interval == 0 && !r.evals.empty()) {
        const auto& e = r.evals.back();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        *log << "update " << r.updates << "  steps " << r.env_steps << "  episodes " << r.metrics.episodes.size()
             << "  train_success " << std::fixed << std::setprecision(3) << r.metrics.success_rate(500)
             << "  eval_success " << e.success_rate << "  eval_length " << std::setprecision(2) << e.mean_length
             << "  " << std::setprecision(0) << secs << "s" << std::defaultfloat << '\n';
      }
      return true;
    };
  }

  TrainSummary s;
  s.result = train(c.env, c.train, hooks);
  s.final_eval = evaluate(s.result.policy, eval_env(c), c.eval_episodes);

  s.metrics = out / "metrics.csv";
  {
    std::ofstream m(s.metrics);
    write_metrics_csv(m, s.result.metrics);
  }
  {
    std::ofstream l(out / "losses.csv");
    l << "update,total,policy,value,entropy,approx_kl,clip_fraction\n";
    for (std::size_t i = 0; i < s.result.losses.size(); ++i) {
      const auto& r = s.result.losses[i];
      l << i + 1 << ',' << format_number(r.total) << ',' << format_number(r.policy) << ','
        << format_number(r.value) << ',' << format_number(r.entropy) << ',' << format_number(r.approx_kl) << ','
        << format_number(r.clip_fraction) << '\n';
    }
  }
  s.checkpoint = out / "checkpoint.json";
  save_checkpoint(make_checkpoint(c, s.result), s.checkpoint);

  Json evals = Json::array();
  for (const auto& e : s.result.evals)
    evals.push_back({{"update", e.update}, {"env_steps", e.env_steps}, {"success_rate", e.success_rate},
                     {"mean_length", e.mean_length}});
  Json summary = {{"env_steps", s.result.env_steps},
                  {"updates", s.result.updates},
                  {"episodes", s.result.metrics.episodes.size()},
                  {"final_train_success", s.result.metrics.success_rate(1000)},
                  {"final_eval", to_json(s.final_eval)},
                  {"length_buckets", s.result.metrics.length_buckets(100)},
                  {"evals", evals},
                  {"warnings", s.result.warnings}};
  write_json(out / "train.json", summary);
  return s;
}

// ---------------------------------------------------------------------------
// eval

inline fs::path default_checkpoint(const ExperimentConfig& c) { return fs::path(c.out) / "checkpoint.json"; }

/// Loads a checkpoint and checks it fits the environment of `c`.
inline PolicyNet<float> load_policy_for(const ExperimentConfig& c, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const Checkpoint ck = load_checkpoint(path);
  if (ActionSpace(ck.config.env).size() != ActionSpace(c.env).size() ||
      ck.config.env.window != c.env.window || ck.config.env.max_steps != c.env.max_steps)
    throw ConfigError("checkpoint " + path.string() + " was trained for a different environment shape");
  return ck.policy();
}

/// Evaluates the configured agent (greedy for rl) and writes eval.json.
inline EvalResult cmd_eval(const ExperimentConfig& c, const std::optional<fs::path>& checkpoint = std::nullopt) {
  const fs::path out = c.out;
  write_config_echo(c, out);
  const EnvConfig env = eval_env(c);
  EvalResult r;
  if (c.agent == "rl") {
    const auto net = load_policy_for(c, checkpoint.value_or(default_checkpoint(c)));
    r = evaluate(net, env, c.eval_episodes);
  } else {
    const Environment probe(env);
    auto agent = make_scripted_agent(c.agent, probe, derive_seed(c.seed, "agent"));
    r = evaluate(*agent, env, c.eval_episodes);
  }
  Json j = to_json(r);
  j["agent"] = c.agent;
  write_json(out / "eval.json", j);
  return r;
}

// ---------------------------------------------------------------------------
// baseline

struct BaselineRow {
  std::string agent;
  EvalResult result;
};

/// Runs the named scripted agent, or every applicable one when the agent is
/// `rl`, for `baseline_episodes` episodes each. Writes baseline.json.
inline std::vector<BaselineRow> cmd_baseline(const ExperimentConfig& c) {
  const fs::path out = c.out;
  write_config_echo(c, out);
  std::vector<std::string> names;
  if (c.agent == "rl") {
    names = {"random", "prime_probe"};
    if (c.env.shared_addresses) names.push_back("flush_reload");
  } else {
    names = {c.agent};
  }
  const EnvConfig env = eval_env(c);
  const Environment probe(env);
  std::vector<BaselineRow> rows;
  Json arr = Json::array();
  for (const auto& n : names) {
    auto agent = make_scripted_agent(n, probe, derive_seed(c.seed, "agent-" + n));
    rows.push_back({n, evaluate(*agent, env, c.baseline_episodes)});
    Json j = to_json(rows.back().result);
    j["agent"] = n;
    j["chance"] = 1.0 / static_cast<double>(c.env.secret_domain_size());
    arr.push_back(j);
  }
  write_json(out / "baseline.json", {{"baselines", arr}});
  return rows;
}

// ---------------------------------------------------------------------------
// replay

/// One greedy replay per secret. Writes traces.jsonl (one line per secret,
/// with skeleton and label) and sequences.json (deduplicated skeletons).
inline Extraction cmd_replay(const ExperimentConfig& c, const std::optional<fs::path>& checkpoint = std::nullopt) {
  const fs::path out = c.out;
  write_config_echo(c, out);
  const EnvConfig env = eval_env(c);
  const Environment probe(env);
  Extraction ex;
  if (c.agent == "rl") {
    const auto net = load_policy_for(c, checkpoint.value_or(default_checkpoint(c)));
    ex = extract_attack_sequences(net, env);
  } else {
    auto agent = make_scripted_agent(c.agent, probe, derive_seed(c.seed, "agent"));
    ex = extract_attack_sequences(*agent, env);
  }
  std::ofstream traces(out / "traces.jsonl");
  for (const auto& rec : ex.replays) {
    const Skeleton sk = skeleton_of(rec, probe.cache());
    auto j = trace_json(rec);
    j["skeleton"] = to_string(sk);
    j["label"] = to_string(classify_sequence(sk));
    traces << j.dump() << '\n';
  }
  Json seqs = Json::array();
  for (const auto& s : ex.sequences) {
    Json secrets = Json::array();
    for (const auto& x : s.secrets) secrets.push_back(secret_to_string(x));
    seqs.push_back({{"skeleton", to_string(s.skeleton)},
                    {"label", to_string(s.label)},
                    {"length", s.skeleton.size()},
                    {"secrets", secrets},
                    {"example", trace_json(s.record)}});
  }
  std::size_t correct = 0;
  for (const auto& r : ex.replays) correct += r.correct();
  write_json(out / "sequences.json",
             {{"agent", c.agent}, {"replays", ex.replays.size()}, {"correct", correct}, {"sequences", seqs}});
  return ex;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCell {
  std::size_t lines = 0;
  std::optional<double> random_rate;
  std::optional<double> scripted_rate;
  std::optional<double> trained_rate;
  std::string error;
};

struct SweepSummary {
  std::vector<SweepCell> cells;
  std::optional<MetricsReport> report;
  bool all_ok() const {
    for (const auto& c : cells)
      if (!c.error.empty()) return false;
    return true;
  }
};

/// Per cache-line count: random and Prime+Probe baselines, then (for agent
/// rl) training and a greedy evaluation. Failures are isolated per cell.
/// Writes one subdirectory per count plus sweep.csv and report.json.
inline SweepSummary cmd_sweep(const ExperimentConfig& c, std::ostream* log = nullptr) {
  const fs::path out = c.out;
  write_config_echo(c, out);
  SweepSummary sum;
  std::vector<RunInputs> inputs;
  for (std::size_t i = 0; i < c.sweep.lines.size(); ++i) {
    const std::size_t L = c.sweep.lines[i];
    SweepCell cell;
    cell.lines = L;
    try {
      Json base = to_json(c);
      base.erase("cache");
      base.erase("attacker_range");
      base.erase("victim_range");
      base.erase("max_steps");
      base.erase("window");
      base["lines"] = L;
      base["out"] = (out / ("lines_" + std::to_string(L))).string();
      base["train"]["total_steps"] = c.sweep_steps(i);
      const ExperimentConfig cc = experiment_from_json(base);
      write_config_echo(cc, cc.out);
      const EnvConfig env = eval_env(cc);
      const Environment probe(env);

      RandomAgent random(env, derive_seed(cc.seed, "agent-random"));
      cell.random_rate = evaluate(random, env, cc.baseline_episodes).success_rate;
      if (!cc.env.defense.partition && !cc.env.defense.randomize) {
        PrimeProbeAgent pp(probe, derive_seed(cc.seed, "agent-prime_probe"));
        cell.scripted_rate = evaluate(pp, env, cc.eval_episodes).success_rate;
      }
      if (log) *log << "lines " << L << ": random " << *cell.random_rate << '\n';

      RunInputs in;
      in.name = "lines_" + std::to_string(L);
      in.lines = L;
      in.random_rate = cell.random_rate;
      in.scripted_rate = cell.scripted_rate;
      if (c.agent == "rl") {
        auto ts = cmd_train(cc, log);
        PolicyAgent<float> agent(ts.result.policy, env, true);
        evaluate(agent, env, cc.eval_episodes, [&](const EpisodeRecord& r) { in.records.push_back(r); });
        in.training = std::move(ts.result.metrics);
      } else {
        auto agent = make_scripted_agent(c.agent, probe, derive_seed(cc.seed, "agent"));
        evaluate(*agent, env, cc.eval_episodes, [&](const EpisodeRecord& r) { in.records.push_back(r); });
      }
      const auto rep = build_report({in});
      cell.trained_rate = rep.configs.front().success_rate;
      if (log) *log << "lines " << L << ": " << c.agent << " " << *cell.trained_rate << '\n';
      inputs.push_back(std::move(in));
    } catch (const std::exception& e) {
      cell.error = e.what();
      if (log) *log << "lines " << L << " failed: " << e.what() << '\n';
    }
    sum.cells.push_back(std::move(cell));
  }

  if (!inputs.empty()) {
    sum.report = build_report(inputs);
    std::ofstream t(out / "sweep.csv");
    write_sweep_csv(t, *sum.report);
    Json rep = to_json(*sum.report);
    Json errors = Json::array();
    for (const auto& cell : sum.cells)
      if (!cell.error.empty()) errors.push_back({{"lines", cell.lines}, {"error", cell.error}});
    rep["errors"] = errors;
    write_json(out / "report.json", rep);
  }
  return sum;
}

} // namespace cachegame::cli
