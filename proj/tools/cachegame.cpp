// cachegame: train, evaluate, replay and sweep cache-timing attack agents.
//
//   cachegame train    --config exp.json [--lines N] [--seed N] [--out DIR]
//   cachegame eval     --config exp.json [--agent NAME] [--checkpoint PATH]
//   cachegame baseline --lines 8 --agent random
//   cachegame replay   --config exp.json
//   cachegame sweep    --config sweep.json
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error,
// 4 success rate below --min-success.

#include <iostream>
#include <optional>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "cachegame/cli.hpp"

namespace {

using namespace cachegame;
namespace c = cachegame::cli;

struct Options {
  std::string config;
  std::optional<std::string> agent;
  std::optional<std::size_t> lines;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<double> min_success;
};

ExperimentConfig load(const Options& o) {
  const ConfigOverrides ov{o.agent, o.lines, o.seed, o.out};
  if (o.config.empty()) return experiment_from_json(Json::object(), ov);
  return parse_config(o.config, ov);
}

int check(const Options& o, const std::string& what, double rate) {
  if (o.min_success && rate < *o.min_success) {
    std::cerr << "check failed: " << what << " success " << rate << " < " << *o.min_success << '\n';
    return c::CheckFailure;
  }
  return c::Ok;
}

std::optional<std::filesystem::path> checkpoint_path(const Options& o) {
  if (o.checkpoint) return std::filesystem::path(*o.checkpoint);
  return std::nullopt;
}

int run(const std::string& command, const Options& o) {
  const ExperimentConfig cfg = load(o);
  if (command == "train") {
    const auto s = c::cmd_train(cfg, &std::cerr);
    std::cout << "episodes " << s.result.metrics.episodes.size() << "  env_steps " << s.result.env_steps
              << "  eval_success " << s.final_eval.success_rate << "  eval_length " << s.final_eval.mean_length
              << "\ncheckpoint " << s.checkpoint.string() << "\nmetrics " << s.metrics.string() << '\n';
    return check(o, "final evaluation", s.final_eval.success_rate);
  }
  if (command == "eval") {
    const auto r = c::cmd_eval(cfg, checkpoint_path(o));
    std::cout << cfg.agent << ": success " << r.success_rate << " over " << r.episodes << " episodes, mean length "
              << r.mean_length << '\n';
    return check(o, cfg.agent, r.success_rate);
  }
  if (command == "baseline") {
    int code = c::Ok;
    for (const auto& row : c::cmd_baseline(cfg)) {
      std::cout << row.agent << ": success " << row.result.success_rate << " over " << row.result.episodes
                << " episodes, mean length " << row.result.mean_length << '\n';
      code = std::max(code, check(o, row.agent, row.result.success_rate));
    }
    return code;
  }
  if (command == "replay") {
    const auto ex = c::cmd_replay(cfg, checkpoint_path(o));
    std::size_t correct = 0;
    for (const auto& r : ex.replays) correct += r.correct();
    std::cout << ex.replays.size() << " replays, " << correct << " correct, " << ex.sequences.size()
              << " distinct sequences\n";
    for (const auto& s : ex.sequences) std::cout << "  [" << to_string(s.label) << "] " << to_string(s.skeleton) << '\n';
    return check(o, "replay", success_rate(correct, ex.replays.size()));
  }
  // sweep
  const auto s = c::cmd_sweep(cfg, &std::cerr);
  std::cout << "lines,random_rate,trained_rate\n";
  int code = c::Ok;
  for (const auto& cell : s.cells) {
    if (!cell.error.empty()) {
      std::cout << cell.lines << ",error," << cell.error << '\n';
      continue;
    }
    std::cout << cell.lines << ',' << cell.random_rate.value_or(0) << ',' << cell.trained_rate.value_or(0) << '\n';
    code = std::max(code, check(o, "lines " + std::to_string(cell.lines), cell.trained_rate.value_or(0)));
  }
  if (!s.all_ok()) return c::RuntimeFailure;
  return code;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cache-timing guessing game: simulate, train, evaluate and replay attack agents"};
  app.require_subcommand(1, 1);
  Options o;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment JSON file")->check(CLI::ExistingFile);
    sub->add_option("--agent", o.agent, "rl, random, prime_probe or flush_reload");
    sub->add_option("--lines", o.lines, "Direct-mapped single-level cache with N lines");
    sub->add_option("--seed", o.seed, "Root seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--min-success", o.min_success, "Exit with code 4 when the success rate is lower");
  };
  const std::pair<const char*, const char*> commands[] = {
      {"train", "Train a PPO policy and write metrics and a checkpoint"},
      {"eval", "Evaluate a checkpoint or scripted agent"},
      {"baseline", "Evaluate the scripted baselines"},
      {"replay", "Replay every secret deterministically and classify the attacks"},
      {"sweep", "Run one experiment per cache size and aggregate a report"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (std::string(name) == "eval" || std::string(name) == "replay")
      sub->add_option("--checkpoint", o.checkpoint, "Checkpoint (default OUT/checkpoint.json)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : c::ConfigFailure;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const ExperimentConfigError& e) {
    static const char* kinds[] = {"", "missing-file", "schema", "invariant"};
    std::cerr << "config error [" << kinds[static_cast<int>(e.code())] << "]: " << e.what() << '\n';
    return c::ConfigFailure;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return c::ConfigFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return c::RuntimeFailure;
  }
}
