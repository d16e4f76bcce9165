#pragma once

// Deterministic replay, attack-sequence extraction and classification, and
// report generation (success rates, length buckets, per-size sweep tables).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cachegame/agents.hpp"
#include "cachegame/env.hpp"
#include "cachegame/errors.hpp"
#include "cachegame/ppo.hpp"

namespace cachegame {

/// Runs `agent` greedily on a fresh environment built from `config`, with the
/// episode forced to `secret`.
inline EpisodeRecord replay_deterministic(Agent& agent, const EnvConfig& config, const Secret& secret) {
  Environment env(config);
  return run_episode(env, agent, secret);
}

template <typename S>
EpisodeRecord replay_deterministic(const PolicyNet<S>& net, const EnvConfig& config, const Secret& secret) {
  PolicyAgent<S> agent(net, config, true);
  return replay_deterministic(agent, config, secret);
}

/// Every element of the secret domain, victim addresses first.
inline std::vector<Secret> secret_domain(const EnvConfig& c) {
  std::vector<Secret> out;
  for (Address y = c.victim_range.first; y < c.victim_range.end(); ++y) out.push_back(y);
  if (c.allow_empty) out.push_back(std::nullopt);
  return out;
}

/// One abstract step: action kind plus, for accesses and flushes, the set the
/// address maps to at the last cache level.
struct SkeletonStep {
  ActionKind kind;
  std::optional<std::size_t> set;
  auto operator<=>(const SkeletonStep&) const = default;
};

using Skeleton = std::vector<SkeletonStep>;

inline std::string to_string(const Skeleton& sk) {
  std::string s;
  for (const auto& st : sk) {
    if (!s.empty()) s += ' ';
    switch (st.kind) {
    case ActionKind::Access: s += "A" + std::to_string(*st.set); break;
    case ActionKind::Flush: s += "F" + std::to_string(*st.set); break;
    case ActionKind::TriggerVictim: s += "T"; break;
    case ActionKind::Guess: s += "G"; break;
    case ActionKind::GuessEmpty: s += "GE"; break;
    }
  }
  return s;
}

enum class AttackLabel { PrimeProbeLike, FlushBased, TriggerOnly, Unknown };

inline std::string_view to_string(AttackLabel l) {
  switch (l) {
  case AttackLabel::PrimeProbeLike: return "prime_probe_like";
  case AttackLabel::FlushBased: return "flush_based";
  case AttackLabel::TriggerOnly: return "trigger_only";
  case AttackLabel::Unknown: return "unknown";
  }
  return "unknown";
}

struct AttackSequence {
  /// Secret of the first replay that produced this skeleton.
  Secret secret;
  EpisodeRecord record;
  Skeleton skeleton;
  AttackLabel label = AttackLabel::Unknown;
  /// Secrets whose replays share this skeleton.
  std::vector<Secret> secrets;
};

inline Skeleton skeleton_of(const EpisodeRecord& r, const Cache& cache) {
  const std::size_t last = cache.geometry().depth() - 1;
  Skeleton sk;
  for (const auto& st : r.steps) {
    SkeletonStep s{st.action.kind, std::nullopt};
    if (st.action.kind == ActionKind::Access || st.action.kind == ActionKind::Flush)
      s.set = cache.map_set(st.action.addr, last, Slice::Attacker);
    sk.push_back(s);
  }
  return sk;
}

/// Heuristic label, checked in this order:
///   flush_based      a Flush before the first trigger and an Access after it;
///   prime_probe_like Accesses before the first trigger, an Access after it to
///                    one of the same sets, and a final guess;
///   trigger_only     only triggers and guesses, with at least one trigger;
///   unknown          anything else.
inline AttackLabel classify_sequence(const Skeleton& sk) {
  const auto trig = std::find_if(sk.begin(), sk.end(), [](const SkeletonStep& s) {
    return s.kind == ActionKind::TriggerVictim;
  });
  const bool is_guess_last =
      !sk.empty() && (sk.back().kind == ActionKind::Guess || sk.back().kind == ActionKind::GuessEmpty);
  if (trig != sk.end()) {
    const bool flush_before = std::any_of(sk.begin(), trig, [](const SkeletonStep& s) { return s.kind == ActionKind::Flush; });
    const bool access_after = std::any_of(trig + 1, sk.end(), [](const SkeletonStep& s) { return s.kind == ActionKind::Access; });
    if (flush_before && access_after) return AttackLabel::FlushBased;

    std::vector<std::size_t> primed;
    for (auto it = sk.begin(); it != trig; ++it)
      if (it->kind == ActionKind::Access) primed.push_back(*it->set);
    const bool reprobe = std::any_of(trig + 1, sk.end(), [&](const SkeletonStep& s) {
      return s.kind == ActionKind::Access && std::find(primed.begin(), primed.end(), *s.set) != primed.end();
    });
    if (!primed.empty() && reprobe && is_guess_last) return AttackLabel::PrimeProbeLike;

    const bool only_tg = std::all_of(sk.begin(), sk.end(), [](const SkeletonStep& s) {
      return s.kind == ActionKind::TriggerVictim || s.kind == ActionKind::Guess || s.kind == ActionKind::GuessEmpty;
    });
    if (only_tg) return AttackLabel::TriggerOnly;
  }
  return AttackLabel::Unknown;
}

inline AttackLabel classify_sequence(const AttackSequence& seq) { return classify_sequence(seq.skeleton); }

struct Extraction {
  /// One replay per secret, in secret-domain order.
  std::vector<EpisodeRecord> replays;
  /// Replays deduplicated by skeleton, in order of first appearance.
  std::vector<AttackSequence> sequences;
};

inline Extraction extract_attack_sequences(Agent& agent, const EnvConfig& config) {
  const Environment probe(config);
  Extraction ex;
  std::map<Skeleton, std::size_t> index;
  for (const auto& secret : secret_domain(config)) {
    EpisodeRecord rec = replay_deterministic(agent, config, secret);
    Skeleton sk = skeleton_of(rec, probe.cache());
    const auto [it, fresh] = index.try_emplace(sk, ex.sequences.size());
    if (fresh) {
      AttackSequence seq;
      seq.secret = secret;
      seq.record = rec;
      seq.label = classify_sequence(sk);
      seq.skeleton = std::move(sk);
      ex.sequences.push_back(std::move(seq));
    }
    ex.sequences[it->second].secrets.push_back(secret);
    ex.replays.push_back(std::move(rec));
  }
  return ex;
}

template <typename S>
Extraction extract_attack_sequences(const PolicyNet<S>& net, const EnvConfig& config) {
  PolicyAgent<S> agent(net, config, true);
  return extract_attack_sequences(agent, config);
}

// ---------------------------------------------------------------------------
// Reports

/// Inputs for one configuration: greedy evaluation records, optionally the
/// training log and baseline rates.
struct RunInputs {
  std::string name;
  std::size_t lines = 0;
  std::vector<EpisodeRecord> records;
  MetricsLog training;
  std::optional<double> random_rate;
  std::optional<double> scripted_rate;
};

struct ConfigReport {
  std::string name;
  std::size_t lines = 0;
  std::size_t episodes = 0;
  std::size_t guesses = 0;
  std::size_t correct_guesses = 0;
  double success_rate = 0;
  double mean_length = 0;
  double p50_length = 0;
  double p90_length = 0;
  /// Mean length per 100 training episodes (evaluation records when no
  /// training log is given).
  std::vector<double> length_buckets;
  std::optional<double> random_rate;
  std::optional<double> scripted_rate;
};

struct MetricsReport {
  std::vector<ConfigReport> configs;
};

/// Nearest-rank percentile of a non-empty sample.
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline MetricsReport build_report(const std::vector<RunInputs>& runs) {
  if (runs.empty()) throw ReportError("build_report needs at least one configuration");
  MetricsReport rep;
  for (const auto& run : runs) {
    if (run.records.empty()) throw ReportError("configuration '" + run.name + "' has no episode records");
    ConfigReport c;
    c.name = run.name;
    c.lines = run.lines;
    c.episodes = run.records.size();
    std::vector<double> lengths;
    MetricsLog from_records;
    for (const auto& r : run.records) {
      c.guesses += r.guesses;
      c.correct_guesses += r.correct_guesses;
      lengths.push_back(static_cast<double>(r.length()));
      from_records.add(r.correct(), r.length(), r.total_return);
    }
    c.success_rate = success_rate(c.correct_guesses, c.guesses);
    double sum = 0;
    for (double l : lengths) sum += l;
    c.mean_length = sum / static_cast<double>(lengths.size());
    c.p50_length = percentile(lengths, 0.5);
    c.p90_length = percentile(lengths, 0.9);
    c.length_buckets = (run.training.episodes.empty() ? from_records : run.training).length_buckets(100);
    c.random_rate = run.random_rate;
    c.scripted_rate = run.scripted_rate;
    rep.configs.push_back(std::move(c));
  }
  return rep;
}

/// Shortest decimal form that round-trips.
inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_sweep_csv(std::ostream& out, const MetricsReport& rep) {
  out << "lines,random_rate,trained_rate\n";
  for (const auto& c : rep.configs)
    out << c.lines << ',' << (c.random_rate ? format_number(*c.random_rate) : "") << ','
        << format_number(c.success_rate) << '\n';
}

inline nlohmann::ordered_json to_json(const MetricsReport& rep) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : rep.configs) {
    nlohmann::ordered_json j{{"name", c.name},
                             {"lines", c.lines},
                             {"episodes", c.episodes},
                             {"guesses", c.guesses},
                             {"correct_guesses", c.correct_guesses},
                             {"success_rate", c.success_rate},
                             {"mean_length", c.mean_length},
                             {"p50_length", c.p50_length},
                             {"p90_length", c.p90_length},
                             {"length_buckets", c.length_buckets}};
    j["random_rate"] = c.random_rate ? nlohmann::ordered_json(*c.random_rate) : nlohmann::ordered_json();
    j["scripted_rate"] = c.scripted_rate ? nlohmann::ordered_json(*c.scripted_rate) : nlohmann::ordered_json();
    arr.push_back(std::move(j));
  }
  return {{"configs", arr}};
}

/// Training metrics CSV: episode, success, length, return.
inline void write_metrics_csv(std::ostream& out, const MetricsLog& log) {
  out << "episode,success,length,return\n";
  for (const auto& e : log.episodes)
    out << e.episode << ',' << (e.success ? 1 : 0) << ',' << e.length << ',' << format_number(e.ret) << '\n';
}

} // namespace cachegame
