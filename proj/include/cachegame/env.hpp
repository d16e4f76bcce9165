#pragma once

// The guessing game: an attack slice and a victim slice share one cache. The
// victim holds a secret address (or, optionally, makes no access at all). The
// agent drives the attack slice, may trigger the victim, and ends the episode
// by guessing the secret.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cachegame/cache.hpp"
#include "cachegame/errors.hpp"
#include "cachegame/rng.hpp"

namespace cachegame {

struct RewardConfig {
  double correct = 1.0;
  double wrong = -1.0;
  double step = -0.01;

  void validate() const {
    if (!(correct > 0.0)) throw ConfigError("reward.correct must be positive");
    if (!(wrong < 0.0)) throw ConfigError("reward.wrong must be negative");
    if (!(step < 0.0)) throw ConfigError("reward.step must be negative");
  }
};

enum class ActionKind : std::uint8_t { Access, Flush, TriggerVictim, Guess, GuessEmpty };

struct Action {
  ActionKind kind = ActionKind::TriggerVictim;
  Address addr = 0;

  static Action access(Address a) { return {ActionKind::Access, a}; }
  static Action flush(Address a) { return {ActionKind::Flush, a}; }
  static Action trigger() { return {ActionKind::TriggerVictim, 0}; }
  static Action guess(Address a) { return {ActionKind::Guess, a}; }
  static Action guess_empty() { return {ActionKind::GuessEmpty, 0}; }

  bool is_guess() const { return kind == ActionKind::Guess || kind == ActionKind::GuessEmpty; }

  bool operator==(const Action& o) const {
    const bool addressed = kind == ActionKind::Access || kind == ActionKind::Flush || kind == ActionKind::Guess;
    return kind == o.kind && (!addressed || addr == o.addr);
  }

  /// "access:11", "flush:11", "trigger", "guess:3", "guess_empty".
  std::string to_string() const {
    switch (kind) {
    case ActionKind::Access: return "access:" + std::to_string(addr);
    case ActionKind::Flush: return "flush:" + std::to_string(addr);
    case ActionKind::TriggerVictim: return "trigger";
    case ActionKind::Guess: return "guess:" + std::to_string(addr);
    case ActionKind::GuessEmpty: return "guess_empty";
    }
    return "trigger";
  }

  static Action parse(std::string_view text) {
    if (text == "trigger") return trigger();
    if (text == "guess_empty") return guess_empty();
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw DomainError("malformed action '" + std::string(text) + "'");
    const auto head = text.substr(0, colon);
    const std::string tail(text.substr(colon + 1));
    std::size_t used = 0;
    Address a = 0;
    try {
      a = std::stoull(tail, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != tail.size()) throw DomainError("malformed action '" + std::string(text) + "'");
    if (head == "access") return access(a);
    if (head == "flush") return flush(a);
    if (head == "guess") return guess(a);
    throw DomainError("malformed action '" + std::string(text) + "'");
  }
};

/// nullopt stands for "the victim makes no access" (Empty).
using Secret = std::optional<Address>;

inline std::string secret_to_string(const Secret& s) { return s ? std::to_string(*s) : std::string("empty"); }

struct EnvConfig {
  CacheGeometry geometry = CacheGeometry::direct_mapped(8);
  DefenseConfig defense;
  AddressRange attacker_range{8, 8};
  AddressRange victim_range{0, 8};
  /// Adds Empty to the secret domain and unmasks GuessEmpty.
  bool allow_empty = false;
  std::size_t max_steps = 20;
  std::size_t window = 20;
  bool multi_guess = false;
  bool shared_addresses = false;
  RewardConfig reward;
  /// Discount used for the discounted return kept in episode records.
  double discount = 0.99;
  std::uint64_t seed = 0;

  /// Single-level direct-mapped cache of `lines` lines with T = W = 2L + 4.
  /// Victim addresses are [0, L); attacker addresses are [L, 2L) unless the
  /// ranges are shared.
  static EnvConfig for_lines(std::size_t lines, bool shared = false) {
    EnvConfig c;
    c.geometry = CacheGeometry::direct_mapped(lines);
    c.victim_range = {0, lines};
    c.attacker_range = shared ? AddressRange{0, lines} : AddressRange{lines, lines};
    c.shared_addresses = shared;
    c.max_steps = 2 * lines + 4;
    c.window = c.max_steps;
    return c;
  }

  std::size_t secret_domain_size() const { return victim_range.count + (allow_empty ? 1 : 0); }

  void validate() const {
    geometry.validate();
    reward.validate();
    if (max_steps == 0) throw ConfigError("max_steps must be positive");
    if (window == 0) throw ConfigError("window must be positive");
    if (window > max_steps)
      throw ConfigError("window (" + std::to_string(window) + ") exceeds max_steps (" + std::to_string(max_steps) + ")");
    if (attacker_range.count == 0) throw ConfigError("attacker range is empty");
    if (secret_domain_size() == 0) throw ConfigError("secret domain is empty");
    if (!(discount >= 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in [0, 1]");
    if (shared_addresses) {
      if (!(attacker_range == victim_range))
        throw ConfigError("shared_addresses requires identical attacker and victim ranges");
    } else {
      const bool overlap = attacker_range.first < victim_range.end() && victim_range.first < attacker_range.end();
      if (overlap && victim_range.count > 0)
        throw ConfigError("attacker and victim ranges overlap but shared_addresses is false");
    }
  }
};

/// Flat enumeration of every action the configuration can express:
/// Access(x) for each attacker x, Flush(x) for each attacker x, TriggerVictim,
/// Guess(y) for each victim y, GuessEmpty. GuessEmpty is always enumerated but
/// only legal when Empty is part of the secret domain.
class ActionSpace {
public:
  explicit ActionSpace(const EnvConfig& c)
      : attacker_(c.attacker_range), victim_(c.victim_range), allow_empty_(c.allow_empty) {}

  std::size_t size() const { return 2 * attacker_.count + victim_.count + 2; }

  std::size_t access_offset() const { return 0; }
  std::size_t flush_offset() const { return attacker_.count; }
  std::size_t trigger_id() const { return 2 * attacker_.count; }
  std::size_t guess_offset() const { return 2 * attacker_.count + 1; }
  std::size_t guess_empty_id() const { return size() - 1; }

  bool legal(std::size_t id) const { return id < size() && (id != guess_empty_id() || allow_empty_); }

  std::vector<bool> legal_mask() const {
    std::vector<bool> m(size(), true);
    m[guess_empty_id()] = allow_empty_;
    return m;
  }

  Action action(std::size_t id) const {
    if (id >= size()) throw DomainError("action id " + std::to_string(id) + " out of range");
    if (id < flush_offset()) return Action::access(attacker_.first + id);
    if (id < trigger_id()) return Action::flush(attacker_.first + (id - flush_offset()));
    if (id == trigger_id()) return Action::trigger();
    if (id < guess_empty_id()) return Action::guess(victim_.first + (id - guess_offset()));
    return Action::guess_empty();
  }

  std::size_t id(const Action& a) const {
    switch (a.kind) {
    case ActionKind::Access:
      if (!attacker_.contains(a.addr)) break;
      return access_offset() + (a.addr - attacker_.first);
    case ActionKind::Flush:
      if (!attacker_.contains(a.addr)) break;
      return flush_offset() + (a.addr - attacker_.first);
    case ActionKind::TriggerVictim: return trigger_id();
    case ActionKind::Guess:
      if (!victim_.contains(a.addr)) break;
      return guess_offset() + (a.addr - victim_.first);
    case ActionKind::GuessEmpty: return guess_empty_id();
    }
    throw DomainError("action '" + a.to_string() + "' outside the configured address ranges");
  }

private:
  AddressRange attacker_;
  AddressRange victim_;
  bool allow_empty_;
};

struct Observation {
  LatencyClass latency = LatencyClass::NA;
  /// Flat action id; -1 marks window padding.
  int action_id = -1;
  std::size_t step_index = 0;
  bool victim_triggered = false;

  bool is_padding() const { return action_id < 0; }
  bool operator==(const Observation&) const = default;
};

/// The W most recent observations, oldest first; padded at episode start.
class HistoryWindow {
public:
  explicit HistoryWindow(std::size_t w = 1) : slots_(w) {}

  std::size_t size() const { return slots_.size(); }
  const Observation& operator[](std::size_t i) const { return slots_[i]; }
  const Observation& latest() const { return slots_.back(); }
  std::size_t padding() const {
    std::size_t n = 0;
    while (n < slots_.size() && slots_[n].is_padding()) ++n;
    return n;
  }

  void push(const Observation& o) {
    for (std::size_t i = 1; i < slots_.size(); ++i) slots_[i - 1] = slots_[i];
    slots_.back() = o;
  }

  void clear() {
    for (auto& s : slots_) s = Observation{};
  }

  bool operator==(const HistoryWindow&) const = default;

private:
  std::vector<Observation> slots_;
};

/// Row-major (rows x cols) float features of one window. Rows before
/// `first_valid` are padding.
struct FeatureSequence {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t first_valid = 0;
  std::vector<float> data;

  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool operator==(const FeatureSequence&) const = default;
};

/// Per-step feature width: latency one-hot (3), action one-hot, normalized
/// step index, trigger bit.
inline std::size_t feature_dim(std::size_t num_actions) { return 3 + num_actions + 2; }

inline FeatureSequence encode_window(const HistoryWindow& w, std::size_t num_actions, std::size_t max_steps) {
  FeatureSequence f;
  f.rows = w.size();
  f.cols = feature_dim(num_actions);
  f.first_valid = w.padding();
  f.data.assign(f.rows * f.cols, 0.0f);
  for (std::size_t r = 0; r < f.rows; ++r) {
    const Observation& o = w[r];
    float* row = f.data.data() + r * f.cols;
    row[static_cast<std::size_t>(o.latency)] = 1.0f;
    if (o.is_padding()) continue;
    row[3 + static_cast<std::size_t>(o.action_id)] = 1.0f;
    row[3 + num_actions] = static_cast<float>(static_cast<double>(o.step_index) / static_cast<double>(max_steps));
    row[4 + num_actions] = o.victim_triggered ? 1.0f : 0.0f;
  }
  return f;
}

enum class Outcome : std::uint8_t { Correct, Wrong, Truncated };

inline std::string_view to_string(Outcome o) {
  switch (o) {
  case Outcome::Correct: return "correct";
  case Outcome::Wrong: return "wrong";
  case Outcome::Truncated: return "truncated";
  }
  return "truncated";
}

struct StepRecord {
  Action action;
  Observation observation;
  double reward = 0.0;
  bool operator==(const StepRecord&) const = default;
};

struct EpisodeRecord {
  Secret secret;
  std::vector<StepRecord> steps;
  std::optional<Outcome> outcome;
  double total_return = 0.0;
  double discounted_return = 0.0;
  /// Guess evaluations in the episode, including a truncation (scored as a
  /// wrong guess) and the correct ones.
  std::size_t guesses = 0;
  std::size_t correct_guesses = 0;

  std::size_t length() const { return steps.size(); }
  bool correct() const { return outcome == Outcome::Correct; }
  bool operator==(const EpisodeRecord&) const = default;
};

struct StepInfo {
  LatencyClass latency = LatencyClass::NA;
  std::optional<bool> guess_correct;
  std::optional<Outcome> outcome;
};

struct StepResult {
  const HistoryWindow& window;
  double reward;
  bool done;
  StepInfo info;
};

class Environment {
public:
  explicit Environment(EnvConfig config)
      : config_((config.validate(), std::move(config))),
        actions_(config_),
        cache_(config_.geometry, config_.defense, derive_seed(config_.seed, "cache"),
               SliceRanges{config_.attacker_range, config_.victim_range}),
        rng_(derive_seed(config_.seed, "secret")),
        window_(config_.window) {}

  const EnvConfig& config() const { return config_; }
  const ActionSpace& actions() const { return actions_; }
  const Cache& cache() const { return cache_; }
  const HistoryWindow& window() const { return window_; }
  const EpisodeRecord& record() const { return record_; }
  bool active() const { return active_; }
  const Secret& secret() const { return secret_; }
  std::size_t steps_taken() const { return step_; }
  std::size_t feature_dim() const { return cachegame::feature_dim(actions_.size()); }

  /// Starts an episode with a secret drawn uniformly from the secret domain.
  const HistoryWindow& reset() {
    const std::size_t k = uniform_index(rng_, config_.secret_domain_size());
    Secret s;
    if (k < config_.victim_range.count) s = config_.victim_range.first + k;
    return start(s);
  }

  /// Starts an episode with a forced secret (deterministic replay).
  const HistoryWindow& reset(const Secret& forced) {
    if (forced ? !config_.victim_range.contains(*forced) : !config_.allow_empty)
      throw DomainError("secret " + secret_to_string(forced) + " outside the secret domain");
    return start(forced);
  }

  bool evaluate_guess(const Secret& g) const { return g == secret_; }

  StepResult step(std::size_t action_id) { return step(actions_.action(action_id)); }

  StepResult step(const Action& a) {
    if (!active_) throw StateError("step on an inactive episode; call reset() first");
    const std::size_t id = actions_.id(a);
    if (!actions_.legal(id)) throw DomainError("action '" + a.to_string() + "' is disabled in this configuration");

    double reward = config_.reward.step;
    StepInfo info;
    bool done = false;
    switch (a.kind) {
    case ActionKind::Access: info.latency = cache_.access(a.addr, Slice::Attacker).latency; break;
    case ActionKind::Flush: cache_.flush(a.addr, Slice::Attacker); break;
    case ActionKind::TriggerVictim:
      if (secret_) cache_.access(*secret_, Slice::Victim);
      triggered_ = true;
      break;
    case ActionKind::Guess:
    case ActionKind::GuessEmpty: {
      const Secret g = a.kind == ActionKind::Guess ? Secret{a.addr} : Secret{};
      const bool ok = evaluate_guess(g);
      info.guess_correct = ok;
      ++record_.guesses;
      if (ok) ++record_.correct_guesses;
      reward += ok ? config_.reward.correct : config_.reward.wrong;
      if (ok || !config_.multi_guess) {
        done = true;
        info.outcome = ok ? Outcome::Correct : Outcome::Wrong;
      }
      break;
    }
    }

    const Observation obs{info.latency, static_cast<int>(id), step_, triggered_};
    window_.push(obs);
    ++step_;
    if (!done && step_ >= config_.max_steps) {
      done = true;
      info.outcome = Outcome::Truncated;
      // A wrong multi-guess on the final step already carries the penalty.
      if (!a.is_guess()) {
        reward += config_.reward.wrong;
        ++record_.guesses;
      }
    }

    record_.steps.push_back(StepRecord{a, obs, reward});
    record_.total_return += reward;
    record_.discounted_return += discount_scale_ * reward;
    discount_scale_ *= config_.discount;
    if (done) {
      record_.outcome = info.outcome;
      active_ = false;
    }
    return StepResult{window_, reward, done, info};
  }

private:
  const HistoryWindow& start(const Secret& s) {
    cache_.reset();
    secret_ = s;
    step_ = 0;
    triggered_ = false;
    active_ = true;
    discount_scale_ = 1.0;
    window_.clear();
    record_ = EpisodeRecord{};
    record_.secret = s;
    return window_;
  }

  EnvConfig config_;
  ActionSpace actions_;
  Cache cache_;
  Rng rng_;
  HistoryWindow window_;
  EpisodeRecord record_;
  Secret secret_;
  std::size_t step_ = 0;
  bool triggered_ = false;
  bool active_ = false;
  double discount_scale_ = 1.0;
};

} // namespace cachegame
