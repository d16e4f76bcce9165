#pragma once

// Scripted attackers and the random baseline. All agents share one
// interface: a decision function from the current history window to the next
// action, plus whatever per-episode state the script needs.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cachegame/env.hpp"
#include "cachegame/rng.hpp"

namespace cachegame {

class Agent {
public:
  virtual ~Agent() = default;
  virtual std::string_view name() const = 0;
  /// Called after every env reset, before the first act().
  virtual void begin_episode() {}
  virtual Action act(const HistoryWindow& window) = 0;
};

/// Picks a guess uniformly from the legal guesses (victim addresses, plus
/// Empty when enabled).
inline Action uniform_guess(const EnvConfig& c, Rng& rng) {
  const std::size_t k = uniform_index(rng, c.secret_domain_size());
  if (k < c.victim_range.count) return Action::guess(c.victim_range.first + k);
  return Action::guess_empty();
}

/// Triggers the victim once, then guesses uniformly at random.
class RandomAgent final : public Agent {
public:
  RandomAgent(const EnvConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {}

  std::string_view name() const override { return "random"; }
  void begin_episode() override { triggered_ = false; }

  Action act(const HistoryWindow&) override {
    if (!triggered_) {
      triggered_ = true;
      return Action::trigger();
    }
    return uniform_guess(config_, rng_);
  }

private:
  EnvConfig config_;
  Rng rng_;
  bool triggered_ = false;
};

namespace detail {

// Shared skeleton of the three-phase scripts: touch every attacker address
// (prime or flush), trigger the victim, re-access every attacker address while
// recording latencies, then guess from the recorded probe results.
class ProbeScript : public Agent {
public:
  ProbeScript(const Environment& env, std::uint64_t seed)
      : config_(env.config()), rng_(seed) {
    for (Address a = config_.attacker_range.first; a < config_.attacker_range.end(); ++a) lines_.push_back(a);
  }

  void begin_episode() override {
    phase_step_ = 0;
    probe_hits_.assign(lines_.size(), false);
  }

  /// Scripted episode length: 2 * |attacker range| + 2.
  std::size_t script_length() const { return 2 * lines_.size() + 2; }

  Action act(const HistoryWindow& window) override {
    const std::size_t n = lines_.size();
    const std::size_t k = phase_step_++;
    if (k < n) return setup_action(lines_[k]);
    if (k == n) return Action::trigger();
    if (k > n + 1) {
      // Result of the previous probe is the latest observation.
      probe_hits_[k - n - 2] = window.latest().latency == LatencyClass::Hit;
    }
    if (k < 2 * n + 1) return Action::access(lines_[k - n - 1]);
    return decide();
  }

protected:
  virtual Action setup_action(Address a) const = 0;
  virtual Action decide() = 0;

  Action fallback() {
    if (config_.allow_empty) return Action::guess_empty();
    return uniform_guess(config_, rng_);
  }

  EnvConfig config_;
  Rng rng_;
  std::vector<Address> lines_;
  std::vector<bool> probe_hits_;
  std::size_t phase_step_ = 0;
};

} // namespace detail

/// Prime+Probe: fill the cache with attacker lines, let the victim run, then
/// re-access them. The victim's line evicts exactly one attacker line; the set
/// of that line identifies the secret.
class PrimeProbeAgent final : public detail::ProbeScript {
public:
  PrimeProbeAgent(const Environment& env, std::uint64_t seed) : ProbeScript(env, seed) {
    const Cache& cache = env.cache();
    // Contention is observed at the last level: a miss there is the only way
    // an attacker line leaves the hierarchy.
    level_ = cache.geometry().depth() - 1;
    for (Address a : lines_) attacker_sets_.push_back(cache.map_set(a, level_, Slice::Attacker));
    for (Address y = config_.victim_range.first; y < config_.victim_range.end(); ++y)
      victim_sets_.push_back({cache.map_set(y, level_, Slice::Victim), y});
    std::sort(victim_sets_.begin(), victim_sets_.end());
  }

  std::string_view name() const override { return "prime_probe"; }

private:
  Action setup_action(Address a) const override { return Action::access(a); }

  Action decide() override {
    std::vector<std::size_t> missed;
    for (std::size_t i = 0; i < lines_.size(); ++i)
      if (!probe_hits_[i]) missed.push_back(attacker_sets_[i]);
    std::sort(missed.begin(), missed.end());
    missed.erase(std::unique(missed.begin(), missed.end()), missed.end());
    if (missed.empty()) return fallback();
    // Several missed sets can only come from noise the script does not model;
    // take the lowest set index.
    for (const auto& [set, addr] : victim_sets_)
      if (set == missed.front()) return Action::guess(addr);
    return fallback();
  }

  std::size_t level_ = 0;
  std::vector<std::size_t> attacker_sets_;
  std::vector<std::pair<std::size_t, Address>> victim_sets_;
};

/// Flush+Reload on shared addresses: flush every line, let the victim run,
/// reload; the one line that hits is the secret.
class FlushReloadAgent final : public detail::ProbeScript {
public:
  FlushReloadAgent(const Environment& env, std::uint64_t seed) : ProbeScript(env, seed) {
    if (!env.config().shared_addresses)
      throw ConfigError("flush_reload requires shared_addresses = true");
  }

  std::string_view name() const override { return "flush_reload"; }

private:
  Action setup_action(Address a) const override { return Action::flush(a); }

  Action decide() override {
    for (std::size_t i = 0; i < lines_.size(); ++i)
      if (probe_hits_[i] && config_.victim_range.contains(lines_[i])) return Action::guess(lines_[i]);
    return fallback();
  }
};

/// Runs one episode of `agent` on `env` (already constructed), optionally with
/// a forced secret, and returns its record.
inline const EpisodeRecord& run_episode(Environment& env, Agent& agent, const std::optional<Secret>& forced = std::nullopt) {
  const HistoryWindow* w = forced ? &env.reset(*forced) : &env.reset();
  agent.begin_episode();
  while (true) {
    auto r = env.step(agent.act(*w));
    w = &r.window;
    if (r.done) break;
  }
  return env.record();
}

} // namespace cachegame
