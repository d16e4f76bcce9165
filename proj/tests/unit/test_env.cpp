#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "cachegame/env.hpp"

using namespace cachegame;

namespace {

EnvConfig l8() { return EnvConfig::for_lines(8); }

double chi_square_uniform(const std::vector<std::size_t>& counts) {
  double n = 0;
  for (auto c : counts) n += static_cast<double>(c);
  const double e = n / static_cast<double>(counts.size());
  double x = 0;
  for (auto c : counts) x += (static_cast<double>(c) - e) * (static_cast<double>(c) - e) / e;
  return x;
}

} // namespace

TEST(EnvConfig, DefaultsForLines) {
  const auto c = EnvConfig::for_lines(8);
  EXPECT_EQ(c.max_steps, 20u);
  EXPECT_EQ(c.window, 20u);
  EXPECT_EQ(c.attacker_range, (AddressRange{8, 8}));
  EXPECT_EQ(c.victim_range, (AddressRange{0, 8}));
  EXPECT_NO_THROW(Environment{c});
}

TEST(EnvConfig, InvalidConfigsAreRejected) {
  auto c = l8();
  c.window = 21;
  EXPECT_THROW(Environment{c}, ConfigError);
  c = l8();
  c.victim_range = {0, 0};
  EXPECT_THROW(Environment{c}, ConfigError);
  c.allow_empty = true; // Empty alone is a valid secret domain.
  EXPECT_NO_THROW(Environment{c});
  c = l8();
  c.attacker_range = {0, 0};
  EXPECT_THROW(Environment{c}, ConfigError);
  c = l8();
  c.attacker_range = {4, 8};
  EXPECT_THROW(Environment{c}, ConfigError);
  c = l8();
  c.reward.step = 0.0;
  EXPECT_THROW(Environment{c}, ConfigError);
}

TEST(ActionSpace, LayoutAndRoundTrip) {
  auto c = l8();
  const ActionSpace s(c);
  EXPECT_EQ(s.size(), 8u + 8u + 1u + 8u + 1u);
  for (std::size_t id = 0; id < s.size(); ++id) {
    EXPECT_EQ(s.id(s.action(id)), id);
    EXPECT_EQ(Action::parse(s.action(id).to_string()), s.action(id));
  }
  EXPECT_FALSE(s.legal(s.guess_empty_id()));
  c.allow_empty = true;
  EXPECT_TRUE(ActionSpace(c).legal(s.guess_empty_id()));
  EXPECT_THROW(s.id(Action::guess(9)), DomainError);
  EXPECT_THROW(Action::parse("access:x"), DomainError);
}

TEST(Environment, ResetGivesPaddedWindow) {
  Environment env(l8());
  const auto& w = env.reset();
  ASSERT_EQ(w.size(), 20u);
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(w[i].latency, LatencyClass::NA);
    EXPECT_FALSE(w[i].victim_triggered);
    EXPECT_TRUE(w[i].is_padding());
  }
}

TEST(Environment, SecretsAreUniform) {
  Environment env(l8());
  std::vector<std::size_t> counts(8, 0);
  for (int i = 0; i < 10000; ++i) {
    env.reset();
    ++counts[*env.secret()];
  }
  // Each count within 3 sigma of 1250, and chi-square below the 0.01 critical
  // value for 7 degrees of freedom.
  const double sigma = std::sqrt(10000 * 0.125 * 0.875);
  for (auto c : counts) EXPECT_LT(std::abs(static_cast<double>(c) - 1250.0), 3 * sigma);
  EXPECT_LT(chi_square_uniform(counts), 18.475);
}

TEST(Environment, SecretsIncludeEmptyWhenEnabled) {
  auto c = l8();
  c.allow_empty = true;
  Environment env(c);
  std::size_t empty = 0;
  for (int i = 0; i < 9000; ++i) {
    env.reset();
    empty += !env.secret().has_value();
  }
  EXPECT_NEAR(static_cast<double>(empty), 1000.0, 3 * std::sqrt(9000 * (1.0 / 9) * (8.0 / 9)));
}

TEST(Environment, SameSeedSameSecrets) {
  Environment a(l8()), b(l8());
  for (int i = 0; i < 100; ++i) {
    a.reset();
    b.reset();
    EXPECT_EQ(a.secret(), b.secret());
  }
}

TEST(Environment, PrimeProbeEpisodeRewardForEverySecret) {
  for (Address s = 0; s < 8; ++s) {
    Environment env(l8());
    env.reset(s);
    for (Address a = 8; a < 16; ++a) env.step(Action::access(a));
    env.step(Action::trigger());
    std::vector<Address> missed;
    for (Address a = 8; a < 16; ++a)
      if (env.step(Action::access(a)).info.latency == LatencyClass::Miss) missed.push_back(a);
    ASSERT_EQ(missed.size(), 1u);
    const Address guess = missed.front() - 8; // set k holds victim address k
    const auto r = env.step(Action::guess(guess));
    EXPECT_TRUE(r.done);
    EXPECT_EQ(guess, s);
    EXPECT_EQ(env.record().outcome, Outcome::Correct);
    EXPECT_NEAR(env.record().total_return, 1.0 - 0.01 * 18, 1e-12);
  }
}

TEST(Environment, ImmediateWrongGuess) {
  Environment env(l8());
  env.reset(Address{2});
  const auto r = env.step(Action::guess(5));
  EXPECT_TRUE(r.done);
  EXPECT_DOUBLE_EQ(r.reward, -1.0 - 0.01);
  EXPECT_EQ(env.record().outcome, Outcome::Wrong);
}

TEST(Environment, CorrectGuessAfterFourActions) {
  Environment env(l8());
  env.reset(Address{4});
  env.step(Action::access(8));
  env.step(Action::flush(9));
  env.step(Action::trigger());
  env.step(Action::access(12));
  env.step(Action::guess(4));
  EXPECT_NEAR(env.record().total_return, 0.95, 1e-12);
}

TEST(Environment, EvaluateGuess) {
  auto c = l8();
  c.allow_empty = true;
  Environment env(c);
  env.reset(Address{3});
  EXPECT_TRUE(env.evaluate_guess(Address{3}));
  EXPECT_FALSE(env.evaluate_guess(Address{4}));
  env.reset(std::nullopt);
  EXPECT_TRUE(env.evaluate_guess(std::nullopt));
}

TEST(Environment, Errors) {
  Environment env(l8());
  EXPECT_THROW(env.step(Action::trigger()), StateError);
  env.reset();
  EXPECT_THROW(env.step(Action::guess(8)), DomainError);
  EXPECT_THROW(env.step(Action::access(2)), DomainError);
  EXPECT_THROW(env.step(Action::guess_empty()), DomainError);
  env.step(Action::guess(0));
  EXPECT_THROW(env.step(Action::trigger()), StateError);
  EXPECT_THROW(env.reset(Address{8}), DomainError);
  EXPECT_THROW(env.reset(std::nullopt), DomainError);
}

TEST(Environment, TruncationCountsAsWrongGuess) {
  Environment env(l8());
  env.reset(Address{0});
  bool done = env.step(Action::trigger()).done;
  for (int i = 1; i < 20; ++i) done = env.step(Action::access(8)).done;
  EXPECT_TRUE(done);
  EXPECT_EQ(env.record().outcome, Outcome::Truncated);
  EXPECT_EQ(env.record().length(), 20u);
  EXPECT_NEAR(env.record().total_return, -1.0 - 0.01 * 20, 1e-12);
  EXPECT_EQ(env.record().guesses, 1u);
}

TEST(Environment, MultiGuessContinuesAfterWrongGuess) {
  auto c = l8();
  c.multi_guess = true;
  Environment env(c);
  env.reset(Address{6});
  EXPECT_FALSE(env.step(Action::guess(1)).done);
  EXPECT_FALSE(env.step(Action::guess(1)).done); // repeats are allowed
  EXPECT_TRUE(env.step(Action::guess(6)).done);
  EXPECT_EQ(env.record().outcome, Outcome::Correct);
  EXPECT_EQ(env.record().guesses, 3u);
  EXPECT_EQ(env.record().correct_guesses, 1u);
  EXPECT_NEAR(env.record().total_return, -2.0 + 1.0 - 0.03, 1e-12);
}

TEST(Environment, MultiGuessWrongGuessOnFinalStepIsPenalizedOnce) {
  auto c = l8();
  c.multi_guess = true;
  Environment env(c);
  env.reset(Address{6});
  for (int i = 0; i < 19; ++i) env.step(Action::access(8));
  const auto r = env.step(Action::guess(1));
  EXPECT_TRUE(r.done);
  EXPECT_EQ(env.record().outcome, Outcome::Truncated);
  EXPECT_DOUBLE_EQ(r.reward, -1.0 - 0.01);
  EXPECT_EQ(env.record().guesses, 1u);
}

TEST(Environment, ObservationFields) {
  Environment env(l8());
  env.reset(Address{1});
  env.step(Action::flush(9));
  env.step(Action::trigger());
  env.step(Action::access(9));
  const auto& w = env.window();
  const auto& a = w[w.size() - 3];
  const auto& b = w[w.size() - 2];
  const auto& c = w[w.size() - 1];
  EXPECT_EQ(a.latency, LatencyClass::NA);
  EXPECT_FALSE(a.victim_triggered);
  EXPECT_EQ(b.latency, LatencyClass::NA);
  EXPECT_TRUE(b.victim_triggered);
  EXPECT_EQ(c.latency, LatencyClass::Miss);
  EXPECT_TRUE(c.victim_triggered);
  EXPECT_EQ(c.step_index, 2u);
  EXPECT_EQ(w.padding(), w.size() - 3);
}

TEST(Environment, EmptySecretTriggerTouchesNothing) {
  auto c = l8();
  c.allow_empty = true;
  Environment env(c);
  env.reset(std::nullopt);
  for (Address a = 8; a < 16; ++a) env.step(Action::access(a));
  env.step(Action::trigger());
  for (Address a = 8; a < 16; ++a) EXPECT_EQ(env.step(Action::access(a)).info.latency, LatencyClass::Hit);
}

TEST(Encoding, InitialWindowIsAllPadding) {
  Environment env(l8());
  const auto f = encode_window(env.reset(), env.actions().size(), 20);
  EXPECT_EQ(f.rows, 20u);
  EXPECT_EQ(f.cols, feature_dim(env.actions().size()));
  EXPECT_EQ(f.first_valid, 20u);
  for (std::size_t r = 0; r < f.rows; ++r) {
    EXPECT_EQ(f.at(r, 2), 1.0f);
    EXPECT_EQ(f.at(r, f.cols - 1), 0.0f);
  }
}

TEST(Encoding, StepIndexIsNormalized) {
  HistoryWindow w(3);
  w.push(Observation{LatencyClass::Hit, 0, 19, true});
  const auto f = encode_window(w, 4, 20);
  EXPECT_FLOAT_EQ(f.at(2, 3 + 4), 19.0f / 20.0f);
  EXPECT_EQ(f.at(2, 3 + 4 + 1), 1.0f);
  EXPECT_EQ(f.at(2, 0), 1.0f);
  EXPECT_EQ(f.at(2, 3 + 0), 1.0f);
}

TEST(Encoding, InjectiveOnTinyConfig) {
  // W = 2, two attacker addresses, one victim address: enumerate every
  // reachable window by brute force and check encodings are distinct.
  EnvConfig c;
  c.geometry = CacheGeometry::direct_mapped(2);
  c.attacker_range = {2, 2};
  c.victim_range = {0, 1};
  c.max_steps = 2;
  c.window = 2;
  const ActionSpace space(c);
  std::map<std::vector<float>, HistoryWindow> seen;
  std::set<std::vector<int>> windows;
  const std::size_t n = space.size();
  const LatencyClass lats[] = {LatencyClass::Hit, LatencyClass::Miss, LatencyClass::NA};
  std::vector<Observation> pool{Observation{}};
  for (std::size_t a = 0; a < n; ++a)
    for (auto l : lats)
      for (std::size_t step = 0; step < 2; ++step)
        for (bool t : {false, true}) pool.push_back(Observation{l, static_cast<int>(a), step, t});
  for (const auto& o1 : pool)
    for (const auto& o2 : pool) {
      if (o2.is_padding() && !o1.is_padding()) continue;
      if (o1.is_padding() && o2.is_padding()) {
        HistoryWindow w(2);
        const auto f = encode_window(w, n, 2);
        seen.emplace(f.data, w);
        continue;
      }
      HistoryWindow w(2);
      if (!o1.is_padding()) w.push(o1);
      w.push(o2);
      const auto f = encode_window(w, n, 2);
      const auto [it, fresh] = seen.emplace(f.data, w);
      if (!fresh) ASSERT_EQ(it->second, w) << "two windows share an encoding";
    }
  EXPECT_GT(seen.size(), pool.size());
}

TEST(EnvProperty, ReturnEqualsTerminalPlusStepPenalties) {
  Rng rng(11);
  Environment env(l8());
  for (int ep = 0; ep < 500; ++ep) {
    env.reset();
    bool done = env.step(uniform_index(rng, 17)).done;
    while (!done) done = env.step(uniform_index(rng, 25)).done;
    const auto& rec = env.record();
    const double terminal = rec.correct() ? 1.0 : -1.0;
    EXPECT_NEAR(rec.total_return, terminal - 0.01 * static_cast<double>(rec.length()), 1e-9);
    EXPECT_LE(rec.length(), 20u);
    EXPECT_EQ(rec.correct(), rec.steps.back().action == Action::guess(*rec.secret));
  }
}

TEST(EnvProperty, ReplayReproducesObservationsAndRewards) {
  Rng rng(12);
  for (int ep = 0; ep < 100; ++ep) {
    Environment env(l8());
    env.reset();
    bool done = env.step(uniform_index(rng, 17)).done;
    while (!done) done = env.step(uniform_index(rng, 25)).done;
    const EpisodeRecord rec = env.record();
    Environment again(l8());
    again.reset(rec.secret);
    for (const auto& s : rec.steps) again.step(s.action);
    EXPECT_EQ(again.record(), rec);
  }
}

TEST(EnvProperty, FullPartitionHidesTheSecret) {
  auto c = l8();
  c.defense.partition = true;
  Rng rng(13);
  for (int seq = 0; seq < 200; ++seq) {
    std::vector<std::size_t> actions;
    for (int i = 0; i < 19; ++i) actions.push_back(uniform_index(rng, 17));
    std::optional<std::vector<LatencyClass>> first;
    for (Address s = 0; s < 8; ++s) {
      Environment env(c);
      env.reset(s);
      std::vector<LatencyClass> obs;
      for (auto a : actions) obs.push_back(env.step(a).info.latency);
      if (!first) first = obs;
      ASSERT_EQ(obs, *first) << "secret " << s;
    }
  }
}

TEST(EnvProperty, TriggerOnDisjointSetsIsInvisible) {
  // Victim addresses 0..3 map to sets 0..3; attacker touches only 12..15,
  // which map to sets 4..7.
  auto c = l8();
  c.victim_range = {0, 4};
  Rng rng(14);
  for (int seq = 0; seq < 100; ++seq) {
    std::vector<Address> probes;
    for (int i = 0; i < 10; ++i) probes.push_back(12 + uniform_index(rng, 4));
    for (Address s = 0; s < 4; ++s) {
      Environment with(c), without(c);
      with.reset(s);
      without.reset(s);
      for (std::size_t i = 0; i < probes.size(); ++i) {
        if (i == 4) with.step(Action::trigger());
        ASSERT_EQ(with.step(Action::access(probes[i])).info.latency,
                  without.step(Action::access(probes[i])).info.latency);
      }
    }
  }
}
