#include <gtest/gtest.h>

#include <cmath>

#include "cachegame/agents.hpp"
#include "cachegame/ppo.hpp"

using namespace cachegame;

namespace {

constexpr std::size_t kLines[] = {8, 16, 24, 32, 40};

}

TEST(RandomAgent, TriggersThenGuesses) {
  Environment env(EnvConfig::for_lines(8));
  RandomAgent agent(env.config(), 1);
  const auto& rec = run_episode(env, agent);
  ASSERT_EQ(rec.length(), 2u);
  EXPECT_EQ(rec.steps[0].action, Action::trigger());
  EXPECT_EQ(rec.steps[1].action.kind, ActionKind::Guess);
}

TEST(RandomAgent, SuccessNearChance) {
  for (std::size_t L : kLines) {
    const auto cfg = EnvConfig::for_lines(L);
    RandomAgent agent(cfg, 100 + L);
    const auto r = evaluate(agent, cfg, 10000);
    const double p = 1.0 / static_cast<double>(L);
    EXPECT_LT(std::abs(r.success_rate - p), 3 * std::sqrt(p * (1 - p) / 10000.0)) << "L=" << L;
  }
}

TEST(PrimeProbe, ExactForEverySecretAndSize) {
  for (std::size_t L : kLines) {
    const auto cfg = EnvConfig::for_lines(L);
    Environment env(cfg);
    PrimeProbeAgent agent(env, 0);
    for (Address s = 0; s < L; ++s) {
      const auto& rec = run_episode(env, agent, Secret{s});
      ASSERT_EQ(rec.outcome, Outcome::Correct) << "L=" << L << " secret " << s;
      ASSERT_EQ(rec.length(), 2 * L + 2);
      ASSERT_LE(rec.length(), cfg.max_steps);
      EXPECT_EQ(rec.steps.back().action, Action::guess(s));
    }
  }
}

TEST(PrimeProbe, SecretFiveOnEightLines) {
  const auto cfg = EnvConfig::for_lines(8);
  Environment env(cfg);
  PrimeProbeAgent agent(env, 0);
  const auto& rec = run_episode(env, agent, Secret{5});
  EXPECT_EQ(rec.steps.back().action, Action::guess(5));
  EXPECT_EQ(rec.outcome, Outcome::Correct);
}

TEST(PrimeProbe, PartitionedCacheFallsBackToChance) {
  auto cfg = EnvConfig::for_lines(8);
  cfg.defense.partition = true;
  Environment env(cfg);
  PrimeProbeAgent agent(env, 3);
  // Exhaustive sweep repeated to average the uniform fallback.
  std::size_t correct = 0, total = 0;
  for (int rep = 0; rep < 500; ++rep)
    for (Address s = 0; s < 8; ++s) {
      correct += run_episode(env, agent, Secret{s}).correct();
      ++total;
    }
  EXPECT_NEAR(static_cast<double>(correct) / static_cast<double>(total), 0.125, 0.02);
}

TEST(PrimeProbe, EmptySecretGuessesEmpty) {
  auto cfg = EnvConfig::for_lines(8);
  cfg.allow_empty = true;
  Environment env(cfg);
  PrimeProbeAgent agent(env, 0);
  const auto& rec = run_episode(env, agent, Secret{});
  EXPECT_EQ(rec.steps.back().action, Action::guess_empty());
  EXPECT_TRUE(rec.correct());
}

TEST(PrimeProbe, WorksOnThreeLevelHierarchy) {
  // 32 last-level sets with 8 ways: 256 attacker lines would not fit the step
  // budget, so use a hierarchy whose last level the attacker can cover.
  EnvConfig cfg;
  cfg.geometry = CacheGeometry{{LevelGeometry{4, 1, 1}, LevelGeometry{8, 1, 10}}, true, ReplacementPolicy::Lru};
  cfg.victim_range = {0, 8};
  cfg.attacker_range = {8, 8};
  cfg.max_steps = cfg.window = 20;
  Environment env(cfg);
  PrimeProbeAgent agent(env, 0);
  for (Address s = 0; s < 8; ++s) EXPECT_TRUE(run_episode(env, agent, Secret{s}).correct()) << s;
}

TEST(FlushReload, ExactOnSharedLines) {
  const auto cfg = EnvConfig::for_lines(8, true);
  Environment env(cfg);
  FlushReloadAgent agent(env, 0);
  for (Address s = 0; s < 8; ++s) {
    const auto& rec = run_episode(env, agent, Secret{s});
    EXPECT_TRUE(rec.correct()) << s;
    EXPECT_EQ(rec.length(), 18u);
  }
}

TEST(FlushReload, EmptySecret) {
  auto cfg = EnvConfig::for_lines(8, true);
  cfg.allow_empty = true;
  Environment env(cfg);
  FlushReloadAgent agent(env, 0);
  const auto& rec = run_episode(env, agent, Secret{});
  EXPECT_EQ(rec.steps.back().action, Action::guess_empty());
  EXPECT_TRUE(rec.correct());
}

TEST(FlushReload, NeedsSharedAddresses) {
  Environment env(EnvConfig::for_lines(8));
  EXPECT_THROW(FlushReloadAgent(env, 0), ConfigError);
}

TEST(AgentsProperty, ScriptsOnlyEmitLegalActions) {
  for (bool shared : {false, true}) {
    auto cfg = EnvConfig::for_lines(16, shared);
    Environment env(cfg);
    std::vector<std::unique_ptr<Agent>> agents;
    agents.push_back(std::make_unique<RandomAgent>(cfg, 1));
    agents.push_back(std::make_unique<PrimeProbeAgent>(env, 1));
    if (shared) agents.push_back(std::make_unique<FlushReloadAgent>(env, 1));
    for (auto& a : agents)
      for (int ep = 0; ep < 50; ++ep) EXPECT_NO_THROW(run_episode(env, *a)) << a->name();
  }
}
