#include <gtest/gtest.h>

#include <cmath>

#include "cachegame/ppo.hpp"
#include "fd_check.hpp"

using namespace cachegame;

namespace {

FeatureSequence some_window(const EnvConfig& cfg, std::size_t steps, std::uint64_t seed) {
  Environment env(cfg);
  env.reset();
  Rng rng(seed);
  for (std::size_t s = 0; s < steps; ++s) env.step(uniform_index(rng, env.actions().trigger_id() + 1));
  return encode_window(env.window(), env.actions().size(), cfg.max_steps);
}

} // namespace

TEST(Policy, DistributionIsNormalized) {
  const auto cfg = EnvConfig::for_lines(8);
  const auto net = make_policy<float>(cfg, {}, 1);
  for (std::size_t steps = 0; steps < 20; steps += 3) {
    const auto out = net.forward(some_window(cfg, steps, steps));
    double sum = 0;
    for (float p : out.dist.probs) {
      EXPECT_GE(p, 0.0f);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_TRUE(std::isfinite(out.value));
  }
}

TEST(Policy, DisabledGuessEmptyHasZeroProbability) {
  const auto cfg = EnvConfig::for_lines(8);
  const ActionSpace space(cfg);
  const auto net = make_policy<float>(cfg, {}, 2);
  Rng rng(3);
  const auto out = net.forward(some_window(cfg, 5, 1));
  EXPECT_EQ(out.dist.probs[space.guess_empty_id()], 0.0f);
  for (int i = 0; i < 5000; ++i) EXPECT_NE(out.dist.sample(rng), space.guess_empty_id());
}

TEST(Policy, ForwardIsDeterministic) {
  const auto cfg = EnvConfig::for_lines(8);
  const auto net = make_policy<float>(cfg, {}, 4);
  const auto w = some_window(cfg, 7, 9);
  const auto a = net.forward(w);
  const auto b = net.forward(w);
  EXPECT_EQ(a.dist.probs, b.dist.probs);
  EXPECT_EQ(a.value, b.value);
  const auto same = make_policy<float>(cfg, {}, 4);
  EXPECT_EQ(same.forward(w).dist.probs, a.dist.probs);
}

TEST(Policy, ShapeMismatchIsContractError) {
  const auto net = make_policy<float>(EnvConfig::for_lines(8), {}, 5);
  const auto other = some_window(EnvConfig::for_lines(4), 2, 1);
  EXPECT_THROW(net.forward(other), ContractError);
}

TEST(Policy, PaddingRowsAreIgnored) {
  // The same history in a wider window gives the same output.
  auto narrow = fdcheck::tiny_env();
  auto wide = narrow;
  wide.max_steps = 6;
  wide.window = 6;
  narrow.window = 4;
  const auto net = make_policy<double>(wide, fdcheck::width8(), 6);
  Environment a(narrow), b(wide);
  a.reset(Address{1});
  b.reset(Address{1});
  for (std::size_t id : {0u, 4u, 2u}) {
    a.step(id);
    b.step(id);
  }
  const auto fa = encode_window(a.window(), a.actions().size(), 6);
  const auto fb = encode_window(b.window(), b.actions().size(), 6);
  const auto oa = net.forward(fa);
  const auto ob = net.forward(fb);
  for (std::size_t i = 0; i < oa.dist.probs.size(); ++i) EXPECT_NEAR(oa.dist.probs[i], ob.dist.probs[i], 1e-12);
  EXPECT_NEAR(oa.value, ob.value, 1e-12);
}

TEST(Policy, GuessBiasLowersInitialGuessProbability) {
  const auto cfg = EnvConfig::for_lines(8);
  const ActionSpace space(cfg);
  PolicyConfig arch;
  arch.guess_logit_bias = 3.0;
  const auto out = make_policy<float>(cfg, arch, 7).forward(some_window(cfg, 0, 0));
  EXPECT_LT(out.dist.probs[space.guess_offset()], out.dist.probs[space.trigger_id()] / 10);
}

TEST(Policy, ArgmaxBreaksTiesTowardLowestId) {
  ActionDistribution<float> d;
  d.probs = {0.25f, 0.5f, 0.0f, 0.5f};
  d.log_probs = {0, 0, 0, 0};
  d.legal = {true, true, false, true};
  EXPECT_EQ(d.argmax(), 1u);
}

TEST(Policy, InvalidArchitectureIsRejected) {
  PolicyConfig p;
  p.width = 10;
  p.heads = 4;
  EXPECT_THROW(make_policy<float>(EnvConfig::for_lines(8), p, 0), ConfigError);
}

TEST(Policy, SetParamsRoundTrip) {
  const auto cfg = EnvConfig::for_lines(8);
  const auto a = make_policy<float>(cfg, {}, 1);
  auto b = make_policy<float>(cfg, {}, 2);
  b.set_params(a.params());
  const auto w = some_window(cfg, 6, 3);
  EXPECT_EQ(a.forward(w).dist.probs, b.forward(w).dist.probs);
  std::vector<float> wrong(3);
  EXPECT_THROW(b.set_params(std::span<const float>(wrong)), ContractError);
}

TEST(PolicyGradient, MatchesCentralDifferences) {
  const auto cfg = fdcheck::tiny_env();
  auto net = make_policy<double>(cfg, fdcheck::width8(), 11);
  Rng rng(12);
  const LossCoefficients k{0.2, 0.5, 0.01};
  for (int batch = 0; batch < 5; ++batch) {
    const auto b = fdcheck::random_batch(net, cfg, 4, rng);
    const auto r = fdcheck::check(net, b, k);
    EXPECT_LT(r.relative_error, 1e-4) << "batch " << batch;
    EXPECT_GT(r.grad_norm, 0.0);
  }
}

TEST(PolicyGradient, ValueOnlyAndEntropyOnlyTerms) {
  const auto cfg = fdcheck::tiny_env();
  auto net = make_policy<double>(cfg, fdcheck::width8(), 13);
  Rng rng(14);
  const auto b = fdcheck::random_batch(net, cfg, 3, rng);
  EXPECT_LT(fdcheck::check(net, b, {0.2, 1.0, 0.0}).relative_error, 1e-4);
  EXPECT_LT(fdcheck::check(net, b, {0.2, 0.0, 1.0}).relative_error, 1e-4);
}
