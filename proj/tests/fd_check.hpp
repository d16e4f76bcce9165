#pragma once

// Central-difference check of the PPO minibatch loss gradient on a small
// double-precision network.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cachegame/env.hpp"
#include "cachegame/ppo.hpp"

namespace fdcheck {

using namespace cachegame;

struct Batch {
  std::vector<FeatureSequence> windows;
  std::vector<LossSample> samples;
};

/// Random reachable windows from a small environment, random actions,
/// advantages, returns, and old log-probs offset from the current policy so
/// that some ratios fall outside the clip range.
inline Batch random_batch(const PolicyNet<double>& net, const EnvConfig& cfg, std::size_t n, Rng& rng) {
  Batch b;
  Environment env(cfg);
  const ActionSpace& space = env.actions();
  env.reset();
  b.windows.reserve(n);
  while (b.windows.size() < n) {
    const std::size_t steps = uniform_index(rng, cfg.max_steps);
    env.reset();
    for (std::size_t s = 0; s < steps && env.active(); ++s) env.step(uniform_index(rng, space.trigger_id() + 1));
    if (!env.active()) continue;
    b.windows.push_back(encode_window(env.window(), space.size(), cfg.max_steps));
  }
  for (const auto& w : b.windows) {
    const auto out = net.forward(w);
    std::size_t a = uniform_index(rng, space.size());
    while (!out.dist.legal[a]) a = uniform_index(rng, space.size());
    LossSample s;
    s.window = &w;
    s.action = a;
    s.old_log_prob = out.dist.log_probs[a] + 0.4 * standard_normal(rng);
    s.advantage = standard_normal(rng);
    s.ret = standard_normal(rng);
    b.samples.push_back(s);
  }
  return b;
}

struct Result {
  double relative_error = 0;
  double grad_norm = 0;
};

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all
/// parameters.
inline Result check(PolicyNet<double>& net, const Batch& b, const LossCoefficients& k, double h = 1e-6) {
  net.zero_grad();
  minibatch_loss<double>(net, b.samples, k, true);
  const std::vector<double> analytic(net.grads().begin(), net.grads().end());
  std::vector<double> numeric(analytic.size());
  auto params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = minibatch_loss<double>(net, b.samples, k, false).total;
    params[i] = keep - h;
    const double down = minibatch_loss<double>(net, b.samples, k, false).total;
    params[i] = keep;
    numeric[i] = (up - down) / (2 * h);
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  Result r;
  r.grad_norm = std::sqrt(na);
  r.relative_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return r;
}

/// The tiny environment used for gradient checks: 2 lines, T = W = 6,
/// Empty enabled so the full action set is legal.
inline EnvConfig tiny_env() {
  auto c = EnvConfig::for_lines(2);
  c.allow_empty = true;
  c.max_steps = c.window = 6;
  return c;
}

inline PolicyConfig width8() {
  PolicyConfig p;
  p.width = 8;
  p.heads = 2;
  p.depth = 2;
  p.ffn_dim = 16;
  p.guess_logit_bias = 0.5;
  return p;
}

} // namespace fdcheck
