#pragma once

// PPO learner: rollout collection over independent environments, GAE,
// clipped-surrogate updates with Adam, greedy evaluation and the training
// loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cachegame/agents.hpp"
#include "cachegame/env.hpp"
#include "cachegame/errors.hpp"
#include "cachegame/policy.hpp"
#include "cachegame/rng.hpp"

namespace cachegame {

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double learning_rate = 3e-4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double adam_eps = 1e-5;
  std::size_t num_envs = 8;
  std::size_t horizon = 128;
  std::size_t minibatch = 256;
  std::size_t epochs = 4;
  /// Training stops at whichever budget is reached first.
  std::size_t total_episodes = 1'000'000;
  std::size_t total_steps = 200'000;
  /// Greedy evaluation every `eval_interval` updates (0 disables).
  std::size_t eval_interval = 10;
  std::size_t eval_episodes = 200;
  /// Stop early once a periodic greedy evaluation reaches this success rate
  /// (0 disables).
  double target_success = 0.0;
  /// Warn when the rolling training success stays below chance for
  /// `divergence_patience` episodes after `divergence_warmup` env steps.
  std::size_t divergence_warmup = 100'000;
  std::size_t divergence_patience = 2000;
  std::uint64_t seed = 0;
  PolicyConfig policy;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("train.gamma must lie in [0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("train.gae_lambda must lie in [0, 1]");
    if (!(clip > 0.0)) throw ConfigError("train.clip must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (!(entropy_coef >= 0.0) || !(value_coef >= 0.0)) throw ConfigError("loss coefficients must be non-negative");
    if (!(max_grad_norm > 0.0) || !(adam_eps > 0.0)) throw ConfigError("max_grad_norm and adam_eps must be positive");
    if (num_envs == 0 || horizon == 0 || minibatch == 0 || epochs == 0 || total_episodes == 0 || total_steps == 0 ||
        eval_episodes == 0 || divergence_patience == 0)
      throw ConfigError("train counts must be positive");
    if (!(target_success >= 0.0 && target_success <= 1.0)) throw ConfigError("train.target_success must lie in [0, 1]");
  }
};

/// Fills the environment-dependent dimensions of an architecture config.
inline PolicyConfig policy_config_for(const EnvConfig& env, PolicyConfig arch = {}) {
  const ActionSpace space(env);
  arch.num_actions = space.size();
  arch.input_dim = feature_dim(space.size());
  arch.guess_begin = space.guess_offset();
  return arch;
}

template <typename S = float>
PolicyNet<S> make_policy(const EnvConfig& env, const PolicyConfig& arch, std::uint64_t seed) {
  return PolicyNet<S>(policy_config_for(env, arch), ActionSpace(env).legal_mask(), seed);
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename S>
class Adam {
public:
  Adam() = default;
  Adam(std::size_t n, double lr, double eps, double beta1 = 0.9, double beta2 = 0.999)
      : lr_(lr), eps_(eps), b1_(beta1), b2_(beta2), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<S> params, std::span<const S> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] = static_cast<S>(static_cast<double>(params[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }

  std::uint64_t steps() const { return t_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }
  void restore(std::uint64_t t, std::vector<double> m, std::vector<double> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ContractError("optimizer state size mismatch");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

private:
  double lr_ = 3e-4, eps_ = 1e-5, b1_ = 0.9, b2_ = 0.999;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

// ---------------------------------------------------------------------------
// Metrics

struct EpisodeStat {
  std::size_t episode = 0;
  bool success = false;
  std::size_t length = 0;
  double ret = 0.0;
  bool operator==(const EpisodeStat&) const = default;
};

struct LossReport {
  double total = 0, policy = 0, value = 0, entropy = 0, approx_kl = 0, clip_fraction = 0;
};

struct MetricsLog {
  std::vector<EpisodeStat> episodes;

  void add(bool success, std::size_t length, double ret) {
    episodes.push_back({episodes.size(), success, length, ret});
  }

  /// Mean episode length of consecutive buckets of `bucket` episodes; the last
  /// bucket may be partial.
  std::vector<double> length_buckets(std::size_t bucket = 100) const {
    std::vector<double> out;
    for (std::size_t i = 0; i < episodes.size(); i += bucket) {
      const std::size_t end = std::min(episodes.size(), i + bucket);
      double sum = 0;
      for (std::size_t j = i; j < end; ++j) sum += static_cast<double>(episodes[j].length);
      out.push_back(sum / static_cast<double>(end - i));
    }
    return out;
  }

  double success_rate(std::size_t last_n) const {
    const std::size_t n = std::min(last_n, episodes.size());
    if (n == 0) return 0.0;
    std::size_t ok = 0;
    for (std::size_t j = episodes.size() - n; j < episodes.size(); ++j) ok += episodes[j].success;
    return static_cast<double>(ok) / static_cast<double>(n);
  }
};

// ---------------------------------------------------------------------------
// Rollouts

struct Transition {
  FeatureSequence window;
  std::size_t action = 0;
  double log_prob = 0;
  double value = 0;
  double reward = 0;
  bool done = false;
  bool operator==(const Transition&) const = default;
};

/// Transitions are stored step-major: index t * num_envs + e.
struct RolloutBatch {
  std::size_t num_envs = 0;
  std::size_t horizon = 0;
  std::vector<Transition> steps;
  std::vector<double> bootstrap_values;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return steps.size(); }
  const Transition& at(std::size_t t, std::size_t e) const { return steps[t * num_envs + e]; }
};

/// Generalized advantage estimation. Episode ends are true terminals; the
/// final step of each env is bootstrapped from `bootstrap_values`.
inline void compute_gae(RolloutBatch& b, double gamma, double lambda) {
  b.advantages.assign(b.size(), 0.0);
  b.returns.assign(b.size(), 0.0);
  for (std::size_t e = 0; e < b.num_envs; ++e) {
    double next_value = b.bootstrap_values.at(e);
    double running = 0.0;
    for (std::size_t t = b.horizon; t-- > 0;) {
      const Transition& tr = b.at(t, e);
      const double live = tr.done ? 0.0 : 1.0;
      const double delta = tr.reward + gamma * next_value * live - tr.value;
      running = delta + gamma * lambda * live * running;
      b.advantages[t * b.num_envs + e] = running;
      b.returns[t * b.num_envs + e] = running + tr.value;
      next_value = tr.value;
    }
  }
}

template <typename S>
FeatureSequence encode_for(const Environment& env) {
  return encode_window(env.window(), env.actions().size(), env.config().max_steps);
}

/// Steps every environment `horizon` times with actions sampled from
/// `policy`. Environments must have an active episode; finished episodes are
/// reset immediately and their statistics appended to `metrics`.
template <typename S>
RolloutBatch collect_rollouts(const PolicyNet<S>& policy, std::vector<Environment>& envs, std::size_t horizon,
                              Rng& rng, MetricsLog* metrics = nullptr) {
  RolloutBatch b;
  b.num_envs = envs.size();
  b.horizon = horizon;
  b.steps.reserve(envs.size() * horizon);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (auto& env : envs) {
      if (!env.active()) throw StateError("collect_rollouts needs active environments");
      Transition tr;
      tr.window = encode_for<S>(env);
      const auto out = policy.forward(tr.window);
      tr.action = out.dist.sample(rng);
      tr.log_prob = static_cast<double>(out.dist.log_probs[tr.action]);
      tr.value = static_cast<double>(out.value);
      const auto r = env.step(tr.action);
      tr.reward = r.reward;
      tr.done = r.done;
      if (r.done) {
        const auto& rec = env.record();
        if (metrics) metrics->add(rec.correct(), rec.length(), rec.total_return);
        env.reset();
      }
      b.steps.push_back(std::move(tr));
    }
  }
  for (auto& env : envs) b.bootstrap_values.push_back(static_cast<double>(policy.forward(encode_for<S>(env)).value));
  return b;
}

// ---------------------------------------------------------------------------
// Loss

struct LossCoefficients {
  double clip = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
};

struct LossSample {
  const FeatureSequence* window = nullptr;
  std::size_t action = 0;
  double old_log_prob = 0;
  double advantage = 0;
  double ret = 0;
};

template <typename S>
struct SampleTerms {
  S ratio = 0;
  S unclipped = 0; // r * A
  S clipped = 0;   // clip(r, 1 - eps, 1 + eps) * A
  S surrogate = 0; // min of the two
  S value = 0;
  S entropy = 0;
  S log_prob = 0;
};

template <typename S>
struct MinibatchLoss {
  S total = 0;
  S policy = 0;
  S value = 0;
  S entropy = 0;
  S approx_kl = 0;
  S clip_fraction = 0;
  std::vector<SampleTerms<S>> terms;
};

/// Mean over the minibatch of
///   -min(r A, clip(r) A) + value_coef * 0.5 (v - R)^2 - entropy_coef * H.
/// With `accumulate`, adds d(total)/d(params) into the policy's gradients.
template <typename S>
MinibatchLoss<S> minibatch_loss(PolicyNet<S>& net, std::span<const LossSample> samples, const LossCoefficients& k,
                                bool accumulate) {
  MinibatchLoss<S> out;
  if (samples.empty()) return out;
  const S inv_n = S(1) / static_cast<S>(samples.size());
  const S lo = static_cast<S>(1.0 - k.clip);
  const S hi = static_cast<S>(1.0 + k.clip);
  typename PolicyNet<S>::Workspace ws;
  std::vector<S> dlogits(net.config().num_actions);
  out.terms.reserve(samples.size());
  for (const auto& smp : samples) {
    const auto fwd = net.forward(*smp.window, ws);
    const auto& dist = fwd.dist;
    SampleTerms<S> t;
    t.log_prob = dist.log_probs.at(smp.action);
    const S adv = static_cast<S>(smp.advantage);
    t.ratio = std::exp(t.log_prob - static_cast<S>(smp.old_log_prob));
    t.unclipped = t.ratio * adv;
    t.clipped = std::clamp(t.ratio, lo, hi) * adv;
    t.surrogate = std::min(t.unclipped, t.clipped);
    t.value = fwd.value;
    t.entropy = dist.entropy();
    const S verr = fwd.value - static_cast<S>(smp.ret);
    out.policy -= t.surrogate * inv_n;
    out.value += S(0.5) * verr * verr * inv_n;
    out.entropy += t.entropy * inv_n;
    out.approx_kl += ((t.ratio - S(1)) - (t.log_prob - static_cast<S>(smp.old_log_prob))) * inv_n;
    if (std::abs(t.ratio - S(1)) > static_cast<S>(k.clip)) out.clip_fraction += inv_n;
    if (accumulate) {
      // The surrogate only carries gradient when the unclipped branch is the
      // active minimum.
      const S pg_scale = t.unclipped <= t.clipped ? -adv * t.ratio * inv_n : S(0);
      const S ent_scale = static_cast<S>(k.entropy_coef) * inv_n;
      for (std::size_t j = 0; j < dlogits.size(); ++j) {
        if (!dist.legal[j]) {
          dlogits[j] = 0;
          continue;
        }
        const S p = dist.probs[j];
        const S onehot = j == smp.action ? S(1) : S(0);
        dlogits[j] = pg_scale * (onehot - p) + ent_scale * p * (dist.log_probs[j] + t.entropy);
      }
      net.backward(ws, dlogits, static_cast<S>(k.value_coef) * verr * inv_n);
    }
    out.terms.push_back(t);
  }
  out.total = out.policy + static_cast<S>(k.value_coef) * out.value - static_cast<S>(k.entropy_coef) * out.entropy;
  return out;
}

template <typename S>
double grad_norm(std::span<const S> g) {
  double s = 0;
  for (S v : g) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// Clipped-surrogate PPO update over `batch` (advantages must already be
/// computed). Advantages are normalized over the whole batch. On a non-finite
/// loss the parameters are restored and NumericError is thrown.
template <typename S>
LossReport ppo_update(PolicyNet<S>& net, Adam<S>& opt, const RolloutBatch& batch, const TrainConfig& cfg, Rng& rng) {
  const std::size_t n = batch.size();
  if (batch.advantages.size() != n || batch.returns.size() != n)
    throw ContractError("ppo_update needs advantages; call compute_gae first");
  for (double a : batch.advantages)
    if (!std::isfinite(a)) throw NumericError("non-finite advantage in rollout batch");

  double mean = 0;
  for (double a : batch.advantages) mean += a;
  mean /= static_cast<double>(n);
  double var = 0;
  for (double a : batch.advantages) var += (a - mean) * (a - mean);
  const double stddev = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;

  std::vector<LossSample> all(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tr = batch.steps[i];
    all[i] = {&tr.window, tr.action, tr.log_prob, (batch.advantages[i] - mean) / (stddev + 1e-8), batch.returns[i]};
  }

  const std::vector<S> snapshot(net.params().begin(), net.params().end());
  const LossCoefficients coefs{cfg.clip, cfg.value_coef, cfg.entropy_coef};
  std::vector<std::size_t> order(n);
  std::vector<LossSample> mb;
  LossReport report;
  std::size_t minibatches = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t start = 0; start < n; start += cfg.minibatch) {
      const std::size_t end = std::min(n, start + cfg.minibatch);
      mb.clear();
      for (std::size_t i = start; i < end; ++i) mb.push_back(all[order[i]]);
      net.zero_grad();
      const auto loss = minibatch_loss<S>(net, mb, coefs, true);
      if (!std::isfinite(static_cast<double>(loss.total))) {
        net.set_params(std::span<const S>(snapshot));
        std::ostringstream msg;
        msg << "non-finite PPO loss (epoch " << epoch << ", minibatch at " << start << "): policy=" << loss.policy
            << " value=" << loss.value << " entropy=" << loss.entropy;
        throw NumericError(msg.str());
      }
      const double norm = grad_norm<S>(net.grads());
      if (norm > cfg.max_grad_norm) {
        const S scale = static_cast<S>(cfg.max_grad_norm / (norm + 1e-6));
        for (S& g : net.grads()) g *= scale;
      }
      opt.step(net.params(), net.grads());
      report.total += static_cast<double>(loss.total);
      report.policy += static_cast<double>(loss.policy);
      report.value += static_cast<double>(loss.value);
      report.entropy += static_cast<double>(loss.entropy);
      report.approx_kl += static_cast<double>(loss.approx_kl);
      report.clip_fraction += static_cast<double>(loss.clip_fraction);
      ++minibatches;
    }
  }
  const double m = static_cast<double>(std::max<std::size_t>(minibatches, 1));
  report.total /= m;
  report.policy /= m;
  report.value /= m;
  report.entropy /= m;
  report.approx_kl /= m;
  report.clip_fraction /= m;
  for (S p : net.params())
    if (!std::isfinite(static_cast<double>(p))) throw NumericError("non-finite parameter after PPO update");
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Wraps a policy as an Agent. Greedy mode takes the argmax action.
template <typename S>
class PolicyAgent final : public Agent {
public:
  PolicyAgent(const PolicyNet<S>& net, const EnvConfig& env, bool greedy = true, std::uint64_t seed = 0)
      : net_(&net), space_(env), max_steps_(env.max_steps), greedy_(greedy), rng_(seed) {
    if (net.config().num_actions != space_.size() || net.config().input_dim != feature_dim(space_.size()))
      throw ContractError("policy dimensions do not match the environment");
  }

  std::string_view name() const override { return "rl"; }

  Action act(const HistoryWindow& w) override {
    const auto out = net_->forward(encode_window(w, space_.size(), max_steps_));
    return space_.action(greedy_ ? out.dist.argmax() : out.dist.sample(rng_));
  }

private:
  const PolicyNet<S>* net_;
  ActionSpace space_;
  std::size_t max_steps_;
  bool greedy_;
  Rng rng_;
};

struct EvalResult {
  std::size_t episodes = 0;
  std::size_t guesses = 0;
  std::size_t correct_guesses = 0;
  std::size_t correct_episodes = 0;
  double success_rate = 0;
  double mean_length = 0;
};

/// Correct guesses over total guesses, where a truncated episode counts as
/// one wrong guess. In single-guess mode this equals the fraction of episodes
/// that end Correct.
inline double success_rate(std::size_t correct, std::size_t total) {
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

/// Runs `n` episodes of `agent` on a fresh environment seeded with `env.seed`.
inline EvalResult evaluate(Agent& agent, const EnvConfig& env, std::size_t n,
                           const std::function<void(const EpisodeRecord&)>& on_episode = {}) {
  if (n == 0) throw DomainError("evaluate needs at least one episode");
  Environment e(env);
  EvalResult r;
  double length = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = run_episode(e, agent);
    r.guesses += rec.guesses;
    r.correct_guesses += rec.correct_guesses;
    r.correct_episodes += rec.correct();
    length += static_cast<double>(rec.length());
    if (on_episode) on_episode(rec);
  }
  r.episodes = n;
  r.success_rate = success_rate(r.correct_guesses, r.guesses);
  r.mean_length = length / static_cast<double>(n);
  return r;
}

template <typename S>
EvalResult evaluate(const PolicyNet<S>& net, const EnvConfig& env, std::size_t n) {
  PolicyAgent<S> agent(net, env, true);
  return evaluate(agent, env, n);
}

// ---------------------------------------------------------------------------
// Training loop

struct EvalPoint {
  std::size_t update = 0;
  std::size_t env_steps = 0;
  double success_rate = 0;
  double mean_length = 0;
};

struct TrainResult {
  PolicyNet<float> policy;
  Adam<float> optimizer;
  MetricsLog metrics;
  std::vector<LossReport> losses;
  std::vector<EvalPoint> evals;
  std::vector<std::string> warnings;
  std::size_t env_steps = 0;
  std::size_t updates = 0;
  /// Rollout RNG state at the end of training (std::mt19937_64 text form).
  std::string rng_state;
};

struct TrainHooks {
  /// Called after every update; returning false stops training.
  std::function<bool(const TrainResult&)> on_update;
};

/// Sub-seeds fanned out from the train seed.
struct TrainSeeds {
  std::uint64_t policy_init, rollout, env, eval;
  explicit TrainSeeds(std::uint64_t root)
      : policy_init(derive_seed(root, "policy-init")),
        rollout(derive_seed(root, "rollout")),
        env(derive_seed(root, "env")),
        eval(derive_seed(root, "eval")) {}
};

inline TrainResult train(const EnvConfig& env_config, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  env_config.validate();
  cfg.validate();
  const TrainSeeds seeds(cfg.seed);
  TrainResult res;
  res.policy = make_policy<float>(env_config, cfg.policy, seeds.policy_init);
  res.optimizer = Adam<float>(res.policy.num_params(), cfg.learning_rate, cfg.adam_eps);
  Rng rng(seeds.rollout);

  std::vector<Environment> envs;
  envs.reserve(cfg.num_envs);
  for (std::size_t i = 0; i < cfg.num_envs; ++i) {
    EnvConfig c = env_config;
    c.seed = derive_seed(seeds.env, "worker-" + std::to_string(i));
    envs.emplace_back(c);
    envs.back().reset();
  }
  EnvConfig eval_config = env_config;
  eval_config.seed = seeds.eval;
  const double chance = 1.0 / static_cast<double>(env_config.secret_domain_size());
  std::size_t below_chance_since = 0;
  bool warned = false;

  while (res.env_steps < cfg.total_steps && res.metrics.episodes.size() < cfg.total_episodes) {
    RolloutBatch batch = collect_rollouts(res.policy, envs, cfg.horizon, rng, &res.metrics);
    res.env_steps += batch.size();
    compute_gae(batch, cfg.gamma, cfg.gae_lambda);
    res.losses.push_back(ppo_update(res.policy, res.optimizer, batch, cfg, rng));
    ++res.updates;

    if (res.env_steps >= cfg.divergence_warmup && res.metrics.episodes.size() >= cfg.divergence_patience) {
      if (res.metrics.success_rate(cfg.divergence_patience) < chance) {
        if (below_chance_since == 0) below_chance_since = res.metrics.episodes.size();
        if (!warned && res.metrics.episodes.size() - below_chance_since >= cfg.divergence_patience) {
          std::ostringstream msg;
          msg << "training success below chance (" << chance << ") for " << cfg.divergence_patience
              << " episodes after " << res.env_steps << " env steps";
          res.warnings.push_back(msg.str());
          std::clog << "warning: " << msg.str() << '\n';
          warned = true;
        }
      } else {
        below_chance_since = 0;
      }
    }

    bool stop = false;
    if (cfg.eval_interval > 0 && res.updates % cfg.eval_interval == 0) {
      const auto ev = evaluate(res.policy, eval_config, cfg.eval_episodes);
      res.evals.push_back({res.updates, res.env_steps, ev.success_rate, ev.mean_length});
      if (cfg.target_success > 0.0 && ev.success_rate >= cfg.target_success) stop = true;
    }
    if (hooks.on_update && !hooks.on_update(res)) stop = true;
    if (stop) break;
  }
  std::ostringstream st;
  st << rng;
  res.rng_state = st.str();
  return res;
}

} // namespace cachegame
