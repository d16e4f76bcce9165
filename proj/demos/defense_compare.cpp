// Success rate of the scripted attackers with and without set partitioning.
#include <cstdio>

#include "cachegame/agents.hpp"
#include "cachegame/ppo.hpp"

int main() {
  using namespace cachegame;
  for (const bool partition : {false, true}) {
    EnvConfig cfg = EnvConfig::for_lines(8);
    cfg.defense.partition = partition;
    cfg.seed = 11;
    Environment env(cfg);
    RandomAgent random(cfg, 1);
    PrimeProbeAgent pp(env, 2);
    const double r = evaluate(random, cfg, 5000).success_rate;
    const double p = evaluate(pp, cfg, 5000).success_rate;
    std::printf("partition=%d random=%.3f prime_probe=%.3f chance=%.3f\n", partition, r, p, 1.0 / 8);
  }
}
