// Replays the scripted Prime+Probe attacker for every secret of an 8-line
// cache and prints each trace with its skeleton and label.
#include <iostream>

#include "cachegame/agents.hpp"
#include "cachegame/analysis.hpp"

int main() {
  using namespace cachegame;
  const EnvConfig cfg = EnvConfig::for_lines(8);
  Environment env(cfg);
  PrimeProbeAgent agent(env, 7);
  const Extraction ex = extract_attack_sequences(agent, cfg);
  for (const auto& r : ex.replays) {
    std::cout << "secret " << secret_to_string(r.secret) << ":";
    for (const auto& s : r.steps) {
      std::cout << ' ' << s.action.to_string();
      if (s.observation.latency != LatencyClass::NA) std::cout << '(' << to_string(s.observation.latency) << ')';
    }
    std::cout << " -> " << (r.correct() ? "correct" : "wrong") << '\n';
  }
  for (const auto& seq : ex.sequences)
    std::cout << "skeleton " << to_string(seq.skeleton) << " label " << to_string(seq.label) << " secrets "
              << seq.secrets.size() << '\n';
}
