#pragma once

// Line-delimited JSON episode traces. One object per line:
//   {"secret": 5 | "empty",
//    "steps": [{"action": "access:13", "latency": "hit"|"miss"|"na", "reward": -0.01}, ...],
//    "outcome": "correct"|"wrong"|"truncated",
//    "return": 0.82}

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cachegame/env.hpp"
#include "cachegame/errors.hpp"

namespace cachegame {

inline std::string_view latency_name(LatencyClass l) {
  switch (l) {
  case LatencyClass::Hit: return "hit";
  case LatencyClass::Miss: return "miss";
  case LatencyClass::NA: return "na";
  }
  return "na";
}

inline LatencyClass parse_latency(std::string_view s) {
  if (s == "hit") return LatencyClass::Hit;
  if (s == "miss") return LatencyClass::Miss;
  if (s == "na") return LatencyClass::NA;
  throw DomainError("unknown latency class '" + std::string(s) + "'");
}

inline Outcome parse_outcome(std::string_view s) {
  if (s == "correct") return Outcome::Correct;
  if (s == "wrong") return Outcome::Wrong;
  if (s == "truncated") return Outcome::Truncated;
  throw DomainError("unknown outcome '" + std::string(s) + "'");
}

/// Trace form of one record. Extra top-level fields may be merged in by
/// callers (the replay command adds a classification label).
inline nlohmann::ordered_json trace_json(const EpisodeRecord& r) {
  nlohmann::ordered_json j;
  if (r.secret)
    j["secret"] = *r.secret;
  else
    j["secret"] = "empty";
  auto steps = nlohmann::ordered_json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"action", s.action.to_string()},
                     {"latency", latency_name(s.observation.latency)},
                     {"reward", s.reward}});
  j["steps"] = std::move(steps);
  j["outcome"] = r.outcome ? to_string(*r.outcome) : "truncated";
  j["return"] = r.total_return;
  return j;
}

inline void write_trace(std::ostream& out, const EpisodeRecord& r) { out << trace_json(r).dump() << '\n'; }

/// Parsed trace line: the recorded actions, latencies and rewards.
struct TraceEntry {
  Secret secret;
  std::vector<Action> actions;
  std::vector<LatencyClass> latencies;
  std::vector<double> rewards;
  Outcome outcome = Outcome::Truncated;
  double ret = 0;
};

inline TraceEntry parse_trace_line(const std::string& line) {
  TraceEntry t;
  try {
    const auto j = nlohmann::json::parse(line);
    const auto& s = j.at("secret");
    if (s.is_string()) {
      if (s.get<std::string>() != "empty") throw DomainError("bad secret field");
    } else {
      t.secret = s.get<Address>();
    }
    for (const auto& st : j.at("steps")) {
      t.actions.push_back(Action::parse(st.at("action").get<std::string>()));
      t.latencies.push_back(parse_latency(st.at("latency").get<std::string>()));
      t.rewards.push_back(st.at("reward").get<double>());
    }
    t.outcome = parse_outcome(j.at("outcome").get<std::string>());
    t.ret = j.at("return").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("malformed trace line: ") + e.what());
  }
  return t;
}

inline std::vector<TraceEntry> read_traces(std::istream& in) {
  std::vector<TraceEntry> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_trace_line(line));
  return out;
}

} // namespace cachegame
