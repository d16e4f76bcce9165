#pragma once

// Multi-level set-associative cache shared by the attacker and victim slices.
//
// One abstract address occupies one cache line. Levels are searched shallow to
// deep; with `inclusive` set, every line resident at level i is also resident
// at every deeper level, and evicting a line from a deeper level
// back-invalidates it in the shallower ones.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cachegame/errors.hpp"
#include "cachegame/rng.hpp"

namespace cachegame {

using Address = std::uint64_t;

enum class Slice : std::uint8_t { Attacker = 0, Victim = 1 };

inline std::string_view to_string(Slice s) {
  return s == Slice::Attacker ? "attacker" : "victim";
}

/// What the attacker can learn from one step. NA marks steps that were not
/// memory accesses; the cache itself only ever reports Hit or Miss.
enum class LatencyClass : std::uint8_t { Hit = 0, Miss = 1, NA = 2 };

inline std::string_view to_string(LatencyClass c) {
  switch (c) {
  case LatencyClass::Hit: return "hit";
  case LatencyClass::Miss: return "miss";
  case LatencyClass::NA: return "na";
  }
  return "na";
}

enum class ReplacementPolicy : std::uint8_t { Lru };

inline std::string_view to_string(ReplacementPolicy) { return "lru"; }

inline ReplacementPolicy parse_replacement_policy(std::string_view name) {
  if (name == "lru") return ReplacementPolicy::Lru;
  throw ConfigError("unknown replacement policy '" + std::string(name) + "'");
}

struct LevelGeometry {
  std::size_t sets = 1;
  std::size_t associativity = 1;
  // Ordinal only; agents never see it.
  unsigned hit_latency = 1;

  std::size_t capacity() const { return sets * associativity; }
};

struct CacheGeometry {
  std::vector<LevelGeometry> levels;
  bool inclusive = true;
  ReplacementPolicy policy = ReplacementPolicy::Lru;

  std::size_t depth() const { return levels.size(); }

  void validate() const {
    if (levels.empty()) throw ConfigError("cache geometry needs at least one level");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& lv = levels[i];
      const std::string name = "level " + std::to_string(i);
      if (lv.sets == 0) throw ConfigError(name + ": sets must be positive");
      if (lv.associativity == 0) throw ConfigError(name + ": associativity must be positive");
      if (i > 0) {
        if (lv.hit_latency <= levels[i - 1].hit_latency)
          throw ConfigError(name + ": hit_latency must increase with depth");
        if (inclusive && lv.capacity() < levels[i - 1].capacity())
          throw ConfigError(name + ": inclusive hierarchy needs capacity >= the level above (" +
                            std::to_string(lv.capacity()) + " < " +
                            std::to_string(levels[i - 1].capacity()) + ")");
      }
    }
  }

  /// Single-level direct-mapped cache of `lines` lines.
  static CacheGeometry direct_mapped(std::size_t lines) {
    return CacheGeometry{{LevelGeometry{lines, 1, 1}}, true, ReplacementPolicy::Lru};
  }

  /// The 16/64/256-address three-level hierarchy (direct-mapped L1, 4-way L2,
  /// 8-way L3).
  static CacheGeometry three_level() {
    return CacheGeometry{{LevelGeometry{16, 1, 1}, LevelGeometry{16, 4, 10}, LevelGeometry{32, 8, 40}},
                         true,
                         ReplacementPolicy::Lru};
  }
};

struct DefenseConfig {
  /// Static split of every level's sets between the slices: the attacker owns
  /// sets [0, k), the victim [k, sets), k = round(sets * attacker_share).
  bool partition = false;
  double attacker_share = 0.5;
  /// One static seeded permutation of set indices per level.
  bool randomize = false;
};

/// Contiguous address interval [first, first + count).
struct AddressRange {
  Address first = 0;
  Address count = 0;

  bool contains(Address a) const { return a >= first && a - first < count; }
  Address end() const { return first + count; }
  bool operator==(const AddressRange&) const = default;
};

/// Per-slice legal address ranges. An empty optional leaves the slice
/// unrestricted.
struct SliceRanges {
  std::optional<AddressRange> attacker;
  std::optional<AddressRange> victim;
};

struct AccessResult {
  std::optional<std::size_t> hit_level;
  LatencyClass latency = LatencyClass::Miss;

  bool hit() const { return hit_level.has_value(); }
  bool operator==(const AccessResult&) const = default;
};

class Cache {
public:
  struct Line {
    Address addr = 0;
    Slice owner = Slice::Attacker;
    bool operator==(const Line&) const = default;
  };

  explicit Cache(CacheGeometry geometry, DefenseConfig defense = {}, std::uint64_t seed = 0,
                 SliceRanges ranges = {})
      : geometry_(std::move(geometry)), defense_(defense), ranges_(ranges) {
    geometry_.validate();
    if (defense_.partition) {
      if (!(defense_.attacker_share > 0.0 && defense_.attacker_share < 1.0))
        throw ConfigError("partition attacker_share must lie in (0, 1)");
      for (std::size_t i = 0; i < geometry_.depth(); ++i) {
        if (geometry_.levels[i].sets < 2)
          throw ConfigError("partitioning needs at least two sets at level " + std::to_string(i));
      }
    }
    levels_.resize(geometry_.depth());
    split_.resize(geometry_.depth());
    permutation_.resize(geometry_.depth());
    Rng rng(derive_seed(seed, "set-permutation"));
    for (std::size_t i = 0; i < geometry_.depth(); ++i) {
      const std::size_t sets = geometry_.levels[i].sets;
      levels_[i].assign(sets, {});
      for (auto& set : levels_[i]) set.reserve(geometry_.levels[i].associativity);
      if (defense_.partition) {
        const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(sets) * defense_.attacker_share));
        split_[i] = std::clamp<std::size_t>(k, 1, sets - 1);
      } else {
        split_[i] = sets;
      }
      auto& perm = permutation_[i];
      perm.resize(sets);
      for (std::size_t s = 0; s < sets; ++s) perm[s] = s;
      if (defense_.randomize) {
        // Permute inside each partition so randomization never breaks isolation.
        std::span<std::size_t> all(perm);
        shuffle(all.first(split_[i]), rng);
        if (split_[i] < sets) shuffle(all.subspan(split_[i]), rng);
      }
    }
  }

  const CacheGeometry& geometry() const { return geometry_; }
  const DefenseConfig& defense() const { return defense_; }
  const SliceRanges& ranges() const { return ranges_; }

  /// Set index of `addr` at `level` as seen by `owner`.
  std::size_t map_set(Address addr, std::size_t level, Slice owner = Slice::Attacker) const {
    const std::size_t sets = geometry_.levels.at(level).sets;
    std::size_t lo = 0;
    std::size_t n = sets;
    if (defense_.partition) {
      if (owner == Slice::Attacker) {
        n = split_[level];
      } else {
        lo = split_[level];
        n = sets - split_[level];
      }
    }
    const std::size_t idx = lo + static_cast<std::size_t>(addr % n);
    return permutation_[level][idx];
  }

  /// Sets of `level` that `owner` can occupy.
  std::vector<std::size_t> owned_sets(std::size_t level, Slice owner) const {
    const std::size_t sets = geometry_.levels.at(level).sets;
    std::vector<std::size_t> out;
    std::size_t lo = 0, hi = sets;
    if (defense_.partition) {
      if (owner == Slice::Attacker) hi = split_[level];
      else lo = split_[level];
    }
    for (std::size_t i = lo; i < hi; ++i) out.push_back(permutation_[level][i]);
    std::sort(out.begin(), out.end());
    return out;
  }

  AccessResult access(Address addr, Slice owner = Slice::Attacker) {
    check_range(addr, owner);
    const std::size_t depth = geometry_.depth();
    std::optional<std::size_t> hit_level;
    for (std::size_t i = 0; i < depth; ++i) {
      auto& set = set_of(addr, i, owner);
      auto it = find(set, addr, owner);
      if (it != set.end()) {
        hit_level = i;
        // Promote to MRU.
        std::rotate(set.begin(), it, it + 1);
        break;
      }
    }
    const std::size_t fill_from = hit_level ? *hit_level : depth;
    for (std::size_t i = fill_from; i-- > 0;) insert(addr, owner, i);
    return AccessResult{hit_level, hit_level ? LatencyClass::Hit : LatencyClass::Miss};
  }

  /// Removes `addr` from every level. Absent lines are a no-op.
  void flush(Address addr, Slice owner = Slice::Attacker) {
    check_range(addr, owner);
    for (std::size_t i = 0; i < geometry_.depth(); ++i) erase(addr, owner, i);
  }

  /// Empties every set; the set permutation and partition map are kept.
  void reset() {
    for (auto& level : levels_)
      for (auto& set : level) set.clear();
  }

  bool resident(Address addr, std::size_t level, Slice owner = Slice::Attacker) const {
    const auto& set = levels_.at(level)[map_set(addr, level, owner)];
    return std::any_of(set.begin(), set.end(), [&](const Line& l) { return matches(l, addr, owner); });
  }

  /// Lines of one set, most recently used first.
  std::span<const Line> set_contents(std::size_t level, std::size_t set) const {
    return levels_.at(level).at(set);
  }

  bool same_contents(const Cache& other) const { return levels_ == other.levels_; }

private:
  using Set = std::vector<Line>;

  void check_range(Address addr, Slice owner) const {
    const auto& range = owner == Slice::Attacker ? ranges_.attacker : ranges_.victim;
    if (range && !range->contains(addr))
      throw DomainError("address " + std::to_string(addr) + " outside the " +
                        std::string(to_string(owner)) + " range");
  }

  // Lines are tagged by (address, owner) only when partitioned; otherwise both
  // slices share a line for the same address.
  bool matches(const Line& l, Address addr, Slice owner) const {
    return l.addr == addr && (!defense_.partition || l.owner == owner);
  }

  Set& set_of(Address addr, std::size_t level, Slice owner) {
    return levels_[level][map_set(addr, level, owner)];
  }

  Set::iterator find(Set& set, Address addr, Slice owner) {
    return std::find_if(set.begin(), set.end(), [&](const Line& l) { return matches(l, addr, owner); });
  }

  void erase(Address addr, Slice owner, std::size_t level) {
    auto& set = set_of(addr, level, owner);
    auto it = find(set, addr, owner);
    if (it != set.end()) set.erase(it);
  }

  void insert(Address addr, Slice owner, std::size_t level) {
    auto& set = set_of(addr, level, owner);
    if (set.size() == geometry_.levels[level].associativity) {
      const Line victim = set.back();
      set.pop_back();
      if (geometry_.inclusive) {
        for (std::size_t j = 0; j < level; ++j) erase(victim.addr, victim.owner, j);
      }
    }
    set.insert(set.begin(), Line{addr, owner});
  }

  CacheGeometry geometry_;
  DefenseConfig defense_;
  SliceRanges ranges_;
  std::vector<std::vector<Set>> levels_;
  std::vector<std::size_t> split_;
  std::vector<std::vector<std::size_t>> permutation_;
};

} // namespace cachegame
