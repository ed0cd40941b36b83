#pragma once

// Deterministic sub-network assignment: which d of the D layers run when the
// stack is executed at depth d. Layer indices are 1-based.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flexdepth/depth_space.hpp"
#include "flexdepth/error.hpp"

namespace flexdepth {

enum class Strategy { kHead, kSeq, kLeft, kMiddleLeft, kOptimal };

inline constexpr std::array<Strategy, 5> kAllStrategies = {
    Strategy::kHead, Strategy::kSeq, Strategy::kLeft, Strategy::kMiddleLeft,
    Strategy::kOptimal};

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kHead: return "head";
    case Strategy::kSeq: return "seq";
    case Strategy::kLeft: return "left";
    case Strategy::kMiddleLeft: return "middleleft";
    case Strategy::kOptimal: return "optimal";
  }
  return "?";
}

inline std::string_view strategy_display_name(Strategy s) {
  switch (s) {
    case Strategy::kHead: return "Head";
    case Strategy::kSeq: return "Seq";
    case Strategy::kLeft: return "Left";
    case Strategy::kMiddleLeft: return "MiddleLeft";
    case Strategy::kOptimal: return "Optimal";
  }
  return "?";
}

inline std::string strategy_list() {
  std::string out;
  for (Strategy s : kAllStrategies) {
    if (!out.empty()) out += ", ";
    out += strategy_name(s);
  }
  return out;
}

inline Strategy parse_strategy(std::string_view text) {
  std::string lower(text);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (Strategy s : kAllStrategies) {
    if (lower == strategy_name(s)) return s;
  }
  throw ValidationError("unknown strategy '" + std::string(text) +
                        "' (valid: " + strategy_list() + ")");
}

/// Ordered layer indices a_1 < ... < a_d of one sub-network.
struct SubNetwork {
  int total_depth = 0;
  std::vector<int> layers;

  [[nodiscard]] int depth() const { return static_cast<int>(layers.size()); }
  [[nodiscard]] bool contains(int layer) const {
    return std::binary_search(layers.begin(), layers.end(), layer);
  }
  bool operator==(const SubNetwork&) const = default;
};

inline void validate(const SubNetwork& sn) {
  for (std::size_t i = 0; i < sn.layers.size(); ++i) {
    const int a = sn.layers[i];
    if (a < 1 || a > sn.total_depth) {
      throw InvariantError("layer index out of range: " + std::to_string(a));
    }
    if (i > 0 && sn.layers[i - 1] >= a) {
      throw InvariantError("sub-network indices not strictly increasing");
    }
  }
}

struct AssignmentPlan {
  int total_depth = 0;
  Strategy strategy = Strategy::kHead;
  std::map<int, SubNetwork> map;  // depth -> sub-network

  [[nodiscard]] const SubNetwork& at(int depth) const {
    auto it = map.find(depth);
    if (it == map.end()) {
      throw ValidationError("plan has no sub-network for depth " +
                            std::to_string(depth));
    }
    return it->second;
  }
  bool operator==(const AssignmentPlan&) const = default;
};

/// Per-layer participation counts t(i) and Alive/Dead state used by Optimal.
struct LayerUsage {
  std::vector<int> counts;  // index 0 unused
  std::vector<bool> alive;  // index 0 unused

  explicit LayerUsage(int total_depth)
      : counts(static_cast<std::size_t>(total_depth) + 1, 0),
        alive(static_cast<std::size_t>(total_depth) + 1, true) {}

  [[nodiscard]] int total_depth() const { return static_cast<int>(counts.size()) - 1; }
  [[nodiscard]] bool any_alive() const {
    return std::find(alive.begin() + 1, alive.end(), true) != alive.end();
  }
  void revive_all() { std::fill(alive.begin() + 1, alive.end(), true); }
  void use(const SubNetwork& sn) {
    for (int a : sn.layers) {
      ++counts[static_cast<std::size_t>(a)];
      alive[static_cast<std::size_t>(a)] = false;
    }
  }
};

inline LayerUsage layer_usage(const AssignmentPlan& plan) {
  LayerUsage usage(plan.total_depth);
  for (const auto& [d, sn] : plan.map) usage.use(sn);
  return usage;
}

namespace detail {

inline void require_divisors(const DepthSet& set) {
  if (set.total_depth < 1) throw ValidationError("depth set has no total depth");
  for (int d : set.depths) {
    if (d < 1 || d > set.total_depth || set.total_depth % d != 0) {
      throw ValidationError("depth " + std::to_string(d) +
                            " does not divide " +
                            std::to_string(set.total_depth));
    }
  }
}

inline SubNetwork full_network(int total_depth) {
  SubNetwork sn{total_depth, {}};
  for (int i = 1; i <= total_depth; ++i) sn.layers.push_back(i);
  return sn;
}

inline SubNetwork range_network(int total_depth, int first, int count) {
  SubNetwork sn{total_depth, {}};
  for (int i = 0; i < count; ++i) sn.layers.push_back(first + i);
  return sn;
}

// 1-based position of the MiddleLeft pick inside chunk `k` of size `chunk`.
inline int middle_left_position(int k, int chunk) {
  return k * chunk + 1 + (chunk + 1) / 2 - 1;
}

template <typename Pick>
AssignmentPlan chunked_plan(const DepthSet& set, Strategy strategy, Pick pick) {
  require_divisors(set);
  AssignmentPlan plan{set.total_depth, strategy, {}};
  for (int d : set.depths) {
    const int chunk = set.total_depth / d;
    SubNetwork sn{set.total_depth, {}};
    for (int k = 0; k < d; ++k) sn.layers.push_back(pick(k, chunk));
    plan.map[d] = std::move(sn);
  }
  return plan;
}

}  // namespace detail

/// First d layers.
inline AssignmentPlan assign_head(const DepthSet& set) {
  detail::require_divisors(set);
  AssignmentPlan plan{set.total_depth, Strategy::kHead, {}};
  for (int d : set.depths) plan.map[d] = detail::range_network(set.total_depth, 1, d);
  return plan;
}

/// Contiguous windows that continue where the previous (smaller) depth
/// stopped. A window that would run past layer D is clamped to the last d
/// layers and the cursor restarts at layer 1.
inline AssignmentPlan assign_seq(const DepthSet& set) {
  detail::require_divisors(set);
  const int total = set.total_depth;
  AssignmentPlan plan{total, Strategy::kSeq, {}};
  int cursor = 1;
  for (int d : set.depths) {
    if (d == total) {
      plan.map[d] = detail::full_network(total);
      continue;
    }
    if (cursor + d - 1 > total) {
      plan.map[d] = detail::range_network(total, total - d + 1, d);
      cursor = 1;
      continue;
    }
    plan.map[d] = detail::range_network(total, cursor, d);
    cursor += d;
    if (cursor > total) cursor = 1;
  }
  return plan;
}

/// Leftmost layer of each of the d chunks (the chunked LayerDrop rule).
inline AssignmentPlan assign_left(const DepthSet& set) {
  return detail::chunked_plan(set, Strategy::kLeft,
                              [](int k, int chunk) { return k * chunk + 1; });
}

/// Layer at offset ceil(c/2)-1 of each chunk of size c = D/d.
inline AssignmentPlan assign_middle_left(const DepthSet& set) {
  return detail::chunked_plan(set, Strategy::kMiddleLeft,
                              detail::middle_left_position);
}

/// Usage-balancing assignment. Depths are placed largest first; every chunk
/// contributes its least-used Alive layer (ties: closest to the MiddleLeft
/// position, then the larger index). Picked layers become Dead. A depth whose
/// chunks cannot all be served is deferred; when nothing fits or every layer
/// is Dead, all layers are revived.
inline AssignmentPlan assign_optimal(const DepthSet& set) {
  detail::require_divisors(set);
  const int total = set.total_depth;
  AssignmentPlan plan{total, Strategy::kOptimal, {}};
  LayerUsage usage(total);

  std::vector<int> pending(set.depths.rbegin(), set.depths.rend());
  const int max_resets = static_cast<int>(set.depths.size()) + 1;
  int resets = 0;

  auto try_place = [&](int d) -> bool {
    const int chunk = total / d;
    SubNetwork sn{total, {}};
    for (int k = 0; k < d; ++k) {
      const int target = detail::middle_left_position(k, chunk);
      int best = 0;
      for (int i = k * chunk + 1; i <= (k + 1) * chunk; ++i) {
        if (!usage.alive[static_cast<std::size_t>(i)]) continue;
        if (best == 0) {
          best = i;
          continue;
        }
        const int ci = usage.counts[static_cast<std::size_t>(i)];
        const int cb = usage.counts[static_cast<std::size_t>(best)];
        const int di = std::abs(i - target);
        const int db = std::abs(best - target);
        if (ci < cb || (ci == cb && (di < db || (di == db && i > best)))) best = i;
      }
      if (best == 0) return false;
      sn.layers.push_back(best);
    }
    usage.use(sn);
    plan.map[d] = std::move(sn);
    return true;
  };

  while (!pending.empty()) {
    bool placed = false;
    for (auto it = pending.begin(); it != pending.end(); ++it) {
      if (try_place(*it)) {
        pending.erase(it);
        placed = true;
        break;
      }
    }
    if (!placed || !usage.any_alive()) {
      usage.revive_all();
      if (++resets > max_resets && !pending.empty()) {
        throw InvariantError("optimal assignment did not converge");
      }
    }
  }
  return plan;
}

inline AssignmentPlan assign(Strategy strategy, const DepthSet& set) {
  switch (strategy) {
    case Strategy::kHead: return assign_head(set);
    case Strategy::kSeq: return assign_seq(set);
    case Strategy::kLeft: return assign_left(set);
    case Strategy::kMiddleLeft: return assign_middle_left(set);
    case Strategy::kOptimal: return assign_optimal(set);
  }
  throw ValidationError("unknown strategy");
}

/// LayerDrop's inference-time pruning: with p' = 1 - kept/D, drop every
/// layer whose index is a multiple of floor(1/p'). Flooring can keep more
/// than `kept` layers; the returned sub-network reports what was achieved.
inline SubNetwork layerdrop_inference_mask(int total_depth, int kept) {
  if (total_depth < 1) throw ValidationError("total depth must be >= 1");
  if (kept < 1 || kept > total_depth) {
    throw EmptyNetworkError("inference depth must lie in [1, " +
                            std::to_string(total_depth) + "], got " +
                            std::to_string(kept));
  }
  if (kept == total_depth) return detail::full_network(total_depth);
  // floor(1 / p') with p' = (D - kept) / D, in exact integer arithmetic.
  const int stride = total_depth / (total_depth - kept);
  SubNetwork sn{total_depth, {}};
  for (int i = 1; i <= total_depth; ++i) {
    if (i % stride != 0) sn.layers.push_back(i);
  }
  if (sn.layers.empty()) {
    throw EmptyNetworkError("pruning to " + std::to_string(kept) + " of " +
                            std::to_string(total_depth) +
                            " layers removes every layer (floor(1/p') = 1)");
  }
  return sn;
}

// Plan document:
//   strategy: optimal
//   total_depth: 12
//   1: 7
//   2: 4 10
inline std::string serialize_plan(const AssignmentPlan& plan) {
  std::ostringstream os;
  os << "strategy: " << strategy_name(plan.strategy) << '\n';
  os << "total_depth: " << plan.total_depth << '\n';
  for (const auto& [d, sn] : plan.map) {
    os << d << ':';
    for (int a : sn.layers) os << ' ' << a;
    os << '\n';
  }
  return os.str();
}

inline AssignmentPlan parse_plan(std::string_view text) {
  AssignmentPlan plan;
  bool have_strategy = false;
  bool have_depth = false;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ValidationError("malformed plan line: " + line);
    const std::string key = line.substr(0, colon);
    std::istringstream rest(line.substr(colon + 1));
    if (key == "strategy") {
      std::string name;
      rest >> name;
      plan.strategy = parse_strategy(name);
      have_strategy = true;
    } else if (key == "total_depth") {
      rest >> plan.total_depth;
      have_depth = true;
    } else {
      if (!have_strategy || !have_depth) {
        throw ValidationError("plan document: sub-network listed before the header");
      }
      SubNetwork sn{plan.total_depth, {}};
      int a = 0;
      while (rest >> a) sn.layers.push_back(a);
      try {
        validate(sn);
      } catch (const InvariantError& e) {
        throw ValidationError(std::string("plan document: ") + e.what());
      }
      plan.map[std::stoi(key)] = std::move(sn);
    }
  }
  if (!have_strategy || !have_depth) {
    throw ValidationError("plan document lacks strategy or total_depth");
  }
  return plan;
}

}  // namespace flexdepth
