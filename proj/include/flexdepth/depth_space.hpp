#pragma once

// Divisor depth sets and the (encoder, decoder) task grid.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "flexdepth/error.hpp"

namespace flexdepth {

/// Depths a D-layer stack can be compressed to: every positive divisor of D.
/// Reduced sets (see restrict_depths) keep a subset that still contains D.
struct DepthSet {
  int total_depth = 0;
  std::vector<int> depths;  // ascending, duplicate-free, divisors of D

  [[nodiscard]] std::size_t size() const { return depths.size(); }
  [[nodiscard]] bool contains(int d) const {
    for (int x : depths) {
      if (x == d) return true;
    }
    return false;
  }
  bool operator==(const DepthSet&) const = default;
};

struct Task {
  int enc = 0;
  int dec = 0;
  bool operator==(const Task&) const = default;
};

/// Cross product of encoder and decoder depth sets, row-major over encoder
/// depths (ascending) then decoder depths (ascending).
struct DepthGrid {
  DepthSet encoder;
  DepthSet decoder;
  std::vector<Task> tasks;

  [[nodiscard]] std::size_t size() const { return tasks.size(); }
  [[nodiscard]] Task full_depth() const {
    return {encoder.total_depth, decoder.total_depth};
  }
};

inline DepthSet divisor_depths(int total_depth) {
  if (total_depth < 1) {
    throw ValidationError("depth must be >= 1, got " +
                          std::to_string(total_depth));
  }
  DepthSet set;
  set.total_depth = total_depth;
  for (int d = 1; d <= total_depth; ++d) {
    if (total_depth % d == 0) set.depths.push_back(d);
  }
  return set;
}

inline bool is_prime(int n) {
  if (n < 2) return false;
  for (int d = 2; d * d <= n; ++d) {
    if (n % d == 0) return false;
  }
  return true;
}

inline DepthGrid make_grid(DepthSet encoder, DepthSet decoder) {
  DepthGrid grid;
  for (int m : encoder.depths) {
    for (int n : decoder.depths) grid.tasks.push_back({m, n});
  }
  grid.encoder = std::move(encoder);
  grid.decoder = std::move(decoder);
  return grid;
}

inline DepthGrid task_grid(int enc_depth, int dec_depth) {
  return make_grid(divisor_depths(enc_depth), divisor_depths(dec_depth));
}

/// Keeps only `keep` (each must be a member of `set`); D is always retained.
inline DepthSet restrict_depths(const DepthSet& set, const std::vector<int>& keep) {
  DepthSet out;
  out.total_depth = set.total_depth;
  for (int d : set.depths) {
    bool wanted = d == set.total_depth;
    for (int k : keep) wanted = wanted || k == d;
    if (wanted) out.depths.push_back(d);
  }
  for (int k : keep) {
    if (!set.contains(k)) {
      throw ValidationError("depth " + std::to_string(k) +
                            " is not in the depth set of " +
                            std::to_string(set.total_depth));
    }
  }
  return out;
}

/// Grid that only varies one side; the other side stays at full depth.
inline DepthGrid encoder_only_grid(int enc_depth, int dec_depth) {
  return make_grid(divisor_depths(enc_depth),
                   restrict_depths(divisor_depths(dec_depth), {}));
}

inline DepthGrid decoder_only_grid(int enc_depth, int dec_depth) {
  return make_grid(restrict_depths(divisor_depths(enc_depth), {}),
                   divisor_depths(dec_depth));
}

}  // namespace flexdepth
