#pragma once

// Task balance (TB) and average layer distance (ALD) of an assignment plan.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flexdepth/assignment.hpp"
#include "flexdepth/error.hpp"

namespace flexdepth {

/// Divisor used in the TB standard deviation. kSample (D-1) is what
/// reproduces the published strategy table; kPopulation (D) is the formula
/// read literally.
enum class TbConvention { kSample, kPopulation };

struct PlanMetrics {
  double tb = 0.0;
  double ald = 0.0;
  bool ald_defined = true;  // false when every sub-network has depth 1
  std::vector<int> per_layer_counts;  // t(1)..t(D)
  double mean_count = 0.0;
  std::vector<std::string> warnings;
};

/// Mean participation t-bar = (sum of depths in the plan) / D.
inline double mean_task_count(const AssignmentPlan& plan) {
  double sum = 0.0;
  for (const auto& [d, sn] : plan.map) sum += d;
  return sum / plan.total_depth;
}

inline double task_balance(const AssignmentPlan& plan,
                           TbConvention convention = TbConvention::kSample) {
  if (plan.total_depth < 1) throw ValidationError("plan has no layers");
  const LayerUsage usage = layer_usage(plan);
  const double mean = mean_task_count(plan);
  double ss = 0.0;
  for (int i = 1; i <= plan.total_depth; ++i) {
    const double dev = usage.counts[static_cast<std::size_t>(i)] - mean;
    ss += dev * dev;
  }
  // With a single layer the sample divisor is zero; the deviation is zero
  // anyway so fall back to the literal divisor.
  const int divisor = (convention == TbConvention::kSample && plan.total_depth > 1)
                          ? plan.total_depth - 1
                          : plan.total_depth;
  return std::sqrt(ss / divisor);
}

/// Sum of adjacent gaps over all sub-networks, normalised by sum(d - 1).
inline double average_layer_distance(const AssignmentPlan& plan) {
  long numerator = 0;
  long z = 0;
  for (const auto& [d, sn] : plan.map) {
    for (std::size_t i = 1; i < sn.layers.size(); ++i) {
      numerator += std::abs(sn.layers[i] - sn.layers[i - 1]);
    }
    z += static_cast<long>(sn.layers.size()) - 1;
  }
  if (z == 0) {
    throw ValidationError("average layer distance undefined: every sub-network has depth 1");
  }
  return static_cast<double>(numerator) / static_cast<double>(z);
}

inline PlanMetrics compute_metrics(const AssignmentPlan& plan,
                                   TbConvention convention = TbConvention::kSample) {
  PlanMetrics m;
  const LayerUsage usage = layer_usage(plan);
  m.per_layer_counts.assign(usage.counts.begin() + 1, usage.counts.end());
  m.mean_count = mean_task_count(plan);
  if (convention == TbConvention::kSample && plan.total_depth == 1) {
    m.warnings.emplace_back("D = 1: sample TB divisor is zero, reporting the D-divisor value");
  }
  m.tb = task_balance(plan, convention);
  try {
    m.ald = average_layer_distance(plan);
  } catch (const ValidationError&) {
    m.ald_defined = false;
    m.warnings.emplace_back("ALD undefined: no sub-network has more than one layer");
  }
  return m;
}

}  // namespace flexdepth
