#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"

namespace flexdepth {

/// Learning rate as a function of the 1-based step. kInverseSqrt warms up
/// linearly to peak_lr over `warmup` steps, then decays as sqrt(warmup/step).
struct Schedule {
  enum class Kind { kInverseSqrt, kConstant };
  Kind kind = Kind::kInverseSqrt;
  double peak_lr = 1e-3;
  int warmup = 100;

  [[nodiscard]] double at(int step) const {
    if (kind == Kind::kConstant) return peak_lr;
    const double s = std::max(step, 1);
    if (s < warmup) return peak_lr * s / warmup;
    return peak_lr * std::sqrt(static_cast<double>(warmup) / s);
  }
};

inline std::string_view schedule_kind_name(Schedule::Kind k) {
  return k == Schedule::Kind::kConstant ? "constant" : "inverse_sqrt";
}

inline Schedule::Kind parse_schedule_kind(std::string_view name) {
  if (name == "constant") return Schedule::Kind::kConstant;
  if (name == "inverse_sqrt") return Schedule::Kind::kInverseSqrt;
  throw ValidationError("unknown schedule '" + std::string(name) + "' (valid: inverse_sqrt, constant)");
}

inline void validate(const Schedule& s) {
  if (!(s.peak_lr > 0.0)) throw ValidationError("peak_lr must be positive");
  if (s.kind == Schedule::Kind::kInverseSqrt && s.warmup < 1) {
    throw ValidationError("inverse_sqrt schedule needs warmup >= 1");
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(const Parameters<T>& like, AdamConfig cfg = {})
      : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(Parameters<T>& params, const Parameters<T>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto p = tensor_list(params);
    auto g = tensor_list(grad);
    auto m = tensor_list(m_);
    auto v = tensor_list(v_);
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i]->array() = b1 * m[i]->array() + (T(1) - b1) * g[i]->array();
      v[i]->array() = b2 * v[i]->array() + (T(1) - b2) * g[i]->array().square();
      p[i]->array() -= step_size * m[i]->array() / ((v[i]->array() * inv_c2).sqrt() + eps);
    }
  }

  [[nodiscard]] long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  Parameters<T> m_;
  Parameters<T> v_;
  long t_ = 0;
};

}  // namespace flexdepth
