#pragma once

// Pretraining, sequence-level distillation, multi-task fine-tuning over the
// depth grid, and the LayerDrop fine-tuning baseline.

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flexdepth/assignment.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/depth_space.hpp"
#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/optimizer.hpp"
#include "flexdepth/tensor.hpp"

namespace flexdepth {

/// Which tasks (and how much of the batch) one optimizer step touches.
/// enc_tasks / dec_tasks = 0 means every depth on that side.
struct AccumulationPolicy {
  int enc_tasks = 0;
  int dec_tasks = 0;
  double batch_fraction = 1.0;

  [[nodiscard]] bool samples_tasks() const { return enc_tasks > 0 || dec_tasks > 0; }

  [[nodiscard]] std::size_t passes_per_step(const DepthGrid& grid) const {
    const std::size_t e = enc_tasks > 0 ? static_cast<std::size_t>(enc_tasks) : grid.encoder.size();
    const std::size_t d = dec_tasks > 0 ? static_cast<std::size_t>(dec_tasks) : grid.decoder.size();
    return e * d;
  }
};

struct TrainConfig {
  int steps = 1000;
  int batch_size = 32;  // sequences per batch
  Schedule schedule;
  std::uint64_t seed = 1;
  AccumulationPolicy policy;
  AdamConfig adam;
};

inline void validate(const TrainConfig& c) {
  if (c.steps < 0) throw ValidationError("steps must be >= 0");
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  validate(c.schedule);
  if (c.schedule.kind == Schedule::Kind::kInverseSqrt && c.steps > 0 && c.schedule.warmup > c.steps) {
    throw ValidationError("warmup exceeds the number of steps");
  }
  if (!(c.policy.batch_fraction > 0.0 && c.policy.batch_fraction <= 1.0)) {
    throw ValidationError("batch_fraction must lie in (0, 1]");
  }
  if (c.policy.enc_tasks < 0 || c.policy.dec_tasks < 0) throw ValidationError("task counts must be >= 0");
}

struct TaskLoss {
  Task task;
  double loss = 0.0;
};

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  int forward_passes = 0;
  int active_enc_layers = 0;  // summed over the step's passes
  int active_dec_layers = 0;
  std::vector<TaskLoss> losses;

  [[nodiscard]] double mean_loss() const {
    double s = 0.0;
    for (const auto& l : losses) s += l.loss;
    return losses.empty() ? 0.0 : s / static_cast<double>(losses.size());
  }
};

struct TrainLog {
  std::vector<StepRecord> steps;

  [[nodiscard]] long total_forward_passes() const {
    long n = 0;
    for (const auto& s : steps) n += s.forward_passes;
    return n;
  }
};

/// step,lr,enc_depth,dec_depth,loss; one row per (step, pass).
inline void write_log_csv(std::ostream& os, const TrainLog& log) {
  os << "step,lr,enc_depth,dec_depth,loss\n";
  os.precision(17);
  for (const auto& s : log.steps) {
    for (const auto& l : s.losses) {
      os << s.step << ',' << s.lr << ',' << l.task.enc << ',' << l.task.dec << ',' << l.loss << '\n';
    }
  }
}

template <typename T>
struct TrainResult {
  Parameters<T> params;
  TrainLog log;
};

// Independent random streams of one training run.
enum class Stream : std::uint64_t { kBatches = 1, kTasks = 2, kGates = 3 };

inline Rng stream_rng(std::uint64_t seed, Stream s) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
}

inline Batch sample_batch(std::span<const Example> data, int size, Rng& rng, int id) {
  if (data.empty()) throw ValidationError("cannot sample a batch from an empty corpus");
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<Example> rows;
  rows.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) rows.push_back(data[pick(rng)]);
  return make_batch(rows, id);
}

/// Uniform sample without replacement of n_enc encoder and n_dec decoder
/// depths; the full depth on each side is always included. Returns the
/// cross product in grid order.
inline std::vector<Task> sample_tasks(const DepthGrid& grid, int n_enc, int n_dec, Rng& rng) {
  auto side = [&](const DepthSet& set, int n) {
    if (n < 1 || static_cast<std::size_t>(n) > set.size()) {
      throw ValidationError("cannot sample " + std::to_string(n) + " of " + std::to_string(set.size()) +
                            " depths");
    }
    std::vector<int> rest;
    for (int d : set.depths) {
      if (d != set.total_depth) rest.push_back(d);
    }
    std::vector<int> chosen{set.total_depth};
    for (int k = 0; k < n - 1; ++k) {
      std::uniform_int_distribution<std::size_t> pick(0, rest.size() - 1);
      const std::size_t i = pick(rng);
      chosen.push_back(rest[i]);
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(i));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  };
  const auto enc = side(grid.encoder, n_enc);
  const auto dec = side(grid.decoder, n_dec);
  std::vector<Task> out;
  for (int m : enc) {
    for (int n : dec) out.push_back({m, n});
  }
  return out;
}

/// Plans for both sides of the grid.
struct GridPlans {
  AssignmentPlan encoder;
  AssignmentPlan decoder;

  [[nodiscard]] GateVector gates(const ModelConfig& c, const Task& t) const {
    return gates_from(c, encoder.at(t.enc), decoder.at(t.dec));
  }
};

inline GridPlans make_plans(Strategy s, const DepthGrid& grid) {
  return {assign(s, grid.encoder), assign(s, grid.decoder)};
}

inline void check_plans(const ModelConfig& c, const DepthGrid& grid, const GridPlans& plans) {
  if (grid.encoder.total_depth != c.enc_layers || grid.decoder.total_depth != c.dec_layers) {
    throw ValidationError("depth grid does not match model depth");
  }
  if (plans.encoder.total_depth != c.enc_layers || plans.decoder.total_depth != c.dec_layers) {
    throw ValidationError("assignment plans do not match model depth");
  }
  for (const Task& t : grid.tasks) {
    if (!plans.encoder.map.count(t.enc) || !plans.decoder.map.count(t.dec)) {
      throw ValidationError("plans do not cover task (" + std::to_string(t.enc) + ", " +
                            std::to_string(t.dec) + ")");
    }
  }
}

/// Summed gradient of every task on one shared batch, in task order.
template <typename T>
Parameters<T> accumulate_task_gradients(const Parameters<T>& params, const Batch& batch,
                                        std::span<const Task> tasks, const GridPlans& plans,
                                        std::vector<TaskLoss>* losses = nullptr) {
  Parameters<T> total = zeros_like(params);
  for (const Task& t : tasks) {
    auto lg = loss_and_gradient(params, batch, plans.gates(params.config, t));
    accumulate(total, lg.grad);
    if (losses) losses->push_back({t, static_cast<double>(lg.loss)});
  }
  return total;
}

namespace detail {

inline int scaled_batch(const TrainConfig& c) {
  return std::max(1, static_cast<int>(std::lround(c.batch_size * c.policy.batch_fraction)));
}

template <typename F>
auto at_step(int step, F&& f) {
  try {
    return f();
  } catch (const DivergenceError& e) {
    throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
  }
}

}  // namespace detail

/// Multi-task fine-tuning: each step samples one batch, runs every selected
/// task on it, sums the gradients and applies a single optimizer update.
template <typename T>
TrainResult<T> finetune_multitask(const Parameters<T>& init, std::span<const Example> corpus,
                                  const DepthGrid& grid, const GridPlans& plans, const TrainConfig& cfg) {
  validate(cfg);
  check_plans(init.config, grid, plans);
  if (cfg.policy.enc_tasks > static_cast<int>(grid.encoder.size()) ||
      cfg.policy.dec_tasks > static_cast<int>(grid.decoder.size())) {
    throw ValidationError("sampled task counts exceed the grid");
  }
  TrainResult<T> result{init, {}};
  Adam<T> adam(init, cfg.adam);
  Rng batch_rng = stream_rng(cfg.seed, Stream::kBatches);
  Rng task_rng = stream_rng(cfg.seed, Stream::kTasks);
  const int batch_size = detail::scaled_batch(cfg);

  for (int step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sample_batch(corpus, batch_size, batch_rng, step);
    std::vector<Task> tasks = grid.tasks;
    if (cfg.policy.samples_tasks()) {
      const int ne = cfg.policy.enc_tasks > 0 ? cfg.policy.enc_tasks : static_cast<int>(grid.encoder.size());
      const int nd = cfg.policy.dec_tasks > 0 ? cfg.policy.dec_tasks : static_cast<int>(grid.decoder.size());
      tasks = sample_tasks(grid, ne, nd, task_rng);
    }
    StepRecord rec;
    rec.step = step;
    rec.lr = cfg.schedule.at(step);
    const Parameters<T> grad = detail::at_step(step, [&] {
      return accumulate_task_gradients(result.params, batch, std::span<const Task>(tasks), plans, &rec.losses);
    });
    rec.forward_passes = static_cast<int>(tasks.size());
    for (const Task& t : tasks) {
      rec.active_enc_layers += t.enc;
      rec.active_dec_layers += t.dec;
    }
    adam.step(result.params, grad, rec.lr);
    result.log.steps.push_back(std::move(rec));
  }
  return result;
}

/// Full-depth training only (all gates on) from the given parameters.
template <typename T>
TrainResult<T> train_full_depth(const Parameters<T>& init, std::span<const Example> data, const TrainConfig& cfg) {
  const ModelConfig& c = init.config;
  const DepthGrid grid = make_grid(restrict_depths(divisor_depths(c.enc_layers), {}),
                                   restrict_depths(divisor_depths(c.dec_layers), {}));
  TrainConfig full = cfg;
  full.policy = {};
  return finetune_multitask(init, data, grid, make_plans(Strategy::kHead, grid), full);
}

template <typename T = double>
TrainResult<T> pretrain(const ModelConfig& config, std::span<const Example> data, const TrainConfig& cfg) {
  return train_full_depth(init_params<T>(config, cfg.seed), data, cfg);
}

/// LayerDrop baseline: every step accumulates `accum` passes, each on a
/// fresh batch with freshly sampled Bernoulli gates, then one update.
template <typename T>
TrainResult<T> finetune_layerdrop(const Parameters<T>& init, std::span<const Example> corpus, double p,
                                  int accum, const TrainConfig& cfg) {
  validate(cfg);
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("layer drop rate must lie in (0, 1)");
  if (accum < 1) throw ValidationError("accumulation count must be >= 1");
  TrainResult<T> result{init, {}};
  Adam<T> adam(init, cfg.adam);
  Rng batch_rng = stream_rng(cfg.seed, Stream::kBatches);
  Rng gate_rng = stream_rng(cfg.seed, Stream::kGates);
  const int batch_size = detail::scaled_batch(cfg);

  for (int step = 1; step <= cfg.steps; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.lr = cfg.schedule.at(step);
    Parameters<T> grad = zeros_like(init);
    for (int k = 0; k < accum; ++k) {
      const Batch batch = sample_batch(corpus, batch_size, batch_rng, step);
      const GateVector gates = sample_gates(p, init.config, gate_rng);
      auto lg = detail::at_step(step, [&] { return loss_and_gradient(result.params, batch, gates); });
      accumulate(grad, lg.grad);
      rec.losses.push_back({{gates.active_encoder_layers(), gates.active_decoder_layers()},
                            static_cast<double>(lg.loss)});
      rec.active_enc_layers += gates.active_encoder_layers();
      rec.active_dec_layers += gates.active_decoder_layers();
      ++rec.forward_passes;
    }
    adam.step(result.params, grad, rec.lr);
    result.log.steps.push_back(std::move(rec));
  }
  return result;
}

struct DistillCorpus {
  std::vector<Example> pairs;
  std::size_t excluded = 0;  // sources the teacher decoded to nothing
};

/// Replaces every target with the teacher's full-depth greedy output.
template <typename T>
DistillCorpus generate_distillation(const Parameters<T>& teacher, std::span<const Example> sources,
                                    int max_decode_len) {
  DistillCorpus out;
  const GateVector gates = all_gates_on(teacher.config);
  for (const Example& e : sources) {
    auto hyp = greedy_decode(teacher, std::span<const int>(e.source), gates, max_decode_len);
    if (hyp.empty()) {
      ++out.excluded;
      continue;
    }
    out.pairs.push_back({e.source, std::move(hyp)});
  }
  return out;
}

}  // namespace flexdepth
