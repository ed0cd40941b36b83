#pragma once

// Run configuration for the end-to-end pipeline. Every field has a default,
// so "{}" is a valid config. Model vocabulary and positional range are
// derived from the data section.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexdepth/assignment.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth {

enum class FinetuneMethod { kMultitask, kLayerDrop };

struct FinetuneConfig {
  FinetuneMethod method = FinetuneMethod::kMultitask;
  Strategy strategy = Strategy::kOptimal;  // training plans (multitask) and evaluation plans
  TrainConfig train;
  double layerdrop_p = 0.2;
  int layerdrop_accum = 0;  // 0: one pass per grid task, matching the multitask cost
  bool distill = true;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  ModelConfig model;
  DataConfig data;
  TrainConfig pretrain;
  FinetuneConfig finetune;
  int max_decode_len = 0;  // 0: data.max_len + 1
  std::optional<std::vector<int>> enc_depths;  // restrict the grid; full depth always kept
  std::optional<std::vector<int>> dec_depths;

  [[nodiscard]] int decode_len() const { return max_decode_len > 0 ? max_decode_len : data.max_len + 1; }
};

inline RunConfig default_run_config() {
  RunConfig c;
  c.pretrain.steps = 2000;
  c.pretrain.schedule = {Schedule::Kind::kInverseSqrt, 3e-3, 200};
  c.finetune.train.steps = 400;
  c.finetune.train.schedule = {Schedule::Kind::kInverseSqrt, 1e-3, 100};
  return c;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config field '") + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known |= k == key;
    if (!known) throw ValidationError("unknown config field '" + where + k + "'");
  }
}

inline Schedule read_schedule(const nlohmann::json& j, Schedule s, const std::string& where) {
  reject_unknown(j, {"kind", "peak_lr", "warmup"}, where);
  if (j.contains("kind")) {
    std::string kind;
    read_field(j, "kind", kind);
    s.kind = parse_schedule_kind(kind);
  }
  read_field(j, "peak_lr", s.peak_lr);
  read_field(j, "warmup", s.warmup);
  return s;
}

inline void read_train(const nlohmann::json& j, TrainConfig& t, const std::string& where) {
  read_field(j, "steps", t.steps);
  read_field(j, "batch_size", t.batch_size);
  if (j.contains("schedule")) t.schedule = read_schedule(j.at("schedule"), t.schedule, where + "schedule.");
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps"}, where + "adam.");
    read_field(a, "beta1", t.adam.beta1);
    read_field(a, "beta2", t.adam.beta2);
    read_field(a, "eps", t.adam.eps);
  }
}

inline nlohmann::json schedule_json(const Schedule& s) {
  return {{"kind", schedule_kind_name(s.kind)}, {"peak_lr", s.peak_lr}, {"warmup", s.warmup}};
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  validate(c.data);
  ModelConfig m = c.model;
  m.vocab_size = c.data.vocab_size();
  m.max_len = c.data.max_len + 1;
  validate(m);
  validate(c.pretrain);
  validate(c.finetune.train);
  if (c.finetune.method == FinetuneMethod::kLayerDrop) {
    if (!(c.finetune.layerdrop_p > 0.0 && c.finetune.layerdrop_p < 1.0)) {
      throw ValidationError("layerdrop_p must lie in (0, 1)");
    }
    if (c.finetune.layerdrop_accum < 0) throw ValidationError("layerdrop_accum must be >= 0");
  }
  if (c.max_decode_len < 0) throw ValidationError("max_decode_len must be >= 0");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::read_field;
  using detail::reject_unknown;
  RunConfig c = default_run_config();
  reject_unknown(j, {"name", "seed", "model", "data", "pretrain", "finetune", "eval"}, "");
  read_field(j, "name", c.name);
  read_field(j, "seed", c.seed);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, {"enc_layers", "dec_layers", "width", "heads", "ffn_width"}, "model.");
    read_field(m, "enc_layers", c.model.enc_layers);
    read_field(m, "dec_layers", c.model.dec_layers);
    read_field(m, "width", c.model.width);
    read_field(m, "heads", c.model.heads);
    read_field(m, "ffn_width", c.model.ffn_width);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"task", "symbols", "min_len", "max_len", "train_size", "test_size", "target_noise"}, "data.");
    if (d.contains("task")) {
      std::string task;
      read_field(d, "task", task);
      c.data.task = parse_task(task);
    }
    read_field(d, "symbols", c.data.symbols);
    read_field(d, "min_len", c.data.min_len);
    read_field(d, "max_len", c.data.max_len);
    read_field(d, "train_size", c.data.train_size);
    read_field(d, "test_size", c.data.test_size);
    read_field(d, "target_noise", c.data.target_noise);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p, {"steps", "batch_size", "schedule", "adam"}, "pretrain.");
    detail::read_train(p, c.pretrain, "pretrain.");
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    reject_unknown(f,
                   {"strategy", "eval_strategy", "steps", "batch_size", "schedule", "adam", "policy", "layerdrop_p",
                    "layerdrop_accum", "distill", "enc_depths", "dec_depths"},
                   "finetune.");
    detail::read_train(f, c.finetune.train, "finetune.");
    if (f.contains("strategy")) {
      std::string s;
      read_field(f, "strategy", s);
      if (s == "layerdrop") {
        c.finetune.method = FinetuneMethod::kLayerDrop;
        c.finetune.strategy = Strategy::kLeft;
      } else {
        c.finetune.strategy = parse_strategy(s);
      }
    }
    if (f.contains("eval_strategy")) {
      std::string s;
      read_field(f, "eval_strategy", s);
      c.finetune.strategy = parse_strategy(s);
    }
    if (f.contains("policy")) {
      const auto& p = f.at("policy");
      reject_unknown(p, {"enc_tasks", "dec_tasks", "batch_fraction"}, "finetune.policy.");
      read_field(p, "enc_tasks", c.finetune.train.policy.enc_tasks);
      read_field(p, "dec_tasks", c.finetune.train.policy.dec_tasks);
      read_field(p, "batch_fraction", c.finetune.train.policy.batch_fraction);
    }
    read_field(f, "layerdrop_p", c.finetune.layerdrop_p);
    read_field(f, "layerdrop_accum", c.finetune.layerdrop_accum);
    read_field(f, "distill", c.finetune.distill);
    if (f.contains("enc_depths")) read_field(f, "enc_depths", c.enc_depths.emplace());
    if (f.contains("dec_depths")) read_field(f, "dec_depths", c.dec_depths.emplace());
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"max_decode_len"}, "eval.");
    read_field(e, "max_decode_len", c.max_decode_len);
  }
  c.pretrain.seed = c.seed;
  c.finetune.train.seed = c.seed;
  validate(c);
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  try {
    return parse_run_config(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

/// Overrides the run seed everywhere it is used.
inline void set_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.pretrain.seed = seed;
  c.finetune.train.seed = seed;
}

/// Fully resolved config, including defaults.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["model"] = {{"enc_layers", c.model.enc_layers},
                {"dec_layers", c.model.dec_layers},
                {"width", c.model.width},
                {"heads", c.model.heads},
                {"ffn_width", c.model.ffn_width}};
  j["data"] = {{"task", task_name(c.data.task)},      {"symbols", c.data.symbols},
               {"min_len", c.data.min_len},           {"max_len", c.data.max_len},
               {"train_size", c.data.train_size},     {"test_size", c.data.test_size},
               {"target_noise", c.data.target_noise}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"schedule", detail::schedule_json(c.pretrain.schedule)}};
  const auto& f = c.finetune;
  j["finetune"] = {
      {"strategy", f.method == FinetuneMethod::kLayerDrop ? std::string("layerdrop")
                                                          : std::string(strategy_name(f.strategy))},
      {"eval_strategy", strategy_name(f.strategy)},
      {"steps", f.train.steps},
      {"batch_size", f.train.batch_size},
      {"schedule", detail::schedule_json(f.train.schedule)},
      {"policy",
       {{"enc_tasks", f.train.policy.enc_tasks},
        {"dec_tasks", f.train.policy.dec_tasks},
        {"batch_fraction", f.train.policy.batch_fraction}}},
      {"layerdrop_p", f.layerdrop_p},
      {"layerdrop_accum", f.layerdrop_accum},
      {"distill", f.distill}};
  if (c.enc_depths) j["finetune"]["enc_depths"] = *c.enc_depths;
  if (c.dec_depths) j["finetune"]["dec_depths"] = *c.dec_depths;
  j["eval"] = {{"max_decode_len", c.max_decode_len}};
  return j;
}

/// Model config with vocabulary and length taken from the data section.
inline ModelConfig resolved_model(const RunConfig& c) {
  ModelConfig m = c.model;
  m.vocab_size = c.data.vocab_size();
  m.max_len = std::max(c.data.max_len, c.decode_len()) + 1;
  validate(m);
  return m;
}

inline DepthGrid resolved_grid(const RunConfig& c) {
  DepthSet enc = divisor_depths(c.model.enc_layers);
  DepthSet dec = divisor_depths(c.model.dec_layers);
  if (c.enc_depths) enc = restrict_depths(enc, *c.enc_depths);
  if (c.dec_depths) dec = restrict_depths(dec, *c.dec_depths);
  return make_grid(enc, dec);
}

}  // namespace flexdepth
