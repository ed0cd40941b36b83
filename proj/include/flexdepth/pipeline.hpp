#pragma once

// pretrain -> distill -> finetune -> evaluate, with artifacts written to a
// directory. Each stage is also callable on its own.

#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/config.hpp"
#include "flexdepth/evaluation.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth {

inline constexpr std::uint64_t kDataStream = 4;

inline Dataset make_run_data(const RunConfig& c) {
  return make_dataset(c.data, derive_seed(c.seed, kDataStream));
}

inline TrainResult<double> run_pretrain(const RunConfig& c, const Dataset& data) {
  return pretrain<double>(resolved_model(c), data.train, c.pretrain);
}

inline DistillCorpus run_distill(const RunConfig& c, const Parameters<double>& teacher, const Dataset& data) {
  if (!c.finetune.distill) return {data.train, 0};
  return generate_distillation(teacher, data.train, c.decode_len());
}

inline GridPlans run_plans(const RunConfig& c) {
  return make_plans(c.finetune.strategy, resolved_grid(c));
}

inline TrainResult<double> run_finetune(const RunConfig& c, const Parameters<double>& teacher,
                                        std::span<const Example> corpus) {
  const DepthGrid grid = resolved_grid(c);
  if (c.finetune.method == FinetuneMethod::kLayerDrop) {
    const int accum = c.finetune.layerdrop_accum > 0 ? c.finetune.layerdrop_accum
                                                     : static_cast<int>(c.finetune.train.policy.passes_per_step(grid));
    return finetune_layerdrop(teacher, corpus, c.finetune.layerdrop_p, accum, c.finetune.train);
  }
  return finetune_multitask(teacher, corpus, grid, run_plans(c), c.finetune.train);
}

inline EvalGrid run_evaluate(const RunConfig& c, const Parameters<double>& params, const Dataset& data,
                             const std::string& checkpoint_id) {
  EvalGrid g = evaluate_grid(params, resolved_grid(c), run_plans(c), data.test, c.decode_len());
  g.checkpoint_id = checkpoint_id;
  g.dataset_id = std::string(task_name(c.data.task)) + "-seed" + std::to_string(c.seed);
  return g;
}

inline std::string finetune_label(const RunConfig& c) {
  return c.finetune.method == FinetuneMethod::kLayerDrop ? "layerdrop" : "multitask";
}

/// Runs `f`, prefixing any library error with the stage name while keeping
/// its class.
template <typename F>
auto run_stage(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const EmptyNetworkError& e) {
    throw EmptyNetworkError("stage " + stage + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError("stage " + stage + ": " + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError("stage " + stage + ": " + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError("stage " + stage + ": " + e.what());
  } catch (const Error& e) {
    throw Error("stage " + stage + ": " + e.what());
  }
}

struct PipelineResult {
  RunConfig config;
  Dataset data;
  TrainResult<double> teacher;
  DistillCorpus corpus;
  TrainResult<double> finetuned;
  EvalGrid baseline;
  EvalGrid candidate;
  DeltaReport delta;
  std::string report;
};

namespace detail {

inline double final_loss(const TrainLog& log) {
  return log.steps.empty() ? 0.0 : log.steps.back().mean_loss();
}

inline std::string depth_list(const std::vector<int>& d) {
  std::string s = "{";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
  return s + "}";
}

}  // namespace detail

inline std::string render_report(const PipelineResult& r) {
  const RunConfig& c = r.config;
  const DepthGrid grid = resolved_grid(c);
  const std::string label = finetune_label(c);
  std::ostringstream os;
  os << "run " << c.name << "\n";
  os << "seed " << c.seed << "\n";
  os << "task " << task_name(c.data.task) << " (noise " << fixed(c.data.target_noise, 3) << "), train "
     << r.data.train.size() << ", test " << r.data.test.size() << "\n";
  os << "model " << c.model.enc_layers << "-" << c.model.dec_layers << " width " << c.model.width << " heads "
     << c.model.heads << " ffn " << c.model.ffn_width << ", " << parameter_count(r.teacher.params)
     << " parameters\n";
  os << "grid encoder " << detail::depth_list(grid.encoder.depths) << " x decoder "
     << detail::depth_list(grid.decoder.depths) << " = " << grid.size() << " tasks\n";
  os << "\n";
  os << "pretrain steps " << c.pretrain.steps << ", final loss " << fixed(detail::final_loss(r.teacher.log), 6)
     << "\n";
  os << "distill " << (c.finetune.distill ? "on" : "off") << ", pairs " << r.corpus.pairs.size() << ", excluded "
     << r.corpus.excluded << "\n";
  os << "finetune " << label << " (eval plans " << strategy_name(c.finetune.strategy) << "), steps "
     << c.finetune.train.steps << ", forward passes " << r.finetuned.log.total_forward_passes() << ", final loss "
     << fixed(detail::final_loss(r.finetuned.log), 6) << "\n";
  os << "\n";
  write_heatmap(os, r.baseline, "vanilla truncation (sequence accuracy)");
  os << "\n";
  write_heatmap(os, r.candidate, label + " (sequence accuracy)");
  os << "\n";
  write_delta_report(os, r.delta, "vanilla", label);
  return os.str();
}

inline CheckpointMetadata run_metadata(const RunConfig& c, const std::string& stage) {
  return {{"stage", stage}, {"seed", std::to_string(c.seed)}, {"config", to_json(c).dump()}};
}

inline void write_text(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  body(os);
  if (!os) throw Error("write failed: " + path.string());
}

/// Runs every stage. When `out` is non-empty each stage writes its artifacts
/// there as soon as it finishes, so a later failure leaves earlier outputs in
/// place. `progress`, when set, receives one line per stage.
inline PipelineResult run_pipeline(const RunConfig& c, const std::filesystem::path& out = {},
                                   std::ostream* progress = nullptr) {
  const bool write = !out.empty();
  auto note = [&](const std::string& s) {
    if (progress) *progress << s << std::endl;
  };
  PipelineResult r;
  r.config = c;
  run_stage("data", [&] {
    r.data = make_run_data(c);
    if (!write) return;
    std::filesystem::create_directories(out);
    write_text(out / "config.json", [&](std::ostream& os) { os << to_json(c).dump(2) << '\n'; });
    save_corpus((out / "train.tsv").string(), r.data.train);
    save_corpus((out / "test.tsv").string(), r.data.test);
  });
  note("pretrain: " + std::to_string(c.pretrain.steps) + " steps");
  run_stage("pretrain", [&] {
    r.teacher = run_pretrain(c, r.data);
    if (!write) return;
    save_checkpoint((out / "teacher.ckpt").string(), r.teacher.params, run_metadata(c, "pretrain"));
    write_text(out / "pretrain_log.csv", [&](std::ostream& os) { write_log_csv(os, r.teacher.log); });
  });
  note("distill");
  run_stage("distill", [&] {
    r.corpus = run_distill(c, r.teacher.params, r.data);
    if (write) save_corpus((out / "distill.tsv").string(), r.corpus.pairs);
  });
  note("finetune: " + finetune_label(c) + ", " + std::to_string(c.finetune.train.steps) + " steps");
  run_stage("finetune", [&] {
    r.finetuned = run_finetune(c, r.teacher.params, r.corpus.pairs);
    if (!write) return;
    save_checkpoint((out / "finetuned.ckpt").string(), r.finetuned.params, run_metadata(c, "finetune"));
    write_text(out / "finetune_log.csv", [&](std::ostream& os) { write_log_csv(os, r.finetuned.log); });
  });
  note("evaluate");
  run_stage("evaluate", [&] {
    r.baseline = run_evaluate(c, r.teacher.params, r.data, "vanilla-truncation");
    r.candidate = run_evaluate(c, r.finetuned.params, r.data, "finetuned");
    if (!write) return;
    write_text(out / "grid_baseline.csv", [&](std::ostream& os) { write_grid_csv(os, r.baseline); });
    write_text(out / "grid_finetuned.csv", [&](std::ostream& os) { write_grid_csv(os, r.candidate); });
  });
  run_stage("report", [&] {
    r.delta = delta_report(r.baseline, r.candidate);
    r.report = render_report(r);
    if (write) write_text(out / "report.txt", [&](std::ostream& os) { os << r.report; });
  });
  return r;
}

}  // namespace flexdepth
