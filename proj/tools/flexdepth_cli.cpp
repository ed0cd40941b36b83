// flexdepth: plans, metrics, and the train/evaluate pipeline from the shell.
//
// Exit codes: 0 success, 2 usage, 3 invalid input, 4 runtime failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "flexdepth/metrics.hpp"
#include "flexdepth/pipeline.hpp"

namespace fs = std::filesystem;
using namespace flexdepth;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitRuntime = 4;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--seed", c.seed, "Run seed (overrides the config)");
  cmd->add_option("--config", c.config, "JSON run config; omitted fields take defaults")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, out_help);
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(c.config);
  if (c.seed) set_seed(cfg, *c.seed);
  return cfg;
}

fs::path out_dir(const Common& c, const RunConfig& cfg) {
  return c.out.empty() ? fs::path("runs") / cfg.name : fs::path(c.out);
}

const CLI::Validator kStrategyName(
    [](std::string& s) {
      try {
        parse_strategy(s);
        return std::string();
      } catch (const ValidationError&) {
        return "unknown strategy '" + s + "' (valid: " + strategy_list() + ")";
      }
    },
    "STRATEGY", "strategy");

const CLI::Validator kPositiveDepth(
    [](std::string& s) {
      int d = 0;
      try {
        d = std::stoi(s);
      } catch (const std::exception&) {
        return std::string("depth must be an integer");
      }
      if (d < 1) return std::string("depth must be >= 1");
      return std::string();
    },
    "DEPTH", "depth");

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path);
  os << text;
}

// --------------------------------------------------------------------------

int cmd_plan(int depth, const std::string& strategy, bool literal_tb, const Common& c) {
  const AssignmentPlan plan = assign(parse_strategy(strategy), divisor_depths(depth));
  const PlanMetrics m = compute_metrics(plan, literal_tb ? TbConvention::kPopulation : TbConvention::kSample);
  write_or_print(c.out, serialize_plan(plan));
  if (!c.out.empty()) std::cout << "wrote " << c.out << '\n';
  std::cout << "TB  " << fixed(m.tb, 4) << '\n';
  std::cout << "ALD " << (m.ald_defined ? fixed(m.ald, 4) : std::string("undefined")) << '\n';
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

int cmd_metrics(int depth, bool literal_tb, bool csv_only, const Common& c) {
  if (depth == 1 || is_prime(depth)) {
    throw ValidationError("depth " + std::to_string(depth) +
                          " has no divisors besides 1 and itself; every strategy yields the same two "
                          "sub-networks, so the comparison needs a composite depth");
  }
  const DepthSet set = divisor_depths(depth);
  const TbConvention conv = literal_tb ? TbConvention::kPopulation : TbConvention::kSample;
  std::ostringstream text, csv;
  text << "D = " << depth << ", depths {";
  for (std::size_t i = 0; i < set.depths.size(); ++i) text << (i ? "," : "") << set.depths[i];
  text << "}, TB divisor " << (literal_tb ? "D" : "D-1") << '\n';
  text << std::left << std::setw(12) << "strategy" << std::right << std::setw(8) << "TB" << std::setw(8) << "ALD"
       << '\n';
  csv << "strategy,tb,ald\n";
  for (Strategy s : kAllStrategies) {
    const PlanMetrics m = compute_metrics(assign(s, set), conv);
    text << std::left << std::setw(12) << strategy_display_name(s) << std::right << std::setw(8) << fixed(m.tb, 2)
         << std::setw(8) << fixed(m.ald, 2) << '\n';
    csv << strategy_name(s) << ',' << format_number(m.tb) << ',' << format_number(m.ald) << '\n';
  }
  if (csv_only) {
    std::cout << csv.str();
  } else {
    std::cout << text.str() << '\n' << csv.str();
  }
  if (!c.out.empty()) write_or_print(c.out, csv.str());
  return 0;
}

int cmd_pretrain(const Common& c) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = out_dir(c, cfg);
  fs::create_directories(dir);
  const Dataset data = make_run_data(cfg);
  save_corpus((dir / "train.tsv").string(), data.train);
  save_corpus((dir / "test.tsv").string(), data.test);
  const auto r = run_pretrain(cfg, data);
  save_checkpoint((dir / "teacher.ckpt").string(), r.params, run_metadata(cfg, "pretrain"));
  write_text(dir / "pretrain_log.csv", [&](std::ostream& os) { write_log_csv(os, r.log); });
  const Accuracy acc = evaluate_gates(r.params, all_gates_on(r.params.config), data.test, cfg.decode_len());
  std::cout << "full-depth sequence accuracy " << fixed(acc.sequence, 4) << '\n';
  std::cout << "wrote " << (dir / "teacher.ckpt").string() << '\n';
  return 0;
}

int cmd_distill(const Common& c, std::string teacher, std::string sources) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = out_dir(c, cfg);
  if (teacher.empty()) teacher = (dir / "teacher.ckpt").string();
  const auto params = load_checkpoint(teacher);
  const std::vector<Example> src = sources.empty() ? make_run_data(cfg).train : load_corpus(sources);
  const DistillCorpus kd = generate_distillation(params, src, cfg.decode_len());
  fs::create_directories(dir);
  save_corpus((dir / "distill.tsv").string(), kd.pairs);
  std::cout << "pairs " << kd.pairs.size() << ", excluded " << kd.excluded << '\n';
  std::cout << "wrote " << (dir / "distill.tsv").string() << '\n';
  return 0;
}

int cmd_finetune(const Common& c, std::string teacher, std::string corpus) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = out_dir(c, cfg);
  if (teacher.empty()) teacher = (dir / "teacher.ckpt").string();
  if (corpus.empty()) corpus = (dir / "distill.tsv").string();
  const auto params = load_checkpoint(teacher);
  if (params.config.enc_layers != cfg.model.enc_layers || params.config.dec_layers != cfg.model.dec_layers) {
    throw ValidationError("teacher depth does not match the config's model section");
  }
  const auto pairs = load_corpus(corpus);
  const auto r = run_finetune(cfg, params, pairs);
  fs::create_directories(dir);
  save_checkpoint((dir / "finetuned.ckpt").string(), r.params, run_metadata(cfg, "finetune"));
  write_text(dir / "finetune_log.csv", [&](std::ostream& os) { write_log_csv(os, r.log); });
  std::cout << finetune_label(cfg) << ": " << r.log.steps.size() << " steps, " << r.log.total_forward_passes()
            << " forward passes\n";
  std::cout << "wrote " << (dir / "finetuned.ckpt").string() << '\n';
  return 0;
}

int cmd_eval_grid(const Common& c, const std::string& checkpoint, const std::string& strategy,
                  const std::string& test) {
  RunConfig cfg = load_config(c);
  if (!strategy.empty()) cfg.finetune.strategy = parse_strategy(strategy);
  const auto params = load_checkpoint(checkpoint);
  if (params.config.enc_layers != cfg.model.enc_layers || params.config.dec_layers != cfg.model.dec_layers) {
    throw ValidationError("checkpoint depth does not match the config's model section");
  }
  Dataset data;
  data.test = test.empty() ? make_run_data(cfg).test : load_corpus(test);
  const EvalGrid g = run_evaluate(cfg, params, data, fs::path(checkpoint).filename().string());
  write_heatmap(std::cout, g, "sequence accuracy, " + std::string(strategy_name(cfg.finetune.strategy)) + " plans");
  if (!c.out.empty()) {
    write_text(c.out, [&](std::ostream& os) { write_grid_csv(os, g); });
    std::cout << "wrote " << c.out << '\n';
  }
  return 0;
}

EvalGrid load_grid(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read " + path);
  return read_grid_csv(is);
}

int cmd_report(const Common& c, const std::string& a, const std::string& b, const std::string& label_a,
               const std::string& label_b) {
  std::ostringstream os;
  write_delta_report(os, delta_report(load_grid(a), load_grid(b)), label_a, label_b);
  std::cout << os.str();
  if (!c.out.empty()) write_or_print(c.out, os.str());
  return 0;
}

int cmd_pipeline(const Common& c, bool quiet) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = out_dir(c, cfg);
  const PipelineResult r = run_pipeline(cfg, dir, quiet ? nullptr : &std::cerr);
  std::cout << r.report;
  std::cout << "artifacts in " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flexdepth: flexible-depth encoder-decoder training on synthetic tasks"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress lines on stderr");

  Common common;
  int depth = 12;
  std::string strategy;
  bool literal_tb = false;
  bool csv_only = false;
  std::string teacher, corpus, checkpoint, test, grid_a, grid_b;
  std::string label_a = "a", label_b = "b";

  auto* plan = app.add_subcommand("plan", "Print the sub-network plan for one strategy with its TB and ALD");
  add_common(plan, common, "Write the plan document here instead of stdout");
  plan->add_option("--depth", depth, "Total depth D")->required()->check(kPositiveDepth);
  plan->add_option("--strategy", strategy, "One of: " + strategy_list())->required()->check(kStrategyName);
  plan->add_flag("--literal-tb", literal_tb, "Divide the TB variance by D instead of D-1");

  auto* metrics = app.add_subcommand("metrics", "TB and ALD of all five strategies at one depth");
  add_common(metrics, common, "Also write the CSV here");
  metrics->add_option("--depth", depth, "Total depth D (composite)")->capture_default_str()->check(kPositiveDepth);
  metrics->add_flag("--literal-tb", literal_tb, "Divide the TB variance by D instead of D-1");
  metrics->add_flag("--csv", csv_only, "Print only the CSV");

  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the full-depth teacher");
  add_common(pretrain_cmd, common, "Run directory (default runs/<name>)");

  auto* distill = app.add_subcommand("distill", "Decode the training sources with the teacher");
  add_common(distill, common, "Run directory (default runs/<name>)");
  distill->add_option("--teacher", teacher, "Teacher checkpoint (default <out>/teacher.ckpt)");
  distill->add_option("--sources", corpus, "Source corpus TSV (default: the config's training set)");

  auto* finetune = app.add_subcommand("finetune", "Multi-task or LayerDrop fine-tuning from the teacher");
  add_common(finetune, common, "Run directory (default runs/<name>)");
  finetune->add_option("--teacher", teacher, "Teacher checkpoint (default <out>/teacher.ckpt)");
  finetune->add_option("--corpus", corpus, "Training corpus TSV (default <out>/distill.tsv)");

  auto* eval = app.add_subcommand("eval-grid", "Accuracy of a checkpoint at every grid cell");
  add_common(eval, common, "Write the grid CSV here");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--strategy", strategy, "Plan strategy (default: the config's)")->check(kStrategyName);
  eval->add_option("--test", test, "Test corpus TSV (default: the config's test set)");

  auto* report = app.add_subcommand("report", "Per-cell comparison of two grid CSVs");
  add_common(report, common, "Also write the report here");
  report->add_option("--baseline", grid_a, "Grid CSV a")->required()->check(CLI::ExistingFile);
  report->add_option("--candidate", grid_b, "Grid CSV b")->required()->check(CLI::ExistingFile);
  report->add_option("--baseline-label", label_a)->capture_default_str();
  report->add_option("--candidate-label", label_b)->capture_default_str();

  auto* pipeline = app.add_subcommand("pipeline", "pretrain, distill, finetune, evaluate and report");
  add_common(pipeline, common, "Run directory (default runs/<name>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*plan) return cmd_plan(depth, strategy, literal_tb, common);
    if (*metrics) return cmd_metrics(depth, literal_tb, csv_only, common);
    if (*pretrain_cmd) return cmd_pretrain(common);
    if (*distill) return cmd_distill(common, teacher, corpus);
    if (*finetune) return cmd_finetune(common, teacher, corpus);
    if (*eval) return cmd_eval_grid(common, checkpoint, strategy, test);
    if (*report) return cmd_report(common, grid_a, grid_b, label_a, label_b);
    if (*pipeline) return cmd_pipeline(common, quiet);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
