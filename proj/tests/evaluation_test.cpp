#include <gtest/gtest.h>

#include <sstream>

#include "flexdepth/evaluation.hpp"

namespace flexdepth {
namespace {

using Seqs = std::vector<std::vector<int>>;

TEST(SequenceAccuracy, Examples) {
  const Seqs refs{{3, 4}, {5}, {6, 7, 8}, {3}};
  EXPECT_DOUBLE_EQ(sequence_accuracy(refs, refs).sequence, 1.0);
  EXPECT_DOUBLE_EQ(sequence_accuracy(refs, refs).token, 1.0);
  const Seqs wrong{{4, 3}, {6}, {3}, {4}};
  EXPECT_DOUBLE_EQ(sequence_accuracy(wrong, refs).sequence, 0.0);
  const Seqs three{{3, 4}, {5}, {6, 7, 8}, {4}};
  EXPECT_DOUBLE_EQ(sequence_accuracy(three, refs).sequence, 0.75);
}

TEST(SequenceAccuracy, TokenAccuracyUsesLongerLength) {
  const Seqs refs{{3, 4, 5, 6}};
  const Seqs preds{{3, 4}};
  EXPECT_DOUBLE_EQ(sequence_accuracy(preds, refs).token, 0.5);
  const Seqs longer{{3, 4, 5, 6, 7, 8, 9, 10}};
  EXPECT_DOUBLE_EQ(sequence_accuracy(longer, refs).token, 0.5);
}

TEST(SequenceAccuracy, Errors) {
  const Seqs none;
  EXPECT_THROW(sequence_accuracy(none, none), ValidationError);
  const Seqs one{{3}};
  const Seqs two{{3}, {4}};
  EXPECT_THROW(sequence_accuracy(one, two), ValidationError);
}

EvalGrid synthetic_grid(std::vector<double> acc) {
  EvalGrid g;
  g.enc_depths = {1, 2, 4};
  g.dec_depths = {1, 2};
  std::size_t i = 0;
  for (int m : g.enc_depths) {
    for (int n : g.dec_depths) g.cells.push_back({{m, n}, {acc[i], acc[i]}, std::nullopt}), ++i;
  }
  return g;
}

TEST(DeltaReport, SelfComparisonIsAllTies) {
  const EvalGrid g = synthetic_grid({0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  const DeltaReport r = delta_report(g, g);
  EXPECT_EQ(r.ties, 6);
  EXPECT_EQ(r.wins_a + r.wins_b, 0);
  for (const auto& c : r.cells) EXPECT_EQ(c.delta, 0.0);
  EXPECT_EQ(r.mean_delta, 0.0);
}

TEST(DeltaReport, WinsAndMeans) {
  const EvalGrid a = synthetic_grid({0.0, 0.5, 0.5, 0.5, 1.0, 1.0});
  const EvalGrid b = synthetic_grid({0.5, 0.5, 1.0, 0.25, 1.0, 1.0});
  const DeltaReport r = delta_report(a, b);
  EXPECT_EQ(r.wins_b, 2);
  EXPECT_EQ(r.wins_a, 1);
  EXPECT_EQ(r.ties, 3);
  EXPECT_DOUBLE_EQ(r.mean_a, 3.5 / 6);
  EXPECT_DOUBLE_EQ(r.mean_b, 4.25 / 6);
  std::ostringstream os;
  write_delta_report(os, r, "vanilla", "multitask");
  EXPECT_NE(os.str().find("multitask wins 2/6"), std::string::npos);
  EXPECT_NE(os.str().find("+0.5000"), std::string::npos);
}

TEST(DeltaReport, ShapeMismatch) {
  EvalGrid a = synthetic_grid({0, 0, 0, 0, 0, 0});
  EvalGrid b = a;
  b.dec_depths = {1};
  EXPECT_THROW(delta_report(a, b), ValidationError);
}

TEST(GridCsv, RoundTripIsExact) {
  EvalGrid g = synthetic_grid({0.1, 1.0 / 3.0, 0.0, 1.0, 0.995, 0.25});
  g.cells[2].error = "no layers";
  std::stringstream ss;
  write_grid_csv(ss, g);
  const EvalGrid back = read_grid_csv(ss);
  EXPECT_EQ(back.enc_depths, g.enc_depths);
  EXPECT_EQ(back.dec_depths, g.dec_depths);
  ASSERT_EQ(back.cells.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(back.cells[i].task, g.cells[i].task);
    EXPECT_EQ(back.cells[i].error.has_value(), g.cells[i].error.has_value());
    if (!g.cells[i].error) {
      EXPECT_EQ(back.cells[i].accuracy.sequence, g.cells[i].accuracy.sequence);
    }
  }
  std::istringstream bad("a,b\n");
  EXPECT_THROW(read_grid_csv(bad), ValidationError);
}

TEST(GridCsv, HeatmapHasMeanLine) {
  const EvalGrid g = synthetic_grid({0, 0, 1, 1, 1, 1});
  std::ostringstream os;
  write_heatmap(os, g, "title");
  EXPECT_EQ(os.str().rfind("mean 0.6667\n"), os.str().size() - 12);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.enc_layers = 4;
  c.dec_layers = 2;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 16;
  c.vocab_size = 9;
  c.max_len = 8;
  return c;
}

TEST(EvaluateGrid, DeterministicAndFullDepthCellIsStrategyIndependent) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 4);
  DataConfig dc;
  dc.symbols = 6;
  dc.min_len = 2;
  dc.max_len = 5;
  dc.train_size = 10;
  dc.test_size = 30;
  const Dataset d = make_dataset(dc, 2);
  const DepthGrid grid = task_grid(4, 2);
  const auto a = evaluate_grid(params, grid, make_plans(Strategy::kOptimal, grid), d.test, 7);
  const auto b = evaluate_grid(params, grid, make_plans(Strategy::kOptimal, grid), d.test, 7);
  std::ostringstream sa, sb;
  write_grid_csv(sa, a);
  write_grid_csv(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.cells.size(), 6u);
  for (Strategy s : kAllStrategies) {
    const auto g = evaluate_grid(params, grid, make_plans(s, grid), d.test, 7);
    EXPECT_EQ(g.cell(4, 2).accuracy.sequence, a.cell(4, 2).accuracy.sequence);
    EXPECT_EQ(g.cell(4, 2).accuracy.token, a.cell(4, 2).accuracy.token);
  }
  EXPECT_THROW((void)a.cell(3, 2), ValidationError);
}

}  // namespace
}  // namespace flexdepth
