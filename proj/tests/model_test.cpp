#include "flexdepth/model.hpp"

#include <gtest/gtest.h>

#include "gradient_check.hpp"

namespace flexdepth {
namespace {

using testing::finite_difference_check;
using testing::random_batch;

ModelConfig tiny_config() {
  ModelConfig c;
  c.enc_layers = 3;
  c.dec_layers = 2;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 12;
  c.vocab_size = 9;
  c.max_len = 8;
  return c;
}

TEST(InitParams, DeterministicPerSeed) {
  const ModelConfig c = tiny_config();
  EXPECT_TRUE(bitwise_equal(init_params(c, 1), init_params(c, 1)));
  EXPECT_FALSE(bitwise_equal(init_params(c, 1), init_params(c, 2)));
}

TEST(InitParams, Shapes) {
  ModelConfig c;
  c.width = 32;
  c.heads = 2;
  EXPECT_EQ(c.head_width(), 16);
  const auto p = init_params(c, 0);
  EXPECT_EQ(p.enc[0].self.q.w.rows(), 32);
  EXPECT_EQ(p.enc[0].self.q.w.cols(), 32);
  EXPECT_EQ(p.enc[0].ffn.up.w.cols(), 64);
  EXPECT_EQ(p.out.w.cols(), c.vocab_size);
  EXPECT_EQ(p.enc.size(), 4u);
  EXPECT_EQ(p.dec.size(), 2u);
}

TEST(InitParams, RejectsBadConfig) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(init_params(c, 0), ValidationError);
}

TEST(Gradient, MatchesFiniteDifferencesWithMaskedLayer) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 11);
  const Batch batch = random_batch(c, 3, 5, 3);
  const GateVector gates{{1, 0, 1}, {1, 1}};
  const auto checks = finite_difference_check(params, batch, gates, 20, 5);
  EXPECT_EQ(checks.size(), 7u);
  for (const auto& [type, list] : checks) {
    ASSERT_EQ(list.size(), 20u);
    for (const auto& ck : list) {
      EXPECT_LT(ck.rel_error, 1e-4) << type << " " << ck.tensor << "[" << ck.index << "] analytic "
                                    << ck.analytic << " numeric " << ck.numeric;
    }
  }
}

TEST(Gradient, MaskedLayersGetExactlyZero) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 11);
  const Batch batch = random_batch(c, 3, 5, 3);
  const GateVector gates{{0, 1, 0}, {1, 0}};
  const auto grad = loss_and_gradient(params, batch, gates).grad;
  for_each_tensor(grad, [](const std::string& name, const Matrix<double>& m) {
    const bool masked = name.rfind("enc.1.", 0) == 0 || name.rfind("enc.3.", 0) == 0 ||
                        name.rfind("dec.2.", 0) == 0;
    if (masked) {
      EXPECT_TRUE((m.array() == 0.0).all()) << name;
    }
  });
  EXPECT_GT(grad.enc[1].ffn.up.w.norm(), 0.0);
}

TEST(Gradient, ScalesLinearlyWithLoss) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 4);
  const Batch batch = random_batch(c, 2, 4, 9);
  const auto pass = forward_loss(params, batch, all_gates_on(c));
  const auto g1 = backward(params, pass);
  const auto g2 = backward(params, pass, 2.0);
  auto a = tensor_list(g1);
  auto b = tensor_list(g2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(((2.0 * *a[i]).array() == b[i]->array()).all());
  }
}

TEST(Gates, GatedLayerIsBitwiseIdentity) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 3);
  const std::vector<int> src{3, 4, 5, 6};
  const GateVector none{{0, 0, 0}, {0, 0}};
  const GateVector one_off{{1, 0, 1}, {1, 1}};
  // Embedding output fed through only final norm: same as encode with all gates off.
  const auto x = detail::embed(params.src_embed, params.src_pos, std::span<const int>(src), c.vocab_size);
  ops::NormCache<double> nc;
  const Matrix<double> expected = ops::layer_norm(params.enc_norm, x, nc);
  EXPECT_TRUE((encode(params, std::span<const int>(src), none).array() == expected.array()).all());

  // Layer 2 gated off: output of layer 1 reaches layer 3 untouched.
  EncoderLayerCache<double> cache;
  Matrix<double> h = encoder_layer(params.enc[0], c.heads, x, cache);
  h = encoder_layer(params.enc[2], c.heads, h, cache);
  const Matrix<double> manual = ops::layer_norm(params.enc_norm, h, nc);
  EXPECT_TRUE((encode(params, std::span<const int>(src), one_off).array() == manual.array()).all());
}

TEST(Gates, AllOnEqualsUngatedAndAllOffIsEmbeddingModel) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 3);
  const Batch batch = random_batch(c, 4, 6, 1);
  // The full stack with every gate on is the ungated model.
  const auto full = extract_subnetwork(params, SubNetwork{3, {1, 2, 3}}, SubNetwork{2, {1, 2}});
  EXPECT_EQ(loss(params, batch, all_gates_on(c)), loss(full, batch, all_gates_on(full.config)));
  const double off = loss(params, batch, GateVector{{0, 0, 0}, {0, 0}});
  EXPECT_TRUE(std::isfinite(off));
  EXPECT_NE(off, loss(params, batch, all_gates_on(c)));
}

TEST(Gates, MaskedForwardEqualsRestackedModel) {
  ModelConfig c = tiny_config();
  c.enc_layers = 6;
  c.dec_layers = 4;
  const auto params = init_params(c, 21);
  const Batch batch = random_batch(c, 3, 6, 2);
  const std::vector<std::pair<SubNetwork, SubNetwork>> cases{
      {{6, {1, 3, 5}}, {4, {2, 4}}},
      {{6, {2}}, {4, {1, 2, 3, 4}}},
      {{6, {1, 2, 3, 4, 5, 6}}, {4, {3}}},
  };
  for (const auto& [enc, dec] : cases) {
    const auto stacked = extract_subnetwork(params, enc, dec);
    const double masked = loss(params, batch, gates_from(c, enc, dec));
    const double restacked = loss(stacked, batch, all_gates_on(stacked.config));
    EXPECT_EQ(masked, restacked);
  }
}

TEST(Gates, LeftPlanAndPruningRuleGiveSameLoss) {
  ModelConfig c = tiny_config();
  c.enc_layers = 12;
  c.dec_layers = 2;
  const auto params = init_params(c, 5);
  const Batch batch = random_batch(c, 2, 5, 8);
  const SubNetwork dec{2, {1, 2}};
  const auto left = assign_left(divisor_depths(12)).at(6);
  const auto pruned = layerdrop_inference_mask(12, 6);
  EXPECT_EQ(loss(params, batch, gates_from(c, left, dec)), loss(params, batch, gates_from(c, pruned, dec)));
}

TEST(Gates, RejectsLengthMismatch) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 3);
  const Batch batch = random_batch(c, 1, 3, 1);
  EXPECT_THROW(loss(params, batch, GateVector{{1, 1}, {1, 1}}), ValidationError);
  EXPECT_THROW(gates_from(c, SubNetwork{4, {1}}, SubNetwork{2, {1}}), ValidationError);
}

TEST(SampleGates, Extremes) {
  const ModelConfig c = tiny_config();
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(sample_gates(0.0, c, rng), all_gates_on(c));
    const GateVector off = sample_gates(1.0, c, rng);
    EXPECT_EQ(off.active_encoder_layers() + off.active_decoder_layers(), 0);
  }
  EXPECT_THROW(sample_gates(1.5, c, rng), ValidationError);
}

TEST(SampleGates, BernoulliMean) {
  ModelConfig c = tiny_config();
  c.enc_layers = 12;
  c.dec_layers = 1;
  Rng rng(2024);
  double on = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) on += sample_gates(0.2, c, rng).active_encoder_layers();
  EXPECT_NEAR(on / (draws * 12.0), 0.8, 0.02);
}

TEST(GreedyDecode, DeterministicAndBounded) {
  const ModelConfig c = tiny_config();
  const auto params = init_params(c, 3);
  const std::vector<int> src{3, 4, 5};
  const auto gates = all_gates_on(c);
  EXPECT_TRUE(greedy_decode(params, std::span<const int>(src), gates, 0).empty());
  const auto a = greedy_decode(params, std::span<const int>(src), gates, 5);
  EXPECT_EQ(a, greedy_decode(params, std::span<const int>(src), gates, 5));
  EXPECT_LE(a.size(), 5u);
  EXPECT_LE(greedy_decode(params, std::span<const int>(src), gates, 100).size(),
            static_cast<std::size_t>(c.max_len - 1));
}

TEST(Batch, TokenCountAndMasks) {
  const std::vector<Example> ex{{{3, 4}, {5}}, {{3}, {4, 5, 6}}};
  const Batch b = make_batch(ex, 7);
  EXPECT_EQ(b.token_count(), 2u + 4u);
  EXPECT_TRUE(b.source_mask(0, 1));
  EXPECT_FALSE(b.source_mask(1, 1));
  EXPECT_EQ(b.source(1, 1), kPad);
  EXPECT_EQ(b.target_row(1), (std::vector<int>{4, 5, 6}));
}

TEST(ForwardLoss, ReportsBatchIdOnNonFiniteLoss) {
  const ModelConfig c = tiny_config();
  auto params = init_params(c, 3);
  params.out.b(0, 3) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<Example> ex{{{3}, {4}}};
  const Batch b = make_batch(ex, 42);
  try {
    loss(params, b, all_gates_on(c));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
}

}  // namespace
}  // namespace flexdepth
