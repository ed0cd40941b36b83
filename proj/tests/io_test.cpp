#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/optimizer.hpp"

namespace flexdepth {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 16;
  c.vocab_size = 11;
  c.max_len = 10;
  return c;
}

TEST(Dataset, CopyAndReverseReferences) {
  DataConfig c;
  c.train_size = 50;
  c.test_size = 20;
  const Dataset copy = make_dataset(c, 3);
  for (const auto& e : copy.train) EXPECT_EQ(e.source, e.target);
  c.task = SyntheticTask::kReverse;
  const Dataset rev = make_dataset(c, 3);
  for (const auto& e : rev.test) {
    EXPECT_EQ(e.target, std::vector<int>(e.source.rbegin(), e.source.rend()));
  }
}

TEST(Dataset, LengthsAndSymbolsInRange) {
  DataConfig c;
  c.symbols = 5;
  c.min_len = 2;
  c.max_len = 6;
  const Dataset d = make_dataset(c, 9);
  EXPECT_EQ(d.train.size(), 2000u);
  EXPECT_EQ(d.test.size(), 200u);
  for (const auto& e : d.train) {
    EXPECT_GE(e.source.size(), 2u);
    EXPECT_LE(e.source.size(), 6u);
    for (int x : e.source) {
      EXPECT_GE(x, kFirstSymbol);
      EXPECT_LT(x, kFirstSymbol + 5);
    }
  }
}

TEST(Dataset, TestSourcesAreUnseenAndDistinct) {
  DataConfig c;
  const Dataset d = make_dataset(c, 4);
  std::set<std::vector<int>> test;
  for (const auto& e : d.test) test.insert(e.source);
  EXPECT_EQ(test.size(), d.test.size());
  for (const auto& e : d.train) EXPECT_FALSE(test.count(e.source));
}

TEST(Dataset, DeterministicPerSeed) {
  DataConfig c;
  c.train_size = 30;
  const Dataset a = make_dataset(c, 5);
  const Dataset b = make_dataset(c, 5);
  const Dataset other = make_dataset(c, 6);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].source, b.train[i].source);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) differs |= a.train[i].source != other.train[i].source;
  EXPECT_TRUE(differs);
}

TEST(Dataset, TargetNoiseRate) {
  DataConfig c;
  c.target_noise = 0.25;
  c.train_size = 4000;
  const Dataset d = make_dataset(c, 2);
  std::size_t flipped = 0, total = 0;
  for (const auto& e : d.train) {
    ASSERT_EQ(e.source.size(), e.target.size());
    for (std::size_t i = 0; i < e.source.size(); ++i) {
      flipped += e.source[i] != e.target[i];
      EXPECT_GE(e.target[i], kFirstSymbol);
      EXPECT_LT(e.target[i], c.vocab_size());
    }
    total += e.source.size();
  }
  EXPECT_NEAR(static_cast<double>(flipped) / static_cast<double>(total), 0.25, 0.01);
  for (const auto& e : d.test) EXPECT_EQ(e.source, e.target);
}

TEST(Dataset, RejectsBadConfig) {
  DataConfig c;
  c.min_len = 5;
  c.max_len = 4;
  EXPECT_THROW(make_dataset(c, 1), ValidationError);
  c = {};
  c.target_noise = 1.0;
  EXPECT_THROW(make_dataset(c, 1), ValidationError);
  c = {};
  c.symbols = 2;
  c.min_len = 1;
  c.max_len = 2;
  c.test_size = 50;
  EXPECT_THROW(make_dataset(c, 1), ValidationError);
  EXPECT_THROW(parse_task("sort"), ValidationError);
}

TEST(Corpus, RoundTrip) {
  const std::vector<Example> pairs{{{3, 4, 5}, {5, 4, 3}}, {{7}, {7, 7}}};
  std::stringstream ss;
  write_corpus(ss, pairs);
  EXPECT_EQ(ss.str(), "3 4 5\t5 4 3\n7\t7 7\n");
  const auto back = read_corpus(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].target, (std::vector<int>{7, 7}));
}

TEST(Corpus, RejectsMalformedLines) {
  std::istringstream no_tab("3 4 5\n");
  EXPECT_THROW(read_corpus(no_tab), ValidationError);
  std::istringstream bad_token("3 x\t3\n");
  EXPECT_THROW(read_corpus(bad_token), ValidationError);
}

TEST(Schedule, InverseSqrtShape) {
  const Schedule s{Schedule::Kind::kInverseSqrt, 1e-3, 100};
  EXPECT_DOUBLE_EQ(s.at(50), 5e-4);
  EXPECT_DOUBLE_EQ(s.at(100), 1e-3);
  EXPECT_DOUBLE_EQ(s.at(400), 5e-4);
  for (int t = 1; t < 100; ++t) EXPECT_LT(s.at(t), s.at(t + 1));
  for (int t = 100; t < 1000; ++t) EXPECT_GT(s.at(t), s.at(t + 1));
}

TEST(Schedule, ConstantAndParsing) {
  const Schedule s{Schedule::Kind::kConstant, 2e-3, 0};
  EXPECT_DOUBLE_EQ(s.at(1), 2e-3);
  EXPECT_DOUBLE_EQ(s.at(5000), 2e-3);
  EXPECT_EQ(parse_schedule_kind("constant"), Schedule::Kind::kConstant);
  EXPECT_THROW(parse_schedule_kind("cosine"), ValidationError);
  EXPECT_THROW(validate(Schedule{Schedule::Kind::kInverseSqrt, 1e-3, 0}), ValidationError);
  EXPECT_THROW(validate(Schedule{Schedule::Kind::kConstant, 0.0, 0}), ValidationError);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  const auto p0 = init_params(small_config(), 1);
  auto p = p0;
  auto g = zeros_like(p);
  g.out.b(0, 0) = 3.0;
  g.out.b(0, 1) = -0.5;
  Adam<double> adam(p);
  adam.step(p, g, 0.01);
  EXPECT_NEAR(p.out.b(0, 0) - p0.out.b(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.out.b(0, 1) - p0.out.b(0, 1), 0.01, 1e-9);
  EXPECT_EQ(p.out.b(0, 2), p0.out.b(0, 2));
  EXPECT_EQ(adam.steps_taken(), 1);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto p = init_params(small_config(), 42);
  std::stringstream ss;
  write_checkpoint(ss, p, {{"stage", "pretrain"}});
  CheckpointMetadata meta;
  const auto q = read_checkpoint<double>(ss, &meta);
  EXPECT_TRUE(bitwise_equal(p, q));
  EXPECT_EQ(meta.at("stage"), "pretrain");
  EXPECT_EQ(q.config.vocab_size, 11);
}

TEST(Checkpoint, FloatRoundTrip) {
  const auto p = init_params<float>(small_config(), 8);
  std::stringstream ss;
  write_checkpoint(ss, p);
  EXPECT_TRUE(bitwise_equal(p, read_checkpoint<float>(ss)));
  std::stringstream again;
  write_checkpoint(again, p);
  EXPECT_THROW(read_checkpoint<double>(again), ValidationError);
}

TEST(Checkpoint, SerializationIsDeterministic) {
  const auto p = init_params(small_config(), 3);
  std::stringstream a, b;
  write_checkpoint(a, p);
  write_checkpoint(b, init_params(small_config(), 3));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Checkpoint, RejectsBadMagicVersionAndTruncation) {
  const auto p = init_params(small_config(), 1);
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string bytes = ss.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::istringstream m(bad_magic);
  EXPECT_THROW(read_checkpoint<double>(m), ValidationError);

  std::string bad_version = bytes;
  bad_version[8] = 2;
  std::istringstream v(bad_version);
  EXPECT_THROW(read_checkpoint<double>(v), ValidationError);

  std::istringstream t(bytes.substr(0, bytes.size() - 16));
  EXPECT_THROW(read_checkpoint<double>(t), ValidationError);

  std::istringstream empty("");
  EXPECT_THROW(read_checkpoint<double>(empty), ValidationError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), ValidationError);
}

}  // namespace
}  // namespace flexdepth
