#pragma once

// Synthetic sequence-to-sequence tasks and the tab-separated corpus format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/tensor.hpp"

namespace flexdepth {

enum class SyntheticTask { kCopy, kReverse };

inline std::string_view task_name(SyntheticTask t) {
  return t == SyntheticTask::kCopy ? "copy" : "reverse";
}

inline SyntheticTask parse_task(std::string_view name) {
  if (name == "copy") return SyntheticTask::kCopy;
  if (name == "reverse") return SyntheticTask::kReverse;
  throw ValidationError("unknown task '" + std::string(name) + "' (valid: copy, reverse)");
}

struct DataConfig {
  SyntheticTask task = SyntheticTask::kCopy;
  int symbols = 8;
  int min_len = 3;
  int max_len = 8;
  int train_size = 2000;
  int test_size = 200;
  /// Probability that a training target token is replaced by another symbol.
  /// Test references are always clean.
  double target_noise = 0.0;

  [[nodiscard]] int vocab_size() const { return kFirstSymbol + symbols; }
};

inline void validate(const DataConfig& c) {
  if (c.symbols < 2) throw ValidationError("need at least 2 symbols");
  if (c.min_len < 1 || c.max_len < c.min_len) throw ValidationError("bad sequence length range");
  if (c.train_size < 1 || c.test_size < 1) throw ValidationError("dataset sizes must be >= 1");
  if (!(c.target_noise >= 0.0 && c.target_noise < 1.0)) throw ValidationError("target_noise must lie in [0, 1)");
}

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> test;
};

inline std::vector<int> reference_target(SyntheticTask task, const std::vector<int>& source) {
  std::vector<int> out = source;
  if (task == SyntheticTask::kReverse) std::reverse(out.begin(), out.end());
  return out;
}

/// Deterministic in (config, seed). Test sources never occur in the
/// training set.
inline Dataset make_dataset(const DataConfig& c, std::uint64_t seed) {
  validate(c);
  Rng rng(seed);
  std::uniform_int_distribution<int> len(c.min_len, c.max_len);
  std::uniform_int_distribution<int> sym(kFirstSymbol, kFirstSymbol + c.symbols - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> shift(1, c.symbols - 1);

  auto draw = [&] {
    std::vector<int> s(static_cast<std::size_t>(len(rng)));
    for (int& x : s) x = sym(rng);
    return s;
  };

  Dataset d;
  std::set<std::vector<int>> seen;
  const int max_attempts = 100 * (c.test_size + 1);
  for (int attempt = 0; static_cast<int>(d.test.size()) < c.test_size; ++attempt) {
    if (attempt > max_attempts) throw ValidationError("sequence space too small for the requested test set");
    auto s = draw();
    if (!seen.insert(s).second) continue;
    d.test.push_back({s, reference_target(c.task, s)});
  }
  while (static_cast<int>(d.train.size()) < c.train_size) {
    auto s = draw();
    if (seen.count(s)) continue;
    auto t = reference_target(c.task, s);
    if (c.target_noise > 0.0) {
      for (int& x : t) {
        if (coin(rng) < c.target_noise) {
          x = kFirstSymbol + (x - kFirstSymbol + shift(rng)) % c.symbols;
        }
      }
    }
    d.train.push_back({std::move(s), std::move(t)});
  }
  return d;
}

// Corpus file: one pair per line, "source tokens<TAB>target tokens", tokens
// as space-separated integer ids.

inline std::string tokens_to_string(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

inline std::vector<int> tokens_from_string(std::string_view text) {
  std::vector<int> out;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ValidationError("bad token '" + tok + "'");
    }
  }
  return out;
}

inline void write_corpus(std::ostream& os, const std::vector<Example>& pairs) {
  for (const auto& e : pairs) os << tokens_to_string(e.source) << '\t' << tokens_to_string(e.target) << '\n';
}

inline std::vector<Example> read_corpus(std::istream& is) {
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ValidationError("corpus line " + std::to_string(lineno) + " has no tab");
    out.push_back({tokens_from_string(std::string_view(line).substr(0, tab)),
                   tokens_from_string(std::string_view(line).substr(tab + 1))});
  }
  return out;
}

inline void save_corpus(const std::string& path, const std::vector<Example>& pairs) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path);
  write_corpus(os, pairs);
}

inline std::vector<Example> load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read " + path);
  return read_corpus(is);
}

}  // namespace flexdepth
