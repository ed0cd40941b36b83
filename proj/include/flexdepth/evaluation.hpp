#pragma once

// Accuracy over the depth grid: one cell per (encoder depth, decoder depth).

#include <charconv>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "flexdepth/depth_space.hpp"
#include "flexdepth/error.hpp"
#include "flexdepth/model.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth {

struct Accuracy {
  double sequence = 0.0;  // exact-match rate
  double token = 0.0;     // aligned-position matches / longer length
};

inline Accuracy sequence_accuracy(std::span<const std::vector<int>> predictions,
                                  std::span<const std::vector<int>> references) {
  if (predictions.size() != references.size()) throw ValidationError("prediction/reference count mismatch");
  if (references.empty()) throw ValidationError("cannot score an empty set");
  std::size_t exact = 0;
  std::size_t matched = 0;
  std::size_t positions = 0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto& p = predictions[i];
    const auto& r = references[i];
    if (p == r) ++exact;
    const std::size_t common = std::min(p.size(), r.size());
    for (std::size_t t = 0; t < common; ++t) matched += p[t] == r[t];
    positions += std::max(p.size(), r.size());
  }
  Accuracy a;
  a.sequence = static_cast<double>(exact) / static_cast<double>(references.size());
  a.token = positions == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(positions);
  return a;
}

struct GridCell {
  Task task;
  Accuracy accuracy;
  std::optional<std::string> error;  // set when the cell failed to decode
};

struct EvalGrid {
  std::vector<int> enc_depths;
  std::vector<int> dec_depths;
  std::vector<GridCell> cells;  // row-major, matching DepthGrid::tasks
  std::string checkpoint_id;
  std::string strategy;
  std::string dataset_id;

  [[nodiscard]] const GridCell& cell(int m, int n) const {
    for (const auto& c : cells) {
      if (c.task.enc == m && c.task.dec == n) return c;
    }
    throw ValidationError("grid has no cell (" + std::to_string(m) + ", " + std::to_string(n) + ")");
  }

  /// Mean sequence accuracy over cells that decoded successfully.
  [[nodiscard]] double mean_sequence_accuracy() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : cells) {
      if (c.error) continue;
      s += c.accuracy.sequence;
      ++n;
    }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
  }
};

template <typename T>
Accuracy evaluate_gates(const Parameters<T>& params, const GateVector& gates, std::span<const Example> test,
                        int max_decode_len) {
  std::vector<std::vector<int>> preds;
  std::vector<std::vector<int>> refs;
  for (const auto& e : test) {
    preds.push_back(greedy_decode(params, std::span<const int>(e.source), gates, max_decode_len));
    refs.push_back(e.target);
  }
  return sequence_accuracy(preds, refs);
}

template <typename T>
EvalGrid evaluate_grid(const Parameters<T>& params, const DepthGrid& grid, const GridPlans& plans,
                       std::span<const Example> test, int max_decode_len) {
  check_plans(params.config, grid, plans);
  EvalGrid out;
  out.enc_depths = grid.encoder.depths;
  out.dec_depths = grid.decoder.depths;
  out.strategy = std::string(strategy_name(plans.encoder.strategy));
  for (const Task& t : grid.tasks) {
    GridCell cell{t, {}, std::nullopt};
    try {
      cell.accuracy = evaluate_gates(params, plans.gates(params.config, t), test, max_decode_len);
    } catch (const Error& e) {
      cell.error = e.what();
    }
    out.cells.push_back(std::move(cell));
  }
  return out;
}

/// Evaluates a model that was only ever trained at full depth, with layers
/// forcibly removed according to `plans`.
template <typename T>
EvalGrid vanilla_truncation_probe(const Parameters<T>& pretrained, const DepthGrid& grid, const GridPlans& plans,
                                  std::span<const Example> test, int max_decode_len) {
  EvalGrid g = evaluate_grid(pretrained, grid, plans, test, max_decode_len);
  g.checkpoint_id = "vanilla-truncation";
  return g;
}

struct DeltaCell {
  Task task;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;  // b - a
  char winner = '=';   // 'a', 'b' or '='
};

struct DeltaReport {
  std::vector<DeltaCell> cells;
  int wins_b = 0;
  int wins_a = 0;
  int ties = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double mean_delta = 0.0;
};

inline DeltaReport delta_report(const EvalGrid& a, const EvalGrid& b) {
  if (a.enc_depths != b.enc_depths || a.dec_depths != b.dec_depths || a.cells.size() != b.cells.size()) {
    throw ValidationError("grid shapes differ");
  }
  DeltaReport r;
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    DeltaCell c;
    c.task = a.cells[i].task;
    c.a = a.cells[i].error ? 0.0 : a.cells[i].accuracy.sequence;
    c.b = b.cells[i].error ? 0.0 : b.cells[i].accuracy.sequence;
    c.delta = c.b - c.a;
    c.winner = c.b > c.a ? 'b' : (c.a > c.b ? 'a' : '=');
    r.wins_b += c.winner == 'b';
    r.wins_a += c.winner == 'a';
    r.ties += c.winner == '=';
    sa += c.a;
    sb += c.b;
    r.cells.push_back(c);
  }
  const auto n = static_cast<double>(r.cells.size());
  r.mean_a = sa / n;
  r.mean_b = sb / n;
  r.mean_delta = r.mean_b - r.mean_a;
  return r;
}

// ---------------------------------------------------------------------------
// Text and CSV renderings

/// Shortest decimal string that parses back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string signed_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// m,n,seq_acc,tok_acc; failed cells carry "error" in both accuracy columns.
inline void write_grid_csv(std::ostream& os, const EvalGrid& g) {
  os << "m,n,seq_acc,tok_acc\n";
  for (const auto& c : g.cells) {
    os << c.task.enc << ',' << c.task.dec << ',';
    if (c.error) {
      os << "error,error\n";
    } else {
      os << format_number(c.accuracy.sequence) << ',' << format_number(c.accuracy.token) << '\n';
    }
  }
}

inline EvalGrid read_grid_csv(std::istream& is) {
  EvalGrid g;
  std::string line;
  if (!std::getline(is, line) || line.rfind("m,n,seq_acc,tok_acc", 0) != 0) {
    throw ValidationError("grid CSV lacks the m,n,seq_acc,tok_acc header");
  }
  auto push_unique = [](std::vector<int>& v, int x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& s : f) {
      if (!std::getline(ls, s, ',')) throw ValidationError("malformed grid row: " + line);
    }
    GridCell c;
    try {
      c.task = {std::stoi(f[0]), std::stoi(f[1])};
      if (f[2] == "error") {
        c.error = "error";
      } else {
        c.accuracy = {std::stod(f[2]), std::stod(f[3])};
      }
    } catch (const std::exception&) {
      throw ValidationError("malformed grid row: " + line);
    }
    push_unique(g.enc_depths, c.task.enc);
    push_unique(g.dec_depths, c.task.dec);
    g.cells.push_back(std::move(c));
  }
  return g;
}

/// Heatmap of sequence accuracy: encoder depth rows, decoder depth columns.
inline void write_heatmap(std::ostream& os, const EvalGrid& g, const std::string& title = "") {
  if (!title.empty()) os << title << '\n';
  os << std::setw(6) << "m\\n";
  for (int n : g.dec_depths) os << std::setw(9) << n;
  os << '\n';
  for (int m : g.enc_depths) {
    os << std::setw(6) << m;
    for (int n : g.dec_depths) {
      const GridCell& c = g.cell(m, n);
      os << std::setw(9) << (c.error ? std::string("ERR") : fixed(c.accuracy.sequence, 4));
    }
    os << '\n';
  }
  os << "mean " << fixed(g.mean_sequence_accuracy(), 4) << '\n';
}

inline void write_delta_report(std::ostream& os, const DeltaReport& r, const std::string& label_a,
                               const std::string& label_b) {
  os << std::setw(4) << "m" << std::setw(4) << "n" << std::setw(12) << label_a.substr(0, 11) << std::setw(12)
     << label_b.substr(0, 11) << std::setw(10) << "delta" << "  winner\n";
  for (const auto& c : r.cells) {
    const std::string winner = c.winner == 'b' ? label_b : (c.winner == 'a' ? label_a : "tie");
    os << std::setw(4) << c.task.enc << std::setw(4) << c.task.dec << std::setw(12) << fixed(c.a, 4)
       << std::setw(12) << fixed(c.b, 4) << std::setw(10) << signed_fixed(c.delta, 4) << "  " << winner << '\n';
  }
  os << label_b << " wins " << r.wins_b << '/' << r.cells.size() << " (" << label_a << " " << r.wins_a
     << ", ties " << r.ties << ")\n";
  os << "mean " << label_a << ' ' << fixed(r.mean_a, 4) << "  mean " << label_b << ' ' << fixed(r.mean_b, 4)
     << "  mean delta " << signed_fixed(r.mean_delta, 4) << '\n';
}

}  // namespace flexdepth
