#pragma once

// Toy pre-norm encoder-decoder transformer in which every layer is a gated
// residual block: x_{i+1} = x_i + Q_i * Layer(x_i), Q_i in {0, 1}. A layer
// with Q_i = 0 is skipped entirely, so it is an exact identity on the
// residual stream. Forward and backward passes are written by hand.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flexdepth/assignment.hpp"
#include "flexdepth/error.hpp"
#include "flexdepth/tensor.hpp"

namespace flexdepth {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstSymbol = 3;

struct ModelConfig {
  int enc_layers = 4;
  int dec_layers = 2;
  int width = 32;
  int heads = 2;
  int ffn_width = 64;
  int vocab_size = 16;
  int max_len = 16;  // positions available to each side (target side includes BOS)

  [[nodiscard]] int head_width() const { return width / heads; }
  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.enc_layers < 1 || c.dec_layers < 1) throw ValidationError("layer counts must be >= 1");
  if (c.width < 1 || c.heads < 1 || c.width % c.heads != 0) {
    throw ValidationError("width must be a positive multiple of heads");
  }
  if (c.ffn_width < 1) throw ValidationError("ffn_width must be >= 1");
  if (c.vocab_size <= kFirstSymbol) throw ValidationError("vocab_size must exceed the reserved ids");
  if (c.max_len < 2) throw ValidationError("max_len must be >= 2");
}

template <typename T>
struct LinearParams {
  Matrix<T> w;  // in x out
  Matrix<T> b;  // 1 x out
};

template <typename T>
struct NormParams {
  Matrix<T> gain;  // 1 x width
  Matrix<T> bias;  // 1 x width
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> up, down;
};

template <typename T>
struct EncoderLayerParams {
  NormParams<T> ln1;
  AttentionParams<T> self;
  NormParams<T> ln2;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  NormParams<T> ln1;
  AttentionParams<T> self;
  NormParams<T> ln2;
  AttentionParams<T> cross;
  NormParams<T> ln3;
  FeedForwardParams<T> ffn;
};

/// All trainable weights. Gradients use the same type.
template <typename T>
struct Parameters {
  ModelConfig config;
  Matrix<T> src_embed, src_pos;
  std::vector<EncoderLayerParams<T>> enc;
  NormParams<T> enc_norm;
  Matrix<T> tgt_embed, tgt_pos;
  std::vector<DecoderLayerParams<T>> dec;
  NormParams<T> dec_norm;
  LinearParams<T> out;
};

/// Visits every tensor as f(name, matrix) in a fixed order. Encoder and
/// decoder layers are numbered from 1 to match sub-network indices.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
  auto linear = [&](const std::string& n, auto& l) {
    f(n + ".w", l.w);
    f(n + ".b", l.b);
  };
  auto norm = [&](const std::string& n, auto& l) {
    f(n + ".gain", l.gain);
    f(n + ".bias", l.bias);
  };
  auto attention = [&](const std::string& n, auto& a) {
    linear(n + ".q", a.q);
    linear(n + ".k", a.k);
    linear(n + ".v", a.v);
    linear(n + ".o", a.o);
  };
  auto ffn = [&](const std::string& n, auto& l) {
    linear(n + ".up", l.up);
    linear(n + ".down", l.down);
  };
  f(std::string("src_embed"), p.src_embed);
  f(std::string("src_pos"), p.src_pos);
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    const std::string n = "enc." + std::to_string(i + 1);
    norm(n + ".ln1", p.enc[i].ln1);
    attention(n + ".self", p.enc[i].self);
    norm(n + ".ln2", p.enc[i].ln2);
    ffn(n + ".ffn", p.enc[i].ffn);
  }
  norm("enc_norm", p.enc_norm);
  f(std::string("tgt_embed"), p.tgt_embed);
  f(std::string("tgt_pos"), p.tgt_pos);
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    const std::string n = "dec." + std::to_string(i + 1);
    norm(n + ".ln1", p.dec[i].ln1);
    attention(n + ".self", p.dec[i].self);
    norm(n + ".ln2", p.dec[i].ln2);
    attention(n + ".cross", p.dec[i].cross);
    norm(n + ".ln3", p.dec[i].ln3);
    ffn(n + ".ffn", p.dec[i].ffn);
  }
  norm("dec_norm", p.dec_norm);
  linear("out", p.out);
}

template <typename T>
std::vector<Matrix<T>*> tensor_list(Parameters<T>& p) {
  std::vector<Matrix<T>*> out;
  for_each_tensor(p, [&](const std::string&, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensor_list(const Parameters<T>& p) {
  std::vector<const Matrix<T>*> out;
  for_each_tensor(p, [&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::size_t parameter_count(const Parameters<T>& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Matrix<T>& m) {
    n += static_cast<std::size_t>(m.size());
  });
  return n;
}

namespace detail {

template <typename T>
Matrix<T> gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
LinearParams<T> init_linear(Rng& rng, int in, int out) {
  return {gaussian<T>(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))),
          Matrix<T>::Zero(1, out)};
}

template <typename T>
NormParams<T> init_norm(int width) {
  return {Matrix<T>::Ones(1, width), Matrix<T>::Zero(1, width)};
}

template <typename T>
AttentionParams<T> init_attention(Rng& rng, int width) {
  AttentionParams<T> a;
  a.q = init_linear<T>(rng, width, width);
  a.k = init_linear<T>(rng, width, width);
  a.v = init_linear<T>(rng, width, width);
  a.o = init_linear<T>(rng, width, width);
  return a;
}

template <typename T>
FeedForwardParams<T> init_ffn(Rng& rng, int width, int hidden) {
  FeedForwardParams<T> f;
  f.up = init_linear<T>(rng, width, hidden);
  f.down = init_linear<T>(rng, hidden, width);
  return f;
}

}  // namespace detail

/// Deterministic variance-scaled initialisation.
template <typename T = double>
Parameters<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  validate(c);
  Rng rng(seed);
  constexpr double kEmbedStd = 0.5;
  Parameters<T> p;
  p.config = c;
  p.src_embed = detail::gaussian<T>(rng, c.vocab_size, c.width, kEmbedStd);
  p.src_pos = detail::gaussian<T>(rng, c.max_len, c.width, kEmbedStd);
  for (int i = 0; i < c.enc_layers; ++i) {
    EncoderLayerParams<T> l;
    l.ln1 = detail::init_norm<T>(c.width);
    l.self = detail::init_attention<T>(rng, c.width);
    l.ln2 = detail::init_norm<T>(c.width);
    l.ffn = detail::init_ffn<T>(rng, c.width, c.ffn_width);
    p.enc.push_back(std::move(l));
  }
  p.enc_norm = detail::init_norm<T>(c.width);
  p.tgt_embed = detail::gaussian<T>(rng, c.vocab_size, c.width, kEmbedStd);
  p.tgt_pos = detail::gaussian<T>(rng, c.max_len, c.width, kEmbedStd);
  for (int i = 0; i < c.dec_layers; ++i) {
    DecoderLayerParams<T> l;
    l.ln1 = detail::init_norm<T>(c.width);
    l.self = detail::init_attention<T>(rng, c.width);
    l.ln2 = detail::init_norm<T>(c.width);
    l.cross = detail::init_attention<T>(rng, c.width);
    l.ln3 = detail::init_norm<T>(c.width);
    l.ffn = detail::init_ffn<T>(rng, c.width, c.ffn_width);
    p.dec.push_back(std::move(l));
  }
  p.dec_norm = detail::init_norm<T>(c.width);
  p.out = detail::init_linear<T>(rng, c.width, c.vocab_size);
  return p;
}

template <typename T>
Parameters<T> zeros_like(const Parameters<T>& p) {
  Parameters<T> z = p;
  for_each_tensor(z, [](const std::string&, Matrix<T>& m) { m.setZero(); });
  return z;
}

/// dst += scale * src, tensor by tensor.
template <typename T>
void accumulate(Parameters<T>& dst, const Parameters<T>& src, T scale = T(1)) {
  auto d = tensor_list(dst);
  auto s = tensor_list(src);
  if (d.size() != s.size()) throw ValidationError("parameter structures differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (scale == T(1)) {
      *d[i] += *s[i];
    } else {
      *d[i] += scale * *s[i];
    }
  }
}

template <typename T>
bool bitwise_equal(const Parameters<T>& a, const Parameters<T>& b) {
  auto x = tensor_list(a);
  auto y = tensor_list(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i]->rows() != y[i]->rows() || x[i]->cols() != y[i]->cols()) return false;
    if (!std::equal(x[i]->data(), x[i]->data() + x[i]->size(), y[i]->data())) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Gates

/// Per-layer binary gates for one forward pass.
struct GateVector {
  std::vector<std::uint8_t> enc;
  std::vector<std::uint8_t> dec;

  [[nodiscard]] int active_encoder_layers() const {
    return static_cast<int>(std::count(enc.begin(), enc.end(), 1));
  }
  [[nodiscard]] int active_decoder_layers() const {
    return static_cast<int>(std::count(dec.begin(), dec.end(), 1));
  }
  bool operator==(const GateVector&) const = default;
};

inline GateVector all_gates_on(const ModelConfig& c) {
  return {std::vector<std::uint8_t>(static_cast<std::size_t>(c.enc_layers), 1),
          std::vector<std::uint8_t>(static_cast<std::size_t>(c.dec_layers), 1)};
}

inline std::vector<std::uint8_t> gates_from(const SubNetwork& sn, int layers) {
  if (sn.total_depth != layers) {
    throw ValidationError("sub-network built for " + std::to_string(sn.total_depth) +
                          " layers applied to a " + std::to_string(layers) + "-layer stack");
  }
  std::vector<std::uint8_t> g(static_cast<std::size_t>(layers), 0);
  for (int a : sn.layers) g[static_cast<std::size_t>(a - 1)] = 1;
  return g;
}

/// Deterministic gates: gate i is 1 iff layer i belongs to the sub-network.
inline GateVector gates_from(const ModelConfig& c, const SubNetwork& enc, const SubNetwork& dec) {
  return {gates_from(enc, c.enc_layers), gates_from(dec, c.dec_layers)};
}

/// LayerDrop gates: i.i.d. with Pr(gate = 0) = p.
inline GateVector sample_gates(double p, const ModelConfig& c, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("drop rate must lie in [0, 1]");
  std::bernoulli_distribution drop(p);
  GateVector g;
  for (int i = 0; i < c.enc_layers; ++i) g.enc.push_back(drop(rng) ? 0 : 1);
  for (int i = 0; i < c.dec_layers; ++i) g.dec.push_back(drop(rng) ? 0 : 1);
  return g;
}

inline GateVector sample_gates(double p, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return sample_gates(p, c, rng);
}

// ---------------------------------------------------------------------------
// Batches

struct Example {
  std::vector<int> source;
  std::vector<int> target;  // without BOS / EOS
  bool operator==(const Example&) const = default;
};

/// Padded source/target token matrices. Row r holds source_len[r] (resp.
/// target_len[r]) real tokens followed by kPad.
struct Batch {
  int id = 0;
  TokenMatrix source;
  TokenMatrix target;
  std::vector<int> source_len;
  std::vector<int> target_len;

  [[nodiscard]] int rows() const { return static_cast<int>(source_len.size()); }
  [[nodiscard]] bool source_mask(int r, int c) const { return c < source_len[static_cast<std::size_t>(r)]; }
  [[nodiscard]] bool target_mask(int r, int c) const { return c < target_len[static_cast<std::size_t>(r)]; }
  /// Predicted tokens: every target symbol plus EOS.
  [[nodiscard]] std::size_t token_count() const {
    std::size_t n = 0;
    for (int len : target_len) n += static_cast<std::size_t>(len) + 1;
    return n;
  }
  [[nodiscard]] std::vector<int> source_row(int r) const {
    const auto& len = source_len[static_cast<std::size_t>(r)];
    return {source.row(r).data(), source.row(r).data() + len};
  }
  [[nodiscard]] std::vector<int> target_row(int r) const {
    const auto& len = target_len[static_cast<std::size_t>(r)];
    return {target.row(r).data(), target.row(r).data() + len};
  }
};

inline Batch make_batch(std::span<const Example> examples, int id = 0) {
  Batch b;
  b.id = id;
  std::size_t max_src = 0;
  std::size_t max_tgt = 0;
  for (const auto& e : examples) {
    max_src = std::max(max_src, e.source.size());
    max_tgt = std::max(max_tgt, e.target.size());
  }
  const auto rows = static_cast<Eigen::Index>(examples.size());
  b.source = TokenMatrix::Constant(rows, static_cast<Eigen::Index>(max_src), kPad);
  b.target = TokenMatrix::Constant(rows, static_cast<Eigen::Index>(max_tgt), kPad);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& e = examples[static_cast<std::size_t>(r)];
    for (std::size_t c = 0; c < e.source.size(); ++c) b.source(r, static_cast<Eigen::Index>(c)) = e.source[c];
    for (std::size_t c = 0; c < e.target.size(); ++c) b.target(r, static_cast<Eigen::Index>(c)) = e.target[c];
    b.source_len.push_back(static_cast<int>(e.source.size()));
    b.target_len.push_back(static_cast<int>(e.target.size()));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Building blocks. Each forward stores what its backward needs.

namespace ops {

template <typename T>
Matrix<T> linear(const LinearParams<T>& p, const Matrix<T>& x) {
  Matrix<T> y = x * p.w;
  y.rowwise() += p.b.row(0);
  return y;
}

template <typename T>
Matrix<T> linear_backward(const LinearParams<T>& p, LinearParams<T>& g, const Matrix<T>& x,
                          const Matrix<T>& dy) {
  g.w.noalias() += x.transpose() * dy;
  g.b += dy.colwise().sum();
  return dy * p.w.transpose();
}

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
Matrix<T> layer_norm(const NormParams<T>& p, const Matrix<T>& x, NormCache<T>& cache) {
  const auto width = static_cast<T>(x.cols());
  cache.xhat.resize(x.rows(), x.cols());
  cache.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).sum() / width;
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / width;
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = centered * inv;
  }
  Matrix<T> y = cache.xhat.array().rowwise() * p.gain.row(0).array();
  y.rowwise() += p.bias.row(0);
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const NormParams<T>& p, NormParams<T>& g, const NormCache<T>& cache,
                              const Matrix<T>& dy) {
  g.gain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  Matrix<T> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  const auto width = static_cast<T>(dy.cols());
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_d = dxhat.row(r).sum() / width;
    const T mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / width;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

template <typename T>
struct AttentionCache {
  Matrix<T> xq, xkv;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // one per head
  Matrix<T> context;
};

template <typename T>
Matrix<T> attention(const AttentionParams<T>& p, int heads, const Matrix<T>& xq,
                    const Matrix<T>& xkv, bool causal, AttentionCache<T>& cache) {
  cache.xq = xq;
  cache.xkv = xkv;
  cache.q = linear(p.q, xq);
  cache.k = linear(p.k, xkv);
  cache.v = linear(p.v, xkv);
  const Eigen::Index width = cache.q.cols();
  const Eigen::Index hw = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hw));
  cache.context.resize(xq.rows(), width);
  cache.probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index off = h * hw;
    Matrix<T> s = (cache.q.middleCols(off, hw) * cache.k.middleCols(off, hw).transpose()) * scale;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, s.cols()) : s.cols();
      const T mx = s.row(i).head(visible).maxCoeff();
      T sum = T(0);
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const T e = j < visible ? std::exp(s(i, j) - mx) : T(0);
        s(i, j) = e;
        sum += e;
      }
      s.row(i) /= sum;
    }
    cache.context.middleCols(off, hw).noalias() = s * cache.v.middleCols(off, hw);
    cache.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return linear(p.o, cache.context);
}

/// Returns (d xq, d xkv).
template <typename T>
std::pair<Matrix<T>, Matrix<T>> attention_backward(const AttentionParams<T>& p, AttentionParams<T>& g,
                                                   int heads, const AttentionCache<T>& cache,
                                                   const Matrix<T>& dy) {
  const Matrix<T> dctx = linear_backward(p.o, g.o, cache.context, dy);
  const Eigen::Index width = cache.q.cols();
  const Eigen::Index hw = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hw));
  Matrix<T> dq = Matrix<T>::Zero(cache.q.rows(), width);
  Matrix<T> dk = Matrix<T>::Zero(cache.k.rows(), width);
  Matrix<T> dv = Matrix<T>::Zero(cache.v.rows(), width);
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index off = h * hw;
    const Matrix<T>& prob = cache.probs[static_cast<std::size_t>(h)];
    const auto dctx_h = dctx.middleCols(off, hw);
    dv.middleCols(off, hw).noalias() = prob.transpose() * dctx_h;
    const Matrix<T> dprob = dctx_h * cache.v.middleCols(off, hw).transpose();
    Matrix<T> ds = prob.cwiseProduct(dprob);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
    ds -= prob.cwiseProduct(row_dot.replicate(1, prob.cols()));
    dq.middleCols(off, hw).noalias() = (ds * cache.k.middleCols(off, hw)) * scale;
    dk.middleCols(off, hw).noalias() = (ds.transpose() * cache.q.middleCols(off, hw)) * scale;
  }
  Matrix<T> dxq = linear_backward(p.q, g.q, cache.xq, dq);
  Matrix<T> dxkv = linear_backward(p.k, g.k, cache.xkv, dk);
  dxkv += linear_backward(p.v, g.v, cache.xkv, dv);
  return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
struct FeedForwardCache {
  Matrix<T> x, pre, act;
};

template <typename T>
Matrix<T> feed_forward(const FeedForwardParams<T>& p, const Matrix<T>& x, FeedForwardCache<T>& cache) {
  cache.x = x;
  cache.pre = linear(p.up, x);
  cache.act = cache.pre.cwiseMax(T(0));
  return linear(p.down, cache.act);
}

template <typename T>
Matrix<T> feed_forward_backward(const FeedForwardParams<T>& p, FeedForwardParams<T>& g,
                                const FeedForwardCache<T>& cache, const Matrix<T>& dy) {
  Matrix<T> dact = linear_backward(p.down, g.down, cache.act, dy);
  dact = (cache.pre.array() > T(0)).select(dact, T(0));
  return linear_backward(p.up, g.up, cache.x, dact);
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct EncoderLayerCache {
  ops::NormCache<T> ln1, ln2;
  ops::AttentionCache<T> self;
  ops::FeedForwardCache<T> ffn;
};

template <typename T>
Matrix<T> encoder_layer(const EncoderLayerParams<T>& p, int heads, const Matrix<T>& x,
                        EncoderLayerCache<T>& cache) {
  const Matrix<T> n1 = ops::layer_norm(p.ln1, x, cache.ln1);
  Matrix<T> h = x + ops::attention(p.self, heads, n1, n1, false, cache.self);
  const Matrix<T> n2 = ops::layer_norm(p.ln2, h, cache.ln2);
  h += ops::feed_forward(p.ffn, n2, cache.ffn);
  return h;
}

template <typename T>
Matrix<T> encoder_layer_backward(const EncoderLayerParams<T>& p, EncoderLayerParams<T>& g, int heads,
                                 const EncoderLayerCache<T>& cache, const Matrix<T>& dy) {
  Matrix<T> dh = dy;
  dh += ops::layer_norm_backward(p.ln2, g.ln2, cache.ln2,
                                 ops::feed_forward_backward(p.ffn, g.ffn, cache.ffn, dy));
  auto [dq, dkv] = ops::attention_backward(p.self, g.self, heads, cache.self, dh);
  dq += dkv;
  Matrix<T> dx = dh;
  dx += ops::layer_norm_backward(p.ln1, g.ln1, cache.ln1, dq);
  return dx;
}

template <typename T>
struct DecoderLayerCache {
  ops::NormCache<T> ln1, ln2, ln3;
  ops::AttentionCache<T> self, cross;
  ops::FeedForwardCache<T> ffn;
};

template <typename T>
Matrix<T> decoder_layer(const DecoderLayerParams<T>& p, int heads, const Matrix<T>& x,
                        const Matrix<T>& memory, DecoderLayerCache<T>& cache) {
  const Matrix<T> n1 = ops::layer_norm(p.ln1, x, cache.ln1);
  Matrix<T> h = x + ops::attention(p.self, heads, n1, n1, true, cache.self);
  const Matrix<T> n2 = ops::layer_norm(p.ln2, h, cache.ln2);
  h += ops::attention(p.cross, heads, n2, memory, false, cache.cross);
  const Matrix<T> n3 = ops::layer_norm(p.ln3, h, cache.ln3);
  h += ops::feed_forward(p.ffn, n3, cache.ffn);
  return h;
}

/// Returns d x; adds the cross-attention contribution into d_memory.
template <typename T>
Matrix<T> decoder_layer_backward(const DecoderLayerParams<T>& p, DecoderLayerParams<T>& g, int heads,
                                 const DecoderLayerCache<T>& cache, const Matrix<T>& dy,
                                 Matrix<T>& d_memory) {
  Matrix<T> dh2 = dy;
  dh2 += ops::layer_norm_backward(p.ln3, g.ln3, cache.ln3,
                                  ops::feed_forward_backward(p.ffn, g.ffn, cache.ffn, dy));
  auto [dcq, dmem] = ops::attention_backward(p.cross, g.cross, heads, cache.cross, dh2);
  d_memory += dmem;
  Matrix<T> dh1 = dh2;
  dh1 += ops::layer_norm_backward(p.ln2, g.ln2, cache.ln2, dcq);
  auto [dsq, dskv] = ops::attention_backward(p.self, g.self, heads, cache.self, dh1);
  dsq += dskv;
  Matrix<T> dx = dh1;
  dx += ops::layer_norm_backward(p.ln1, g.ln1, cache.ln1, dsq);
  return dx;
}

// ---------------------------------------------------------------------------
// Whole model

template <typename T>
struct SequenceCache {
  std::vector<int> source;
  std::vector<int> decoder_input;  // BOS + target
  std::vector<int> labels;         // target + EOS
  std::vector<EncoderLayerCache<T>> enc;
  ops::NormCache<T> enc_norm;
  Matrix<T> memory;
  std::vector<DecoderLayerCache<T>> dec;
  ops::NormCache<T> dec_norm;
  Matrix<T> dec_final;
  Matrix<T> probs;  // softmax of logits
};

/// Result of forward_loss: mean cross-entropy per predicted token plus the
/// activations backward() needs.
template <typename T>
struct ForwardPass {
  T loss = T(0);
  std::size_t tokens = 0;
  GateVector gates;
  std::vector<SequenceCache<T>> sequences;
};

namespace detail {

inline void check_gates(const ModelConfig& c, const GateVector& g) {
  if (g.enc.size() != static_cast<std::size_t>(c.enc_layers) ||
      g.dec.size() != static_cast<std::size_t>(c.dec_layers)) {
    throw ValidationError("gate vector does not match model depth");
  }
}

template <typename T>
Matrix<T> embed(const Matrix<T>& table, const Matrix<T>& pos, std::span<const int> tokens, int vocab) {
  if (tokens.size() > static_cast<std::size_t>(pos.rows())) {
    throw ValidationError("sequence of length " + std::to_string(tokens.size()) +
                          " exceeds max_len " + std::to_string(pos.rows()));
  }
  Matrix<T> x(static_cast<Eigen::Index>(tokens.size()), table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int id = tokens[t];
    if (id < 0 || id >= vocab) throw ValidationError("token id out of range: " + std::to_string(id));
    x.row(static_cast<Eigen::Index>(t)) = table.row(id) + pos.row(static_cast<Eigen::Index>(t));
  }
  return x;
}

template <typename T>
void embed_backward(Matrix<T>& d_table, Matrix<T>& d_pos, std::span<const int> tokens, const Matrix<T>& dx) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    d_table.row(tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
    d_pos.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
  }
}

template <typename T>
Matrix<T> encode_cached(const Parameters<T>& p, std::span<const int> source, const GateVector& gates,
                        SequenceCache<T>* cache) {
  const ModelConfig& c = p.config;
  Matrix<T> x = embed(p.src_embed, p.src_pos, source, c.vocab_size);
  if (cache) cache->enc.resize(p.enc.size());
  EncoderLayerCache<T> scratch;
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    if (!gates.enc[i]) continue;
    x = encoder_layer(p.enc[i], c.heads, x, cache ? cache->enc[i] : scratch);
  }
  ops::NormCache<T> norm_scratch;
  return ops::layer_norm(p.enc_norm, x, cache ? cache->enc_norm : norm_scratch);
}

template <typename T>
Matrix<T> decode_cached(const Parameters<T>& p, std::span<const int> input, const Matrix<T>& memory,
                        const GateVector& gates, SequenceCache<T>* cache) {
  const ModelConfig& c = p.config;
  Matrix<T> y = embed(p.tgt_embed, p.tgt_pos, input, c.vocab_size);
  if (cache) cache->dec.resize(p.dec.size());
  DecoderLayerCache<T> scratch;
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    if (!gates.dec[i]) continue;
    y = decoder_layer(p.dec[i], c.heads, y, memory, cache ? cache->dec[i] : scratch);
  }
  ops::NormCache<T> norm_scratch;
  Matrix<T> fin = ops::layer_norm(p.dec_norm, y, cache ? cache->dec_norm : norm_scratch);
  if (cache) cache->dec_final = fin;
  return ops::linear(p.out, fin);
}

template <typename T>
void softmax_rows(Matrix<T>& logits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
    logits.row(r) /= logits.row(r).sum();
  }
}

}  // namespace detail

template <typename T>
ForwardPass<T> forward_loss(const Parameters<T>& p, const Batch& batch, const GateVector& gates) {
  detail::check_gates(p.config, gates);
  ForwardPass<T> pass;
  pass.gates = gates;
  pass.tokens = batch.token_count();
  if (pass.tokens == 0) throw ValidationError("empty batch");
  double total = 0.0;
  for (int r = 0; r < batch.rows(); ++r) {
    SequenceCache<T> seq;
    seq.source = batch.source_row(r);
    const auto target = batch.target_row(r);
    seq.decoder_input.push_back(kBos);
    seq.decoder_input.insert(seq.decoder_input.end(), target.begin(), target.end());
    seq.labels = target;
    seq.labels.push_back(kEos);
    seq.memory = detail::encode_cached(p, std::span<const int>(seq.source), gates, &seq);
    seq.probs = detail::decode_cached(p, std::span<const int>(seq.decoder_input), seq.memory, gates, &seq);
    for (Eigen::Index t = 0; t < seq.probs.rows(); ++t) {
      const int label = seq.labels[static_cast<std::size_t>(t)];
      const auto row = seq.probs.row(t);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log((row.array() - mx).exp().sum());
      total += static_cast<double>(lse - row(label));
    }
    detail::softmax_rows(seq.probs);
    pass.sequences.push_back(std::move(seq));
  }
  pass.loss = static_cast<T>(total / static_cast<double>(pass.tokens));
  if (!std::isfinite(static_cast<double>(pass.loss))) {
    throw DivergenceError("non-finite loss on batch " + std::to_string(batch.id));
  }
  return pass;
}

/// Gradient of loss_scale * (mean token cross-entropy). Parameters inside
/// gated-off layers receive exactly zero.
template <typename T>
Parameters<T> backward(const Parameters<T>& p, const ForwardPass<T>& pass, T loss_scale = T(1)) {
  const int heads = p.config.heads;
  Parameters<T> g = zeros_like(p);
  const T norm = loss_scale / static_cast<T>(pass.tokens);
  for (const SequenceCache<T>& seq : pass.sequences) {
    Matrix<T> dlogits = seq.probs;
    for (Eigen::Index t = 0; t < dlogits.rows(); ++t) dlogits(t, seq.labels[static_cast<std::size_t>(t)]) -= T(1);
    dlogits *= norm;
    Matrix<T> dy = ops::linear_backward(p.out, g.out, seq.dec_final, dlogits);
    dy = ops::layer_norm_backward(p.dec_norm, g.dec_norm, seq.dec_norm, dy);
    Matrix<T> dmem = Matrix<T>::Zero(seq.memory.rows(), seq.memory.cols());
    for (std::size_t i = p.dec.size(); i-- > 0;) {
      if (!pass.gates.dec[i]) continue;
      dy = decoder_layer_backward(p.dec[i], g.dec[i], heads, seq.dec[i], dy, dmem);
    }
    detail::embed_backward(g.tgt_embed, g.tgt_pos, std::span<const int>(seq.decoder_input), dy);
    Matrix<T> dx = ops::layer_norm_backward(p.enc_norm, g.enc_norm, seq.enc_norm, dmem);
    for (std::size_t i = p.enc.size(); i-- > 0;) {
      if (!pass.gates.enc[i]) continue;
      dx = encoder_layer_backward(p.enc[i], g.enc[i], heads, seq.enc[i], dx);
    }
    detail::embed_backward(g.src_embed, g.src_pos, std::span<const int>(seq.source), dx);
  }
  for_each_tensor(g, [](const std::string& name, const Matrix<T>& m) {
    if (!m.allFinite()) throw DivergenceError("non-finite gradient in " + name);
  });
  return g;
}

template <typename T>
T loss(const Parameters<T>& p, const Batch& batch, const GateVector& gates) {
  return forward_loss(p, batch, gates).loss;
}

template <typename T>
struct LossAndGradient {
  T loss = T(0);
  Parameters<T> grad;
};

template <typename T>
LossAndGradient<T> loss_and_gradient(const Parameters<T>& p, const Batch& batch, const GateVector& gates) {
  ForwardPass<T> pass = forward_loss(p, batch, gates);
  return {pass.loss, backward(p, pass)};
}

/// Encoder output for one source sentence.
template <typename T>
Matrix<T> encode(const Parameters<T>& p, std::span<const int> source, const GateVector& gates) {
  detail::check_gates(p.config, gates);
  return detail::encode_cached<T>(p, source, gates, nullptr);
}

/// Autoregressive argmax decoding. Stops at EOS, after max_len tokens, or
/// when the positional table is exhausted. Output excludes BOS and EOS.
template <typename T>
std::vector<int> greedy_decode(const Parameters<T>& p, std::span<const int> source, const GateVector& gates,
                               int max_len) {
  std::vector<int> out;
  if (max_len <= 0) return out;
  const Matrix<T> memory = encode(p, source, gates);
  std::vector<int> prefix{kBos};
  const int limit = std::min(max_len, p.config.max_len - 1);
  while (static_cast<int>(out.size()) < limit) {
    const Matrix<T> logits = detail::decode_cached<T>(p, std::span<const int>(prefix), memory, gates, nullptr);
    Eigen::Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    const int token = static_cast<int>(best);
    if (token == kEos) break;
    out.push_back(token);
    prefix.push_back(token);
  }
  return out;
}

/// Physically re-stacked model holding only the given layers, in order.
template <typename T>
Parameters<T> extract_subnetwork(const Parameters<T>& p, const SubNetwork& enc, const SubNetwork& dec) {
  if (enc.total_depth != p.config.enc_layers || dec.total_depth != p.config.dec_layers) {
    throw ValidationError("sub-network depth does not match model");
  }
  Parameters<T> s = p;
  s.enc.clear();
  s.dec.clear();
  for (int a : enc.layers) s.enc.push_back(p.enc[static_cast<std::size_t>(a - 1)]);
  for (int a : dec.layers) s.dec.push_back(p.dec[static_cast<std::size_t>(a - 1)]);
  s.config.enc_layers = enc.depth();
  s.config.dec_layers = dec.depth();
  return s;
}

}  // namespace flexdepth
