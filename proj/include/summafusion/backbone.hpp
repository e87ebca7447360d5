#pragma once

// Small encoder-decoder transformer with hand-derived analytic gradients.
// Pre-norm blocks, learned positions, GELU feed-forward. Parameters are
// named tensors; storage is the template scalar (float in production,
// double on the gradient-check path) with double accumulation in every
// reduction (layer norm, softmax, losses).

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "summafusion/common.hpp"

namespace summafusion {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BackboneConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t d_ff = 512;
  std::size_t max_positions = 256;
  double dropout = 0.0;
  std::uint64_t init_seed = 0;

  void validate() const;
  std::string to_json() const;
  static BackboneConfig from_json(const std::string& blob);
};

template <typename S>
struct Tensor {
  Mat<S> v;
  int rank = 2;  // 1 for vectors stored as 1 x n
};

template <typename S>
struct ParamSet {
  std::map<std::string, Tensor<S>> tensors;

  Tensor<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("unknown parameter: " + name);
    return it->second;
  }
  const Mat<S>& m(const std::string& name) const { return at(name).v; }

  ParamSet<S> zeros_like() const {
    ParamSet<S> out;
    for (const auto& [name, t] : tensors) {
      Tensor<S> z;
      z.rank = t.rank;
      z.v = Mat<S>::Zero(t.v.rows(), t.v.cols());
      out.tensors.emplace(name, std::move(z));
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& [name, t] : tensors)
      if (!t.v.allFinite()) return false;
    return true;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors)
      n += static_cast<std::size_t>(t.v.size());
    return n;
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& [name, t] : tensors) {
      Tensor<T> c;
      c.rank = t.rank;
      c.v = t.v.template cast<T>();
      out.tensors.emplace(name, std::move(c));
    }
    return out;
  }
};

template <typename S>
bool bitwise_equal(const ParamSet<S>& a, const ParamSet<S>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  auto ia = a.tensors.begin();
  auto ib = b.tensors.begin();
  for (; ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.v.rows() != ib->second.v.rows() ||
        ia->second.v.cols() != ib->second.v.cols())
      return false;
    if (std::memcmp(ia->second.v.data(), ib->second.v.data(),
                    sizeof(S) * ia->second.v.size()) != 0)
      return false;
  }
  return true;
}

// Attention-cell instrumentation: each attention call adds Lq*Lk once
// (heads share the cell structure, so they are not multiply counted).
void reset_attention_cell_counter();
std::uint64_t attention_cell_count();
namespace detail {
void count_attention_cells(std::uint64_t cells);
}

// ---------------------------------------------------------------------------
// Tapes: activations recorded by the forward pass for the backward pass.
// ---------------------------------------------------------------------------

template <typename S>
struct LayerNormTape {
  Mat<S> xhat;
  std::vector<double> inv_std;
};

template <typename S>
struct AttentionTape {
  Mat<S> xq, xkv;
  Mat<S> q, k, v;
  std::vector<Mat<S>> probs;  // per head, Lq x Lk
  Mat<S> ctx;
};

template <typename S>
struct FfnTape {
  Mat<S> x, h1, a;
};

template <typename S>
struct DropoutTape {
  bool active = false;
  Mat<S> mask;  // values in {0, 1/(1-p)}
};

template <typename S>
struct EncLayerTape {
  LayerNormTape<S> ln1;
  AttentionTape<S> attn;
  DropoutTape<S> drop1;
  LayerNormTape<S> ln2;
  FfnTape<S> ffn;
  DropoutTape<S> drop2;
};

template <typename S>
struct EncTape {
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;
  std::vector<EncLayerTape<S>> layers;
  LayerNormTape<S> ln_f;
  Mat<S> out;
};

template <typename S>
struct DecLayerTape {
  LayerNormTape<S> ln1;
  AttentionTape<S> self_attn;
  DropoutTape<S> drop1;
  LayerNormTape<S> ln2;
  AttentionTape<S> cross_attn;
  DropoutTape<S> drop2;
  LayerNormTape<S> ln3;
  FfnTape<S> ffn;
  DropoutTape<S> drop3;
};

template <typename S>
struct DecTape {
  std::vector<int> ids;
  std::vector<std::uint8_t> mem_valid;
  std::vector<DecLayerTape<S>> layers;
  LayerNormTape<S> ln_f;
  Mat<S> hidden;  // ln_f output feeding the output projection
};

// ---------------------------------------------------------------------------
// Elementwise pieces.
// ---------------------------------------------------------------------------

inline double gelu_scalar(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
  constexpr double kC = 0.7978845608028654;
  const double u = kC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Row softmax with a double accumulator; masked entries (-inf) become 0.
template <typename S>
void softmax_rows_inplace(Mat<S>& scores) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      mx = std::max(mx, static_cast<double>(scores(i, j)));
    if (!std::isfinite(mx))
      throw NumericalError("softmax row fully masked");
    double sum = 0.0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const double e = std::exp(static_cast<double>(scores(i, j)) - mx);
      scores(i, j) = static_cast<S>(e);
      sum += e;
    }
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      scores(i, j) = static_cast<S>(static_cast<double>(scores(i, j)) / sum);
  }
}

// ---------------------------------------------------------------------------
// The model.
// ---------------------------------------------------------------------------

template <typename S>
class Backbone;

// Parameter initialization: weights ~ N(0, 0.02^2) seeded per tensor name,
// layer-norm gains 1, biases 0. Classifier tensors are appended when
// n_cls_metrics > 0; their names never collide with backbone names, so any
// shared subset initializes identically for a given seed.
template <typename S>
ParamSet<S> init_params(const BackboneConfig& cfg, std::size_t n_cls_metrics = 0);

template <typename S>
struct NllResult {
  double loss = 0.0;
  Mat<S> dlogits;
  std::size_t positions = 0;
};

template <typename S>
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
  }

  const BackboneConfig& config() const { return cfg_; }

  // Token-level representations, (len x d). Padded positions (valid == 0)
  // produce rows but are masked out as attention keys.
  Mat<S> encode_seq(const ParamSet<S>& params, const std::vector<int>& ids,
                    const std::vector<std::uint8_t>* valid, EncTape<S>& tape,
                    Rng* dropout_rng = nullptr) const;

  void encode_backward(const ParamSet<S>& params, const EncTape<S>& tape,
                       const Mat<S>& d_out, ParamSet<S>& grads) const;

  // Next-token logits for every prefix position, (prefix_len x vocab).
  Mat<S> decode_logits(const ParamSet<S>& params,
                       const std::vector<int>& prefix_ids, const Mat<S>& memory,
                       const std::vector<std::uint8_t>* mem_valid,
                       DecTape<S>& tape, Rng* dropout_rng = nullptr) const;

  // Returns the gradient with respect to the memory.
  Mat<S> decode_backward(const ParamSet<S>& params, const DecTape<S>& tape,
                         const Mat<S>& d_logits, ParamSet<S>& grads) const;

  // Mean NLL over valid target positions plus the logit gradient.
  NllResult<S> nll_loss(const Mat<S>& logits, const std::vector<int>& targets,
                        const std::vector<std::uint8_t>* valid) const;

 private:
  BackboneConfig cfg_;

  Mat<S> embed(const ParamSet<S>& params, const std::vector<int>& ids,
               const std::string& pos_table) const;

  Mat<S> layer_norm_fwd(const ParamSet<S>& params, const std::string& prefix,
                        const Mat<S>& x, LayerNormTape<S>& tape) const;
  Mat<S> layer_norm_bwd(const ParamSet<S>& params, const std::string& prefix,
                        const LayerNormTape<S>& tape, const Mat<S>& dy,
                        ParamSet<S>& grads) const;

  Mat<S> attention_fwd(const ParamSet<S>& params, const std::string& prefix,
                       const Mat<S>& xq, const Mat<S>& xkv, bool causal,
                       const std::vector<std::uint8_t>* valid_kv,
                       AttentionTape<S>& tape) const;
  // Returns (d_xq, d_xkv).
  std::pair<Mat<S>, Mat<S>> attention_bwd(const ParamSet<S>& params,
                                          const std::string& prefix,
                                          const AttentionTape<S>& tape,
                                          const Mat<S>& dy, bool causal,
                                          ParamSet<S>& grads) const;

  Mat<S> ffn_fwd(const ParamSet<S>& params, const std::string& prefix,
                 const Mat<S>& x, FfnTape<S>& tape) const;
  Mat<S> ffn_bwd(const ParamSet<S>& params, const std::string& prefix,
                 const FfnTape<S>& tape, const Mat<S>& dy,
                 ParamSet<S>& grads) const;

  Mat<S> dropout_fwd(const Mat<S>& x, Rng* rng, DropoutTape<S>& tape) const;
  Mat<S> dropout_bwd(const DropoutTape<S>& tape, const Mat<S>& dy) const;

  template <typename T>
  friend class DecodeSession;
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, Mat<S>> m;
  std::map<std::string, Mat<S>> v;
};

template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads,
               AdamState<S>& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Incremental decoding state (inference only). Per-layer self K/V rows are
// cached per hypothesis; memory K/V are precomputed once per session.
// ---------------------------------------------------------------------------

template <typename S>
class DecodeSession {
 public:
  struct State {
    std::vector<Mat<S>> self_k, self_v;  // per layer, len x d
    int len = 0;
  };

  DecodeSession(const Backbone<S>& model, const ParamSet<S>& params,
                Mat<S> memory, std::vector<std::uint8_t> mem_valid);

  State initial_state() const;

  // Feeds one token and returns next-token logits.
  std::vector<S> advance(State& state, int token) const;

  std::size_t vocab_size() const { return model_.config().vocab_size; }
  std::size_t max_positions() const { return model_.config().max_positions; }

 private:
  const Backbone<S>& model_;
  const ParamSet<S>& params_;
  Mat<S> memory_;
  std::vector<std::uint8_t> mem_valid_;
  std::vector<Mat<S>> mem_k_, mem_v_;  // per layer
};

// ---------------------------------------------------------------------------
// Finite differences (central) over every tensor element.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  std::size_t skipped_small = 0;
};

GradCheckReport gradient_check(
    ParamSet<double>& params,
    const std::function<double(const ParamSet<double>&)>& loss_fn,
    const ParamSet<double>& analytic, double epsilon = 1e-3,
    double grad_floor = 1e-6);

// ---------------------------------------------------------------------------
// Template implementations.
// ---------------------------------------------------------------------------

template <typename S>
ParamSet<S> init_params(const BackboneConfig& cfg, std::size_t n_cls_metrics) {
  cfg.validate();
  ParamSet<S> out;
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols,
                 int rank, double fill_normal_std, double fill_const) {
    Tensor<S> t;
    t.rank = rank;
    t.v = Mat<S>(static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
    if (fill_normal_std > 0.0) {
      Rng rng(splitmix64(cfg.init_seed ^ fnv1a(name)));
      for (Eigen::Index i = 0; i < t.v.rows(); ++i)
        for (Eigen::Index j = 0; j < t.v.cols(); ++j)
          t.v(i, j) = static_cast<S>(rng.normal(0.0, fill_normal_std));
    } else {
      t.v.setConstant(static_cast<S>(fill_const));
    }
    out.tensors.emplace(name, std::move(t));
  };
  const std::size_t d = cfg.d_model;
  const std::size_t ff = cfg.d_ff;
  const std::size_t v = cfg.vocab_size;
  constexpr double kStd = 0.02;

  add("embed.tok", v, d, 2, kStd, 0);
  add("embed.pos_enc", cfg.max_positions, d, 2, kStd, 0);
  add("embed.pos_dec", cfg.max_positions, d, 2, kStd, 0);

  auto add_ln = [&](const std::string& prefix) {
    add(prefix + ".gain", 1, d, 1, 0, 1.0);
    add(prefix + ".bias", 1, d, 1, 0, 0.0);
  };
  auto add_attn = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) add(prefix + "." + w, d, d, 2, kStd, 0);
    for (const char* b : {"bq", "bk", "bv", "bo"}) add(prefix + "." + b, 1, d, 1, 0, 0.0);
  };
  auto add_ffn = [&](const std::string& prefix) {
    add(prefix + ".w1", d, ff, 2, kStd, 0);
    add(prefix + ".b1", 1, ff, 1, 0, 0.0);
    add(prefix + ".w2", ff, d, 2, kStd, 0);
    add(prefix + ".b2", 1, d, 1, 0, 0.0);
  };

  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    add_ln(p + ".ln1");
    add_attn(p + ".attn");
    add_ln(p + ".ln2");
    add_ffn(p + ".ffn");
  }
  add_ln("enc.ln_f");

  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_ln(p + ".ln1");
    add_attn(p + ".self");
    add_ln(p + ".ln2");
    add_attn(p + ".cross");
    add_ln(p + ".ln3");
    add_ffn(p + ".ffn");
  }
  add_ln("dec.ln_f");

  add("out.w", d, v, 2, kStd, 0);
  add("out.b", 1, v, 1, 0, 0.0);

  if (n_cls_metrics > 0) {
    add("cls.w1", 2 * d, d, 2, kStd, 0);
    add("cls.b1", 1, d, 1, 0, 0.0);
    add("cls.w2", d, n_cls_metrics, 2, kStd, 0);
    add("cls.b2", 1, n_cls_metrics, 1, 0, 0.0);
  }
  return out;
}

template <typename S>
Mat<S> Backbone<S>::embed(const ParamSet<S>& params, const std::vector<int>& ids,
                          const std::string& pos_table) const {
  if (ids.empty()) throw DataError("empty token sequence");
  if (ids.size() > cfg_.max_positions)
    throw DataError("sequence of length " + std::to_string(ids.size()) +
                    " exceeds max positions " +
                    std::to_string(cfg_.max_positions));
  const Mat<S>& tok = params.m("embed.tok");
  const Mat<S>& pos = params.m(pos_table);
  Mat<S> x(static_cast<Eigen::Index>(ids.size()), tok.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tok.rows())
      throw DataError("token id " + std::to_string(ids[i]) +
                      " outside vocabulary");
    x.row(static_cast<Eigen::Index>(i)) =
        tok.row(ids[i]) + pos.row(static_cast<Eigen::Index>(i));
  }
  return x;
}

template <typename S>
Mat<S> Backbone<S>::layer_norm_fwd(const ParamSet<S>& params,
                                   const std::string& prefix, const Mat<S>& x,
                                   LayerNormTape<S>& tape) const {
  constexpr double kEps = 1e-5;
  const Mat<S>& gain = params.m(prefix + ".gain");
  const Mat<S>& bias = params.m(prefix + ".bias");
  tape.xhat.resize(x.rows(), x.cols());
  tape.inv_std.assign(static_cast<std::size_t>(x.rows()), 0.0);
  Mat<S> y(x.rows(), x.cols());
  const auto n = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mean += static_cast<double>(x(i, j));
    mean /= n;
    double var = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double c = static_cast<double>(x(i, j)) - mean;
      var += c * c;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kEps);
    tape.inv_std[static_cast<std::size_t>(i)] = inv;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double xh = (static_cast<double>(x(i, j)) - mean) * inv;
      tape.xhat(i, j) = static_cast<S>(xh);
      y(i, j) = static_cast<S>(xh * static_cast<double>(gain(0, j)) +
                               static_cast<double>(bias(0, j)));
    }
  }
  return y;
}

template <typename S>
Mat<S> Backbone<S>::layer_norm_bwd(const ParamSet<S>& params,
                                   const std::string& prefix,
                                   const LayerNormTape<S>& tape, const Mat<S>& dy,
                                   ParamSet<S>& grads) const {
  const Mat<S>& gain = params.m(prefix + ".gain");
  Mat<S>& dgain = grads.at(prefix + ".gain").v;
  Mat<S>& dbias = grads.at(prefix + ".bias").v;
  Mat<S> dx(dy.rows(), dy.cols());
  const auto n = static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (Eigen::Index j = 0; j < dy.cols(); ++j) {
      const double g = static_cast<double>(dy(i, j));
      const double xh = static_cast<double>(tape.xhat(i, j));
      dgain(0, j) += static_cast<S>(g * xh);
      dbias(0, j) += static_cast<S>(g);
      const double dxh = g * static_cast<double>(gain(0, j));
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh;
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    const double inv = tape.inv_std[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < dy.cols(); ++j) {
      const double dxh = static_cast<double>(dy(i, j)) *
                         static_cast<double>(gain(0, j));
      const double xh = static_cast<double>(tape.xhat(i, j));
      dx(i, j) = static_cast<S>(inv * (dxh - mean_dxhat - xh * mean_dxhat_xhat));
    }
  }
  return dx;
}

template <typename S>
Mat<S> Backbone<S>::attention_fwd(const ParamSet<S>& params,
                                  const std::string& prefix, const Mat<S>& xq,
                                  const Mat<S>& xkv, bool causal,
                                  const std::vector<std::uint8_t>* valid_kv,
                                  AttentionTape<S>& tape) const {
  const auto lq = xq.rows();
  const auto lk = xkv.rows();
  if (lk == 0) throw DataError("attention over zero-length memory");
  if (valid_kv && static_cast<Eigen::Index>(valid_kv->size()) != lk)
    throw DataError("key mask length mismatch");
  tape.xq = xq;
  tape.xkv = xkv;
  tape.q = xq * params.m(prefix + ".wq");
  tape.q.rowwise() += params.m(prefix + ".bq").row(0);
  tape.k = xkv * params.m(prefix + ".wk");
  tape.k.rowwise() += params.m(prefix + ".bk").row(0);
  tape.v = xkv * params.m(prefix + ".wv");
  tape.v.rowwise() += params.m(prefix + ".bv").row(0);

  const auto heads = static_cast<Eigen::Index>(cfg_.n_heads);
  const Eigen::Index dh = tape.q.cols() / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const S neg_inf = -std::numeric_limits<S>::infinity();

  detail::count_attention_cells(static_cast<std::uint64_t>(lq) *
                                static_cast<std::uint64_t>(lk));

  tape.probs.assign(static_cast<std::size_t>(heads), Mat<S>());
  tape.ctx.resize(lq, tape.q.cols());
  for (Eigen::Index h = 0; h < heads; ++h) {
    Mat<S> scores = (tape.q.middleCols(h * dh, dh) *
                     tape.k.middleCols(h * dh, dh).transpose()) *
                    scale;
    if (causal) {
      for (Eigen::Index i = 0; i < lq; ++i)
        for (Eigen::Index j = i + 1; j < lk; ++j) scores(i, j) = neg_inf;
    }
    if (valid_kv) {
      for (Eigen::Index j = 0; j < lk; ++j)
        if (!(*valid_kv)[static_cast<std::size_t>(j)])
          scores.col(j).setConstant(neg_inf);
    }
    softmax_rows_inplace(scores);
    tape.probs[static_cast<std::size_t>(h)] = scores;
    tape.ctx.middleCols(h * dh, dh) = scores * tape.v.middleCols(h * dh, dh);
  }
  Mat<S> y = tape.ctx * params.m(prefix + ".wo");
  y.rowwise() += params.m(prefix + ".bo").row(0);
  return y;
}

template <typename S>
std::pair<Mat<S>, Mat<S>> Backbone<S>::attention_bwd(
    const ParamSet<S>& params, const std::string& prefix,
    const AttentionTape<S>& tape, const Mat<S>& dy, bool /*causal*/,
    ParamSet<S>& grads) const {
  const auto heads = static_cast<Eigen::Index>(cfg_.n_heads);
  const Eigen::Index dh = tape.q.cols() / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  grads.at(prefix + ".wo").v += tape.ctx.transpose() * dy;
  grads.at(prefix + ".bo").v += dy.colwise().sum();
  Mat<S> dctx = dy * params.m(prefix + ".wo").transpose();

  Mat<S> dq = Mat<S>::Zero(tape.q.rows(), tape.q.cols());
  Mat<S> dk = Mat<S>::Zero(tape.k.rows(), tape.k.cols());
  Mat<S> dv = Mat<S>::Zero(tape.v.rows(), tape.v.cols());
  for (Eigen::Index h = 0; h < heads; ++h) {
    const Mat<S>& p = tape.probs[static_cast<std::size_t>(h)];
    Mat<S> dctx_h = dctx.middleCols(h * dh, dh);
    Mat<S> dp = dctx_h * tape.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) += p.transpose() * dctx_h;
    // Softmax backward; masked cells carry p == 0 and vanish.
    Mat<S> dscores(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double dot = 0.0;
      for (Eigen::Index j = 0; j < p.cols(); ++j)
        dot += static_cast<double>(dp(i, j)) * static_cast<double>(p(i, j));
      for (Eigen::Index j = 0; j < p.cols(); ++j)
        dscores(i, j) = static_cast<S>(
            static_cast<double>(p(i, j)) *
            (static_cast<double>(dp(i, j)) - dot));
    }
    dq.middleCols(h * dh, dh) +=
        (dscores * tape.k.middleCols(h * dh, dh)) * scale;
    dk.middleCols(h * dh, dh) +=
        (dscores.transpose() * tape.q.middleCols(h * dh, dh)) * scale;
  }

  grads.at(prefix + ".wq").v += tape.xq.transpose() * dq;
  grads.at(prefix + ".bq").v += dq.colwise().sum();
  grads.at(prefix + ".wk").v += tape.xkv.transpose() * dk;
  grads.at(prefix + ".bk").v += dk.colwise().sum();
  grads.at(prefix + ".wv").v += tape.xkv.transpose() * dv;
  grads.at(prefix + ".bv").v += dv.colwise().sum();

  Mat<S> dxq = dq * params.m(prefix + ".wq").transpose();
  Mat<S> dxkv = dk * params.m(prefix + ".wk").transpose() +
                dv * params.m(prefix + ".wv").transpose();
  return {std::move(dxq), std::move(dxkv)};
}

template <typename S>
Mat<S> Backbone<S>::ffn_fwd(const ParamSet<S>& params, const std::string& prefix,
                            const Mat<S>& x, FfnTape<S>& tape) const {
  tape.x = x;
  tape.h1 = x * params.m(prefix + ".w1");
  tape.h1.rowwise() += params.m(prefix + ".b1").row(0);
  tape.a.resize(tape.h1.rows(), tape.h1.cols());
  for (Eigen::Index i = 0; i < tape.h1.rows(); ++i)
    for (Eigen::Index j = 0; j < tape.h1.cols(); ++j)
      tape.a(i, j) = static_cast<S>(gelu_scalar(static_cast<double>(tape.h1(i, j))));
  Mat<S> y = tape.a * params.m(prefix + ".w2");
  y.rowwise() += params.m(prefix + ".b2").row(0);
  return y;
}

template <typename S>
Mat<S> Backbone<S>::ffn_bwd(const ParamSet<S>& params, const std::string& prefix,
                            const FfnTape<S>& tape, const Mat<S>& dy,
                            ParamSet<S>& grads) const {
  grads.at(prefix + ".w2").v += tape.a.transpose() * dy;
  grads.at(prefix + ".b2").v += dy.colwise().sum();
  Mat<S> da = dy * params.m(prefix + ".w2").transpose();
  Mat<S> dh1(da.rows(), da.cols());
  for (Eigen::Index i = 0; i < da.rows(); ++i)
    for (Eigen::Index j = 0; j < da.cols(); ++j)
      dh1(i, j) = static_cast<S>(
          static_cast<double>(da(i, j)) *
          gelu_grad_scalar(static_cast<double>(tape.h1(i, j))));
  grads.at(prefix + ".w1").v += tape.x.transpose() * dh1;
  grads.at(prefix + ".b1").v += dh1.colwise().sum();
  return dh1 * params.m(prefix + ".w1").transpose();
}

template <typename S>
Mat<S> Backbone<S>::dropout_fwd(const Mat<S>& x, Rng* rng,
                                DropoutTape<S>& tape) const {
  if (rng == nullptr || cfg_.dropout <= 0.0) {
    tape.active = false;
    return x;
  }
  tape.active = true;
  tape.mask.resize(x.rows(), x.cols());
  const double keep = 1.0 - cfg_.dropout;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      tape.mask(i, j) = rng->bernoulli(cfg_.dropout)
                            ? static_cast<S>(0)
                            : static_cast<S>(1.0 / keep);
  return x.cwiseProduct(tape.mask);
}

template <typename S>
Mat<S> Backbone<S>::dropout_bwd(const DropoutTape<S>& tape,
                                const Mat<S>& dy) const {
  if (!tape.active) return dy;
  return dy.cwiseProduct(tape.mask);
}

template <typename S>
Mat<S> Backbone<S>::encode_seq(const ParamSet<S>& params,
                               const std::vector<int>& ids,
                               const std::vector<std::uint8_t>* valid,
                               EncTape<S>& tape, Rng* dropout_rng) const {
  if (valid && valid->size() != ids.size())
    throw DataError("pad mask length mismatch");
  tape.ids = ids;
  tape.valid = valid ? *valid : std::vector<std::uint8_t>(ids.size(), 1);
  Mat<S> x = embed(params, ids, "embed.pos_enc");
  tape.layers.assign(cfg_.enc_layers, EncLayerTape<S>());
  for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
    EncLayerTape<S>& lt = tape.layers[l];
    const std::string p = "enc." + std::to_string(l);
    Mat<S> n1 = layer_norm_fwd(params, p + ".ln1", x, lt.ln1);
    Mat<S> a = attention_fwd(params, p + ".attn", n1, n1, /*causal=*/false,
                             &tape.valid, lt.attn);
    x += dropout_fwd(a, dropout_rng, lt.drop1);
    Mat<S> n2 = layer_norm_fwd(params, p + ".ln2", x, lt.ln2);
    Mat<S> f = ffn_fwd(params, p + ".ffn", n2, lt.ffn);
    x += dropout_fwd(f, dropout_rng, lt.drop2);
  }
  tape.out = layer_norm_fwd(params, "enc.ln_f", x, tape.ln_f);
  return tape.out;
}

template <typename S>
void Backbone<S>::encode_backward(const ParamSet<S>& params,
                                  const EncTape<S>& tape, const Mat<S>& d_out,
                                  ParamSet<S>& grads) const {
  Mat<S> dx = layer_norm_bwd(params, "enc.ln_f", tape.ln_f, d_out, grads);
  for (std::size_t l = cfg_.enc_layers; l-- > 0;) {
    const EncLayerTape<S>& lt = tape.layers[l];
    const std::string p = "enc." + std::to_string(l);
    Mat<S> df = dropout_bwd(lt.drop2, dx);
    Mat<S> dn2 = ffn_bwd(params, p + ".ffn", lt.ffn, df, grads);
    dx += layer_norm_bwd(params, p + ".ln2", lt.ln2, dn2, grads);
    Mat<S> da = dropout_bwd(lt.drop1, dx);
    auto [dxq, dxkv] =
        attention_bwd(params, p + ".attn", lt.attn, da, false, grads);
    Mat<S> dn1 = dxq + dxkv;
    dx += layer_norm_bwd(params, p + ".ln1", lt.ln1, dn1, grads);
  }
  Mat<S>& dtok = grads.at("embed.tok").v;
  Mat<S>& dpos = grads.at("embed.pos_enc").v;
  for (std::size_t i = 0; i < tape.ids.size(); ++i) {
    dtok.row(tape.ids[i]) += dx.row(static_cast<Eigen::Index>(i));
    dpos.row(static_cast<Eigen::Index>(i)) += dx.row(static_cast<Eigen::Index>(i));
  }
}

template <typename S>
Mat<S> Backbone<S>::decode_logits(const ParamSet<S>& params,
                                  const std::vector<int>& prefix_ids,
                                  const Mat<S>& memory,
                                  const std::vector<std::uint8_t>* mem_valid,
                                  DecTape<S>& tape, Rng* dropout_rng) const {
  if (memory.rows() == 0) throw DataError("decode over zero-length memory");
  tape.ids = prefix_ids;
  tape.mem_valid = mem_valid
                       ? *mem_valid
                       : std::vector<std::uint8_t>(
                             static_cast<std::size_t>(memory.rows()), 1);
  Mat<S> x = embed(params, prefix_ids, "embed.pos_dec");
  tape.layers.assign(cfg_.dec_layers, DecLayerTape<S>());
  for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
    DecLayerTape<S>& lt = tape.layers[l];
    const std::string p = "dec." + std::to_string(l);
    Mat<S> n1 = layer_norm_fwd(params, p + ".ln1", x, lt.ln1);
    Mat<S> a = attention_fwd(params, p + ".self", n1, n1, /*causal=*/true,
                             nullptr, lt.self_attn);
    x += dropout_fwd(a, dropout_rng, lt.drop1);
    Mat<S> n2 = layer_norm_fwd(params, p + ".ln2", x, lt.ln2);
    Mat<S> c = attention_fwd(params, p + ".cross", n2, memory,
                             /*causal=*/false, &tape.mem_valid, lt.cross_attn);
    x += dropout_fwd(c, dropout_rng, lt.drop2);
    Mat<S> n3 = layer_norm_fwd(params, p + ".ln3", x, lt.ln3);
    Mat<S> f = ffn_fwd(params, p + ".ffn", n3, lt.ffn);
    x += dropout_fwd(f, dropout_rng, lt.drop3);
  }
  tape.hidden = layer_norm_fwd(params, "dec.ln_f", x, tape.ln_f);
  Mat<S> logits = tape.hidden * params.m("out.w");
  logits.rowwise() += params.m("out.b").row(0);
  return logits;
}

template <typename S>
Mat<S> Backbone<S>::decode_backward(const ParamSet<S>& params,
                                    const DecTape<S>& tape,
                                    const Mat<S>& d_logits,
                                    ParamSet<S>& grads) const {
  grads.at("out.w").v += tape.hidden.transpose() * d_logits;
  grads.at("out.b").v += d_logits.colwise().sum();
  Mat<S> dh = d_logits * params.m("out.w").transpose();
  Mat<S> dx = layer_norm_bwd(params, "dec.ln_f", tape.ln_f, dh, grads);
  Mat<S> dmemory;
  for (std::size_t l = cfg_.dec_layers; l-- > 0;) {
    const DecLayerTape<S>& lt = tape.layers[l];
    const std::string p = "dec." + std::to_string(l);
    Mat<S> df = dropout_bwd(lt.drop3, dx);
    Mat<S> dn3 = ffn_bwd(params, p + ".ffn", lt.ffn, df, grads);
    dx += layer_norm_bwd(params, p + ".ln3", lt.ln3, dn3, grads);
    Mat<S> dc = dropout_bwd(lt.drop2, dx);
    auto [dn2, dmem_l] =
        attention_bwd(params, p + ".cross", lt.cross_attn, dc, false, grads);
    if (dmemory.size() == 0)
      dmemory = dmem_l;
    else
      dmemory += dmem_l;
    dx += layer_norm_bwd(params, p + ".ln2", lt.ln2, dn2, grads);
    Mat<S> da = dropout_bwd(lt.drop1, dx);
    auto [dxq, dxkv] =
        attention_bwd(params, p + ".self", lt.self_attn, da, true, grads);
    Mat<S> dn1 = dxq + dxkv;
    dx += layer_norm_bwd(params, p + ".ln1", lt.ln1, dn1, grads);
  }
  Mat<S>& dtok = grads.at("embed.tok").v;
  Mat<S>& dpos = grads.at("embed.pos_dec").v;
  for (std::size_t i = 0; i < tape.ids.size(); ++i) {
    dtok.row(tape.ids[i]) += dx.row(static_cast<Eigen::Index>(i));
    dpos.row(static_cast<Eigen::Index>(i)) += dx.row(static_cast<Eigen::Index>(i));
  }
  return dmemory;
}

template <typename S>
NllResult<S> Backbone<S>::nll_loss(const Mat<S>& logits,
                                   const std::vector<int>& targets,
                                   const std::vector<std::uint8_t>* valid) const {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw DataError("nll_loss: logits/targets length mismatch");
  if (valid && valid->size() != targets.size())
    throw DataError("nll_loss: mask length mismatch");
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (!valid || (*valid)[i]) ++count;
  if (count == 0) throw DataError("nll_loss: all target positions masked");

  NllResult<S> out;
  out.positions = count;
  out.dlogits = Mat<S>::Zero(logits.rows(), logits.cols());
  double loss = 0.0;
  const double inv_count = 1.0 / static_cast<double>(count);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (valid && !(*valid)[static_cast<std::size_t>(i)]) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols())
      throw DataError("nll_loss: target id out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      mx = std::max(mx, static_cast<double>(logits(i, j)));
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      z += std::exp(static_cast<double>(logits(i, j)) - mx);
    const double log_z = mx + std::log(z);
    loss -= static_cast<double>(logits(i, t)) - log_z;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double p = std::exp(static_cast<double>(logits(i, j)) - log_z);
      out.dlogits(i, j) = static_cast<S>(p * inv_count);
    }
    out.dlogits(i, t) -= static_cast<S>(inv_count);
  }
  out.loss = loss * inv_count;
  if (!std::isfinite(out.loss))
    throw NumericalError("nll_loss produced a non-finite value");
  return out;
}

template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads,
               AdamState<S>& state, const AdamConfig& cfg) {
  if (!grads.all_finite()) {
    for (const auto& [name, t] : grads.tensors)
      if (!t.v.allFinite())
        throw NumericalError("non-finite gradient in tensor " + name);
  }
  if (state.m.empty()) {
    for (const auto& [name, t] : params.tensors) {
      state.m.emplace(name, Mat<S>::Zero(t.v.rows(), t.v.cols()));
      state.v.emplace(name, Mat<S>::Zero(t.v.rows(), t.v.cols()));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params.tensors) {
    const Mat<S>& g = grads.at(name).v;
    Mat<S>& m = state.m.at(name);
    Mat<S>& v = state.v.at(name);
    if (g.rows() != t.v.rows() || g.cols() != t.v.cols())
      throw DataError("adam_step: gradient shape mismatch for " + name);
    for (Eigen::Index i = 0; i < t.v.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.v.cols(); ++j) {
        const double gd = static_cast<double>(g(i, j));
        const double md = cfg.beta1 * static_cast<double>(m(i, j)) +
                          (1.0 - cfg.beta1) * gd;
        const double vd = cfg.beta2 * static_cast<double>(v(i, j)) +
                          (1.0 - cfg.beta2) * gd * gd;
        m(i, j) = static_cast<S>(md);
        v(i, j) = static_cast<S>(vd);
        const double update =
            cfg.lr * (md / bc1) / (std::sqrt(vd / bc2) + cfg.eps);
        t.v(i, j) = static_cast<S>(static_cast<double>(t.v(i, j)) - update);
      }
    }
  }
}

template <typename S>
DecodeSession<S>::DecodeSession(const Backbone<S>& model,
                                const ParamSet<S>& params, Mat<S> memory,
                                std::vector<std::uint8_t> mem_valid)
    : model_(model),
      params_(params),
      memory_(std::move(memory)),
      mem_valid_(std::move(mem_valid)) {
  if (memory_.rows() == 0) throw DataError("decode over zero-length memory");
  if (mem_valid_.empty())
    mem_valid_.assign(static_cast<std::size_t>(memory_.rows()), 1);
  if (static_cast<Eigen::Index>(mem_valid_.size()) != memory_.rows())
    throw DataError("memory mask length mismatch");
  const auto& cfg = model_.config();
  mem_k_.reserve(cfg.dec_layers);
  mem_v_.reserve(cfg.dec_layers);
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".cross";
    Mat<S> k = memory_ * params_.m(p + ".wk");
    k.rowwise() += params_.m(p + ".bk").row(0);
    Mat<S> v = memory_ * params_.m(p + ".wv");
    v.rowwise() += params_.m(p + ".bv").row(0);
    mem_k_.push_back(std::move(k));
    mem_v_.push_back(std::move(v));
  }
}

template <typename S>
typename DecodeSession<S>::State DecodeSession<S>::initial_state() const {
  State s;
  const auto& cfg = model_.config();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  s.self_k.assign(cfg.dec_layers, Mat<S>(0, d));
  s.self_v.assign(cfg.dec_layers, Mat<S>(0, d));
  return s;
}

template <typename S>
std::vector<S> DecodeSession<S>::advance(State& state, int token) const {
  const auto& cfg = model_.config();
  if (state.len >= static_cast<int>(cfg.max_positions))
    throw DataError("decode prefix exceeds max positions");
  const Mat<S>& tok = params_.m("embed.tok");
  if (token < 0 || token >= tok.rows())
    throw DataError("token id outside vocabulary");
  Mat<S> x = tok.row(token) + params_.m("embed.pos_dec").row(state.len);

  const auto heads = static_cast<Eigen::Index>(cfg.n_heads);
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  Backbone<S> const& bb = model_;

  auto ln_row = [&](const std::string& prefix, const Mat<S>& in) {
    LayerNormTape<S> tape;
    return bb.layer_norm_fwd(params_, prefix, in, tape);
  };

  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    // Self-attention over the cached prefix plus the new row.
    Mat<S> n1 = ln_row(p + ".ln1", x);
    Mat<S> qrow = n1 * params_.m(p + ".self.wq");
    qrow.rowwise() += params_.m(p + ".self.bq").row(0);
    Mat<S> krow = n1 * params_.m(p + ".self.wk");
    krow.rowwise() += params_.m(p + ".self.bk").row(0);
    Mat<S> vrow = n1 * params_.m(p + ".self.wv");
    vrow.rowwise() += params_.m(p + ".self.bv").row(0);
    Mat<S>& ks = state.self_k[l];
    Mat<S>& vs = state.self_v[l];
    ks.conservativeResize(ks.rows() + 1, Eigen::NoChange);
    ks.row(ks.rows() - 1) = krow.row(0);
    vs.conservativeResize(vs.rows() + 1, Eigen::NoChange);
    vs.row(vs.rows() - 1) = vrow.row(0);
    Mat<S> ctx(1, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<S> scores =
          (qrow.middleCols(h * dh, dh) * ks.middleCols(h * dh, dh).transpose()) *
          scale;
      softmax_rows_inplace(scores);
      ctx.middleCols(h * dh, dh) = scores * vs.middleCols(h * dh, dh);
    }
    Mat<S> a = ctx * params_.m(p + ".self.wo");
    a.rowwise() += params_.m(p + ".self.bo").row(0);
    x += a;

    // Cross-attention against the precomputed memory projections.
    Mat<S> n2 = ln_row(p + ".ln2", x);
    Mat<S> qc = n2 * params_.m(p + ".cross.wq");
    qc.rowwise() += params_.m(p + ".cross.bq").row(0);
    Mat<S> cctx(1, d);
    const S neg_inf = -std::numeric_limits<S>::infinity();
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<S> scores = (qc.middleCols(h * dh, dh) *
                       mem_k_[l].middleCols(h * dh, dh).transpose()) *
                      scale;
      for (Eigen::Index j = 0; j < scores.cols(); ++j)
        if (!mem_valid_[static_cast<std::size_t>(j)])
          scores(0, j) = neg_inf;
      softmax_rows_inplace(scores);
      cctx.middleCols(h * dh, dh) = scores * mem_v_[l].middleCols(h * dh, dh);
    }
    Mat<S> c = cctx * params_.m(p + ".cross.wo");
    c.rowwise() += params_.m(p + ".cross.bo").row(0);
    x += c;

    Mat<S> n3 = ln_row(p + ".ln3", x);
    FfnTape<S> ftape;
    x += bb.ffn_fwd(params_, p + ".ffn", n3, ftape);
  }
  Mat<S> h = ln_row("dec.ln_f", x);
  Mat<S> logits = h * params_.m("out.w");
  logits.rowwise() += params_.m("out.b").row(0);
  ++state.len;
  std::vector<S> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    out[static_cast<std::size_t>(j)] = logits(0, j);
  return out;
}

}  // namespace summafusion
