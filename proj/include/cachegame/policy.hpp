#pragma once

// Actor-critic policy over encoded history windows.
//
// A learned summary token is prepended to the non-padding rows of the window
// and the sequence goes through a stack of pre-norm self-attention encoder
// layers. The summary token's final state feeds a masked categorical actor
// head and a scalar critic head. Padding rows are dropped before the encoder,
// which is exactly equivalent to masking them out of every attention key set.
//
// Gradients are hand-derived. The network is a template over the scalar type
// so the same code runs in float for training and in double for
// finite-difference checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cachegame/env.hpp"
#include "cachegame/errors.hpp"
#include "cachegame/rng.hpp"

namespace cachegame {

struct PolicyConfig {
  std::size_t input_dim = 0;
  std::size_t num_actions = 0;
  /// First guess action id; guesses occupy [guess_begin, num_actions).
  std::size_t guess_begin = 0;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_dim = 128;
  /// Subtracted from the initial guess-action logits. A freshly initialized
  /// policy then explores accesses and triggers before committing to a guess.
  double guess_logit_bias = 3.0;

  void validate() const {
    if (input_dim == 0 || num_actions == 0) throw ConfigError("policy needs input_dim and num_actions");
    if (guess_begin > num_actions) throw ConfigError("policy guess_begin exceeds num_actions");
    if (width == 0 || heads == 0 || depth == 0 || ffn_dim == 0)
      throw ConfigError("policy width, heads, depth and ffn_dim must be positive");
    if (width % heads != 0) throw ConfigError("policy width must be divisible by heads");
    if (!std::isfinite(guess_logit_bias)) throw ConfigError("guess_logit_bias must be finite");
  }
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Masked categorical distribution over the flat action set.
template <typename S>
struct ActionDistribution {
  std::vector<S> probs;
  std::vector<S> log_probs; // -inf on masked actions
  std::vector<bool> legal;

  S entropy() const {
    S h = 0;
    for (std::size_t i = 0; i < probs.size(); ++i)
      if (legal[i] && probs[i] > 0) h -= probs[i] * log_probs[i];
    return h;
  }

  /// Highest-probability legal action; ties go to the lowest id.
  std::size_t argmax() const {
    std::size_t best = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i)
      if (legal[i] && (best == probs.size() || probs[i] > probs[best])) best = i;
    return best;
  }

  std::size_t sample(Rng& rng) const {
    const double u = uniform_unit(rng);
    double acc = 0.0;
    std::size_t last = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!legal[i]) continue;
      last = i;
      acc += static_cast<double>(probs[i]);
      if (u < acc) return i;
    }
    return last;
  }
};

template <typename S>
class PolicyNet {
public:
  struct Output {
    ActionDistribution<S> dist;
    std::vector<S> logits; // masked entries are -inf
    S value = 0;
  };

  PolicyNet() = default;

  PolicyNet(PolicyConfig cfg, std::vector<bool> legal, std::uint64_t seed) : cfg_(cfg), legal_(std::move(legal)) {
    cfg_.validate();
    if (legal_.size() != cfg_.num_actions) throw ContractError("legal mask size differs from num_actions");
    layout();
    initialize(seed);
  }

  const PolicyConfig& config() const { return cfg_; }
  const std::vector<bool>& legal_mask() const { return legal_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<S> params() { return params_; }
  std::span<const S> params() const { return params_; }
  std::span<S> grads() { return grads_; }
  std::span<const S> grads() const { return grads_; }
  void zero_grad() { std::fill(grads_.begin(), grads_.end(), S(0)); }

  /// Overwrites the parameters (checkpoint load). Size must match.
  template <typename T>
  void set_params(std::span<const T> values) {
    if (values.size() != params_.size()) throw ContractError("parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) params_[i] = static_cast<S>(values[i]);
  }

  Output forward(const FeatureSequence& x) const {
    Workspace ws;
    return run(x, ws);
  }

  /// Forward pass that keeps activations for a following backward() call.
  struct Workspace;
  Output forward(const FeatureSequence& x, Workspace& ws) const { return run(x, ws); }

  /// Accumulates parameter gradients given dLoss/dlogits (masked entries are
  /// ignored) and dLoss/dvalue for the pass recorded in `ws`.
  void backward(const Workspace& ws, std::span<const S> dlogits, S dvalue) {
    const std::size_t d = cfg_.width;
    RowVec<S> dl(cfg_.num_actions);
    for (std::size_t i = 0; i < cfg_.num_actions; ++i) dl[i] = legal_[i] ? dlogits[i] : S(0);

    // Heads.
    gmat(pi_w_).noalias() += ws.head_in.transpose() * dl;
    gvec(pi_b_) += dl;
    gmat(v_w_).noalias() += ws.head_in.transpose() * dvalue;
    gvec(v_b_)[0] += dvalue;
    RowVec<S> dh = dl * mat(pi_w_).transpose() + dvalue * mat(v_w_).transpose();

    // Final norm on the summary row.
    Mat<S> dx = Mat<S>::Zero(ws.n, d);
    {
      Mat<S> dsum(1, d);
      layer_norm_backward(dh, ws.final_ln, final_ln_g_, final_ln_b_, dsum);
      dx.row(0) = dsum;
    }

    for (std::size_t l = cfg_.depth; l-- > 0;) {
      const auto& p = layers_[l];
      const auto& c = ws.layers[l];
      // Feed-forward block: x2 = x1 + W2 gelu(W1 ln2(x1)).
      gmat(p.w2).noalias() += c.act.transpose() * dx;
      gvec(p.b2) += dx.colwise().sum();
      Mat<S> dact = dx * mat(p.w2).transpose();
      Mat<S> dpre = dact.cwiseProduct(c.pre.unaryExpr([](S z) { return gelu_grad(z); }));
      gmat(p.w1).noalias() += c.ln2.y.transpose() * dpre;
      gvec(p.b1) += dpre.colwise().sum();
      Mat<S> dln2 = dpre * mat(p.w1).transpose();
      Mat<S> dx1 = dx;
      {
        Mat<S> tmp(ws.n, d);
        layer_norm_backward(dln2, c.ln2, p.ln2_g, p.ln2_b, tmp);
        dx1 += tmp;
      }
      // Attention block: x1 = x + Wo attn(ln1(x)).
      gmat(p.wo).noalias() += c.attn.transpose() * dx1;
      gvec(p.bo) += dx1.colwise().sum();
      Mat<S> dattn = dx1 * mat(p.wo).transpose();
      const std::size_t hd = d / cfg_.heads;
      const S scale = S(1) / std::sqrt(static_cast<S>(hd));
      Mat<S> dq(ws.n, d), dk(ws.n, d), dv(ws.n, d);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const auto cols = Eigen::seqN(h * hd, hd);
        const Mat<S>& pr = c.probs[h];
        Mat<S> dp = dattn(Eigen::all, cols) * c.v(Eigen::all, cols).transpose();
        dv(Eigen::all, cols) = pr.transpose() * dattn(Eigen::all, cols);
        Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(pr).rowwise().sum();
        Mat<S> ds = pr.cwiseProduct(dp.colwise() - rowdot) * scale;
        dq(Eigen::all, cols) = ds * c.k(Eigen::all, cols);
        dk(Eigen::all, cols) = ds.transpose() * c.q(Eigen::all, cols);
      }
      gmat(p.wq).noalias() += c.ln1.y.transpose() * dq;
      gmat(p.wk).noalias() += c.ln1.y.transpose() * dk;
      gmat(p.wv).noalias() += c.ln1.y.transpose() * dv;
      gvec(p.bq) += dq.colwise().sum();
      gvec(p.bk) += dk.colwise().sum();
      gvec(p.bv) += dv.colwise().sum();
      Mat<S> dln1 = dq * mat(p.wq).transpose() + dk * mat(p.wk).transpose() + dv * mat(p.wv).transpose();
      {
        Mat<S> tmp(ws.n, d);
        layer_norm_backward(dln1, c.ln1, p.ln1_g, p.ln1_b, tmp);
        dx = dx1 + tmp;
      }
    }

    // Embedding.
    gvec(cls_) += dx.row(0);
    if (ws.n > 1) {
      const auto rows = dx.bottomRows(ws.n - 1);
      gmat(in_w_).noalias() += ws.input.transpose() * rows;
      gvec(in_b_) += rows.colwise().sum();
    }
  }

  struct Workspace {
    struct Norm {
      Mat<S> y;    // normalized and affine-transformed output
      Mat<S> xhat; // normalized input
      std::vector<S> rstd;
    };
    struct Layer {
      Norm ln1, ln2;
      Mat<S> q, k, v, attn, pre, act;
      std::vector<Mat<S>> probs;
    };
    std::size_t n = 0;
    Mat<S> input;
    std::vector<Layer> layers;
    Norm final_ln;
    RowVec<S> head_in;
  };

private:
  struct Slot {
    std::size_t offset = 0, rows = 0, cols = 0;
  };
  struct LayerSlots {
    Slot ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  static S gelu(S z) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    return S(0.5) * z * (S(1) + std::tanh(c * (z + S(0.044715) * z * z * z)));
  }
  static S gelu_grad(S z) {
    const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S t = std::tanh(c * (z + S(0.044715) * z * z * z));
    return S(0.5) * (S(1) + t) + S(0.5) * z * (S(1) - t * t) * c * (S(1) + S(3 * 0.044715) * z * z);
  }

  Slot alloc(std::size_t rows, std::size_t cols) {
    // Every block starts on a 64-element boundary of an aligned buffer so
    // Eigen's vectorized reductions see the same alignment on every run.
    total_ = (total_ + kBlockAlign - 1) / kBlockAlign * kBlockAlign;
    Slot s{total_, rows, cols};
    total_ += rows * cols;
    return s;
  }

  void layout() {
    const std::size_t d = cfg_.width;
    total_ = 0;
    in_w_ = alloc(cfg_.input_dim, d);
    in_b_ = alloc(1, d);
    cls_ = alloc(1, d);
    layers_.clear();
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      LayerSlots p;
      p.ln1_g = alloc(1, d);
      p.ln1_b = alloc(1, d);
      p.wq = alloc(d, d);
      p.bq = alloc(1, d);
      p.wk = alloc(d, d);
      p.bk = alloc(1, d);
      p.wv = alloc(d, d);
      p.bv = alloc(1, d);
      p.wo = alloc(d, d);
      p.bo = alloc(1, d);
      p.ln2_g = alloc(1, d);
      p.ln2_b = alloc(1, d);
      p.w1 = alloc(d, cfg_.ffn_dim);
      p.b1 = alloc(1, cfg_.ffn_dim);
      p.w2 = alloc(cfg_.ffn_dim, d);
      p.b2 = alloc(1, d);
      layers_.push_back(p);
    }
    final_ln_g_ = alloc(1, d);
    final_ln_b_ = alloc(1, d);
    pi_w_ = alloc(d, cfg_.num_actions);
    pi_b_ = alloc(1, cfg_.num_actions);
    v_w_ = alloc(d, 1);
    v_b_ = alloc(1, 1);
    params_.assign(total_, S(0));
    grads_.assign(total_, S(0));
  }

  void fill_normal(Slot s, double stddev, Rng& rng) {
    for (std::size_t i = 0; i < s.rows * s.cols; ++i)
      params_[s.offset + i] = static_cast<S>(stddev * standard_normal(rng));
  }
  void fill_const(Slot s, S value) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.rows * s.cols, value);
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    const double d = static_cast<double>(cfg_.width);
    fill_normal(in_w_, 1.0 / std::sqrt(static_cast<double>(cfg_.input_dim)), rng);
    fill_normal(cls_, 1.0, rng);
    // Residual branches are scaled down with depth.
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.depth));
    for (auto& p : layers_) {
      fill_const(p.ln1_g, S(1));
      fill_const(p.ln2_g, S(1));
      fill_normal(p.wq, 1.0 / std::sqrt(d), rng);
      fill_normal(p.wk, 1.0 / std::sqrt(d), rng);
      fill_normal(p.wv, 1.0 / std::sqrt(d), rng);
      fill_normal(p.wo, resid / std::sqrt(d), rng);
      fill_normal(p.w1, std::sqrt(2.0 / d), rng);
      fill_normal(p.w2, resid / std::sqrt(static_cast<double>(cfg_.ffn_dim)), rng);
    }
    fill_const(final_ln_g_, S(1));
    fill_normal(pi_w_, 0.01 / std::sqrt(d), rng);
    fill_normal(v_w_, 1.0 / std::sqrt(d), rng);
    // Guess logits start below the others.
    for (std::size_t i = cfg_.guess_begin; i < cfg_.num_actions; ++i)
      params_[pi_b_.offset + i] = static_cast<S>(-cfg_.guess_logit_bias);
  }

private:
  Eigen::Map<Mat<S>> gmat(Slot s) { return {grads_.data() + s.offset, Eigen::Index(s.rows), Eigen::Index(s.cols)}; }
  Eigen::Map<RowVec<S>> gvec(Slot s) { return {grads_.data() + s.offset, Eigen::Index(s.rows * s.cols)}; }
  Eigen::Map<const Mat<S>> mat(Slot s) const {
    return {params_.data() + s.offset, Eigen::Index(s.rows), Eigen::Index(s.cols)};
  }
  Eigen::Map<const RowVec<S>> vec(Slot s) const { return {params_.data() + s.offset, Eigen::Index(s.rows * s.cols)}; }

  void layer_norm(const Mat<S>& x, Slot g, Slot b, typename Workspace::Norm& out) const {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    out.xhat.resize(n, d);
    out.rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
      const S mean = x.row(r).mean();
      const S var = (x.row(r).array() - mean).square().mean();
      const S rstd = S(1) / std::sqrt(var + S(1e-5));
      out.rstd[static_cast<std::size_t>(r)] = rstd;
      out.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    }
    out.y = (out.xhat.array().rowwise() * vec(g).array()).rowwise() + vec(b).array();
  }

  template <typename In, typename Out>
  void layer_norm_backward(const In& dy, const typename Workspace::Norm& c, Slot g, Slot b, Out& dx) {
    gvec(g) += dy.cwiseProduct(c.xhat).colwise().sum();
    gvec(b) += dy.colwise().sum();
    const Eigen::Index d = dy.cols();
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      RowVec<S> dxhat = dy.row(r).cwiseProduct(vec(g));
      const S m1 = dxhat.sum() / static_cast<S>(d);
      const S m2 = dxhat.dot(c.xhat.row(r)) / static_cast<S>(d);
      dx.row(r) = c.rstd[static_cast<std::size_t>(r)] *
                  (dxhat.array() - m1 - c.xhat.row(r).array() * m2).matrix();
    }
  }

  Output run(const FeatureSequence& fs, Workspace& ws) const {
    if (fs.cols != cfg_.input_dim)
      throw ContractError("window feature width " + std::to_string(fs.cols) + " != policy input_dim " +
                          std::to_string(cfg_.input_dim));
    if (fs.first_valid > fs.rows || fs.data.size() != fs.rows * fs.cols)
      throw ContractError("malformed feature sequence");
    const std::size_t d = cfg_.width;
    const std::size_t valid = fs.rows - fs.first_valid;
    const std::size_t n = valid + 1;
    ws.n = n;
    ws.input.resize(Eigen::Index(valid), Eigen::Index(fs.cols));
    for (std::size_t r = 0; r < valid; ++r)
      for (std::size_t c = 0; c < fs.cols; ++c)
        ws.input(Eigen::Index(r), Eigen::Index(c)) = static_cast<S>(fs.at(fs.first_valid + r, c));

    Mat<S> x(n, d);
    x.row(0) = vec(cls_);
    if (valid > 0) x.bottomRows(Eigen::Index(valid)) = (ws.input * mat(in_w_)).rowwise() + vec(in_b_);

    const std::size_t hd = d / cfg_.heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    ws.layers.resize(cfg_.depth);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const auto& p = layers_[l];
      auto& c = ws.layers[l];
      layer_norm(x, p.ln1_g, p.ln1_b, c.ln1);
      c.q = (c.ln1.y * mat(p.wq)).rowwise() + vec(p.bq);
      c.k = (c.ln1.y * mat(p.wk)).rowwise() + vec(p.bk);
      c.v = (c.ln1.y * mat(p.wv)).rowwise() + vec(p.bv);
      c.attn.resize(Eigen::Index(n), Eigen::Index(d));
      c.probs.resize(cfg_.heads);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const auto cols = Eigen::seqN(h * hd, hd);
        Mat<S> sc = (c.q(Eigen::all, cols) * c.k(Eigen::all, cols).transpose()) * scale;
        for (Eigen::Index r = 0; r < sc.rows(); ++r) {
          const S mx = sc.row(r).maxCoeff();
          sc.row(r) = (sc.row(r).array() - mx).exp();
          sc.row(r) /= sc.row(r).sum();
        }
        c.attn(Eigen::all, cols) = sc * c.v(Eigen::all, cols);
        c.probs[h] = std::move(sc);
      }
      x.noalias() += (c.attn * mat(p.wo)).rowwise() + vec(p.bo);
      layer_norm(x, p.ln2_g, p.ln2_b, c.ln2);
      c.pre = (c.ln2.y * mat(p.w1)).rowwise() + vec(p.b1);
      c.act = c.pre.unaryExpr([](S z) { return gelu(z); });
      x.noalias() += (c.act * mat(p.w2)).rowwise() + vec(p.b2);
    }

    Mat<S> summary = x.topRows(1);
    layer_norm(summary, final_ln_g_, final_ln_b_, ws.final_ln);
    ws.head_in = ws.final_ln.y.row(0);

    Output out;
    RowVec<S> logits = ws.head_in * mat(pi_w_) + vec(pi_b_);
    out.value = (ws.head_in * mat(v_w_))(0, 0) + vec(v_b_)[0];
    const std::size_t a = cfg_.num_actions;
    out.logits.assign(a, -std::numeric_limits<S>::infinity());
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t i = 0; i < a; ++i)
      if (legal_[i]) {
        out.logits[i] = logits[Eigen::Index(i)];
        mx = std::max(mx, out.logits[i]);
      }
    S z = 0;
    for (std::size_t i = 0; i < a; ++i)
      if (legal_[i]) z += std::exp(out.logits[i] - mx);
    const S logz = mx + std::log(z);
    out.dist.legal = legal_;
    out.dist.probs.assign(a, S(0));
    out.dist.log_probs.assign(a, -std::numeric_limits<S>::infinity());
    for (std::size_t i = 0; i < a; ++i)
      if (legal_[i]) {
        out.dist.log_probs[i] = out.logits[i] - logz;
        out.dist.probs[i] = std::exp(out.dist.log_probs[i]);
      }
    return out;
  }

  PolicyConfig cfg_;
  std::vector<bool> legal_;
  static constexpr std::size_t kBlockAlign = 64;
  std::vector<S, Eigen::aligned_allocator<S>> params_;
  std::vector<S, Eigen::aligned_allocator<S>> grads_;
  std::size_t total_ = 0;
  Slot in_w_, in_b_, cls_, final_ln_g_, final_ln_b_, pi_w_, pi_b_, v_w_, v_b_;
  std::vector<LayerSlots> layers_;
};

} // namespace cachegame
