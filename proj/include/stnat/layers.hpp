#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "stnat/ops.hpp"

namespace stnat {

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> xavier_init(Shape shape, Rng& rng) {
  std::size_t fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
  std::size_t fan_out = shape.back();
  if (shape.size() == 3) fan_in = shape[0] * shape[1];  // conv kernels
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  Tensor<Real> t(shape, true);
  for (auto& v : t.v()) v = static_cast<Real>(rng.normal() * std_dev);
  return t;
}

template <class Real>
struct LayerNormParams {
  Tensor<Real> gain, bias;

  static LayerNormParams init(std::size_t d) {
    LayerNormParams p;
    p.gain = Tensor<Real>(Shape{d}, true);
    std::fill(p.gain.v().begin(), p.gain.v().end(), Real(1));
    p.bias = Tensor<Real>(Shape{d}, true);
    return p;
  }
};

// Combined projections for all heads: each of wq/wk/wv is d_m x d_m and is
// split column-wise into n_heads blocks of d_m / n_heads.
template <class Real>
struct AttentionParams {
  Tensor<Real> wq, wk, wv, wo;
  std::size_t n_heads = 1;

  std::size_t d_model() const { return wq.rows(); }
  std::size_t head_dim() const { return d_model() / n_heads; }

  static AttentionParams init(std::size_t d_m, std::size_t n_heads, Rng& rng) {
    if (n_heads == 0 || d_m % n_heads != 0)
      throw UsageError("attention: d_model " + std::to_string(d_m) +
                       " not divisible by " + std::to_string(n_heads) +
                       " heads");
    AttentionParams p;
    p.n_heads = n_heads;
    p.wq = xavier_init<Real>({d_m, d_m}, rng);
    p.wk = xavier_init<Real>({d_m, d_m}, rng);
    p.wv = xavier_init<Real>({d_m, d_m}, rng);
    p.wo = xavier_init<Real>({d_m, d_m}, rng);
    return p;
  }
};

template <class Real>
struct FfnParams {
  Tensor<Real> w1, b1, w2, b2;  // d_m x 2*d_ff, 2*d_ff, d_ff x d_m, d_m

  static FfnParams init(std::size_t d_m, std::size_t d_ff, Rng& rng) {
    FfnParams p;
    p.w1 = xavier_init<Real>({d_m, 2 * d_ff}, rng);
    p.b1 = Tensor<Real>(Shape{2 * d_ff}, true);
    p.w2 = xavier_init<Real>({d_ff, d_m}, rng);
    p.b2 = Tensor<Real>(Shape{d_m}, true);
    return p;
  }
};

// One pre-norm transformer block; decoder blocks additionally carry a
// source-attention sublayer.
template <class Real>
struct BlockParams {
  AttentionParams<Real> self_attn;
  LayerNormParams<Real> ln_self;
  std::optional<AttentionParams<Real>> src_attn;
  std::optional<LayerNormParams<Real>> ln_src;
  FfnParams<Real> ffn;
  LayerNormParams<Real> ln_ffn;

  static BlockParams init(std::size_t d_m, std::size_t n_heads,
                          std::size_t d_ff, bool with_source, Rng& rng) {
    BlockParams p;
    p.self_attn = AttentionParams<Real>::init(d_m, n_heads, rng);
    p.ln_self = LayerNormParams<Real>::init(d_m);
    if (with_source) {
      p.src_attn = AttentionParams<Real>::init(d_m, n_heads, rng);
      p.ln_src = LayerNormParams<Real>::init(d_m);
    }
    p.ffn = FfnParams<Real>::init(d_m, d_ff, rng);
    p.ln_ffn = LayerNormParams<Real>::init(d_m);
    return p;
  }
};

template <class Real>
struct FrontEndParams {
  Tensor<Real> conv1_k, conv1_b, conv2_k, conv2_b;

  static FrontEndParams init(std::size_t in_dim, std::size_t d_m, Rng& rng) {
    FrontEndParams p;
    p.conv1_k = xavier_init<Real>({3, in_dim, d_m}, rng);
    p.conv1_b = Tensor<Real>(Shape{d_m}, true);
    p.conv2_k = xavier_init<Real>({3, d_m, d_m}, rng);
    p.conv2_b = Tensor<Real>(Shape{d_m}, true);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Forward-pass context: the graph plus everything that changes between
// training and evaluation.
// ---------------------------------------------------------------------------

// Source-attention weights captured during a decode, indexed
// [decoder_layer][head]; each entry is a [T' x T_enc] row-stochastic matrix.
template <class Real>
struct AttnCapture {
  std::vector<std::vector<Tensor<Real>>> source;
};

template <class Real>
struct RunCtx {
  Graph<Real>& g;
  bool training = false;
  Real dropout = Real(0);
  Rng* rng = nullptr;
  AttnCapture<Real>* capture = nullptr;
};

template <class Real>
Tensor<Real> ctx_dropout(RunCtx<Real>& ctx, Tensor<Real> x) {
  if (!ctx.training || ctx.dropout <= Real(0)) return x;
  if (!ctx.rng) throw UsageError("dropout requested without a generator");
  return dropout(ctx.g, x, ctx.dropout, *ctx.rng);
}

// ---------------------------------------------------------------------------
// Attention and feed-forward
// ---------------------------------------------------------------------------

// softmax(Q K^T / sqrt(d_k)) V with optional masking; blocked positions get
// exactly zero weight. `weights_out` receives the post-softmax weights.
template <class Real>
Tensor<Real> self_attention(RunCtx<Real>& ctx, Tensor<Real> q, Tensor<Real> k,
                            Tensor<Real> v, const BoolGrid* mask = nullptr,
                            Tensor<Real>* weights_out = nullptr) {
  if (q.cols() != k.cols())
    throw ShapeError("attention: query dim " + std::to_string(q.cols()) +
                     " vs key dim " + std::to_string(k.cols()));
  if (k.rows() != v.rows())
    throw ShapeError("attention: " + std::to_string(k.rows()) + " keys vs " +
                     std::to_string(v.rows()) + " values");
  const Real inv_sqrt_dk =
      Real(1) / std::sqrt(static_cast<Real>(std::max<std::size_t>(q.cols(), 1)));
  Tensor<Real> scores = scale(ctx.g, matmul_nt(ctx.g, q, k), inv_sqrt_dk);
  Tensor<Real> weights = masked_softmax(ctx.g, scores, mask);
  if (weights_out) *weights_out = weights;
  weights = ctx_dropout(ctx, weights);
  return matmul(ctx.g, weights, v);
}

// Multi-head attention: per-head column blocks of the combined projections,
// scaled dot-product attention per head, concat, output projection.
template <class Real>
Tensor<Real> multi_head(RunCtx<Real>& ctx, Tensor<Real> x_q, Tensor<Real> x_kv,
                        const AttentionParams<Real>& p,
                        const BoolGrid* mask = nullptr,
                        std::vector<Tensor<Real>>* head_weights = nullptr) {
  const std::size_t d_m = p.d_model();
  if (x_q.cols() != d_m || x_kv.cols() != d_m)
    throw ShapeError("multi_head: inputs must have last extent " +
                     std::to_string(d_m));
  const std::size_t dh = p.head_dim();
  Tensor<Real> q = matmul(ctx.g, x_q, p.wq);
  Tensor<Real> k = matmul(ctx.g, x_kv, p.wk);
  Tensor<Real> v = matmul(ctx.g, x_kv, p.wv);
  std::vector<Tensor<Real>> heads;
  heads.reserve(p.n_heads);
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    Tensor<Real> qh = slice_cols(ctx.g, q, h * dh, (h + 1) * dh);
    Tensor<Real> kh = slice_cols(ctx.g, k, h * dh, (h + 1) * dh);
    Tensor<Real> vh = slice_cols(ctx.g, v, h * dh, (h + 1) * dh);
    Tensor<Real> w;
    heads.push_back(self_attention(ctx, qh, kh, vh, mask,
                                   head_weights ? &w : nullptr));
    if (head_weights) head_weights->push_back(w);
  }
  return matmul(ctx.g, concat_cols(ctx.g, heads), p.wo);
}

// GLU(x W1 + b1) W2 + b2
template <class Real>
Tensor<Real> ffn(RunCtx<Real>& ctx, Tensor<Real> x, const FfnParams<Real>& p) {
  if (x.cols() != p.w1.rows())
    throw ShapeError("ffn: input dim " + std::to_string(x.cols()) + " vs " +
                     std::to_string(p.w1.rows()));
  Tensor<Real> h = add_rowvec(ctx.g, matmul(ctx.g, x, p.w1), p.b1);
  h = glu(ctx.g, h);
  return add_rowvec(ctx.g, matmul(ctx.g, h, p.w2), p.b2);
}

// ---------------------------------------------------------------------------
// Positional embedding: interleaved sine/cosine at geometric wavelengths,
// pe[t, 2k] = sin(t / 10000^(2k/d)), pe[t, 2k+1] = cos of the same angle.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> positional_embedding(std::size_t T, std::size_t d_m) {
  Tensor<Real> pe(Shape{T, d_m});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; 2 * k < d_m; ++k) {
      const double angle =
          static_cast<double>(t) /
          std::pow(10000.0, 2.0 * static_cast<double>(k) /
                                static_cast<double>(d_m));
      pe.v()[t * d_m + 2 * k] = static_cast<Real>(std::sin(angle));
      if (2 * k + 1 < d_m)
        pe.v()[t * d_m + 2 * k + 1] = static_cast<Real>(std::cos(angle));
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Convolution front end: two stride-2 width-3 time convolutions with ReLU
// (in_dim -> d_m -> d_m), total time downsampling x4, positional embedding
// added to the result.
// ---------------------------------------------------------------------------

inline std::size_t conv_out_len(std::size_t T) { return (T + 1) / 2; }

// Encoder frame count for T feature frames.
inline std::size_t front_end_out_len(std::size_t T) {
  return conv_out_len(conv_out_len(T));
}

// Frames at or beyond `valid_frames` are padding: they are re-zeroed after
// each conv layer so the result on the real rows is identical to running the
// unpadded input (conv biases would otherwise bleed across the seam).
template <class Real>
Tensor<Real> conv_front_end(RunCtx<Real>& ctx, Tensor<Real> feat,
                            const FrontEndParams<Real>& p,
                            std::size_t valid_frames = std::size_t(-1)) {
  if (valid_frames > feat.rows()) valid_frames = feat.rows();
  Tensor<Real> h = relu(ctx.g, conv_time(ctx.g, feat, p.conv1_k, p.conv1_b));
  h = zero_rows_from(ctx.g, h, conv_out_len(valid_frames));
  h = relu(ctx.g, conv_time(ctx.g, h, p.conv2_k, p.conv2_b));
  h = zero_rows_from(ctx.g, h, front_end_out_len(valid_frames));
  Tensor<Real> pe = positional_embedding<Real>(h.rows(), h.cols());
  return add(ctx.g, h, pe);
}

// ---------------------------------------------------------------------------
// Pre-norm blocks (norm -> sublayer -> dropout -> residual)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> encoder_block(RunCtx<Real>& ctx, Tensor<Real> x,
                           const BlockParams<Real>& p,
                           const BoolGrid* mask = nullptr) {
  Tensor<Real> h = layer_norm(ctx.g, x, p.ln_self.gain, p.ln_self.bias);
  Tensor<Real> a = multi_head(ctx, h, h, p.self_attn, mask);
  Tensor<Real> x1 = add(ctx.g, x, ctx_dropout(ctx, a));
  Tensor<Real> h2 = layer_norm(ctx.g, x1, p.ln_ffn.gain, p.ln_ffn.bias);
  Tensor<Real> f = ffn(ctx, h2, p.ffn);
  return add(ctx.g, x1, ctx_dropout(ctx, f));
}

template <class Real>
Tensor<Real> decoder_block(RunCtx<Real>& ctx, Tensor<Real> x, Tensor<Real> enc,
                           const BlockParams<Real>& p,
                           const BoolGrid* self_mask = nullptr,
                           const BoolGrid* src_mask = nullptr,
                           std::vector<Tensor<Real>>* src_weights = nullptr) {
  if (!p.src_attn || !p.ln_src)
    throw UsageError("decoder_block: block has no source attention");
  Tensor<Real> h = layer_norm(ctx.g, x, p.ln_self.gain, p.ln_self.bias);
  Tensor<Real> a = multi_head(ctx, h, h, p.self_attn, self_mask);
  Tensor<Real> x1 = add(ctx.g, x, ctx_dropout(ctx, a));

  Tensor<Real> h2 = layer_norm(ctx.g, x1, p.ln_src->gain, p.ln_src->bias);
  Tensor<Real> s = multi_head(ctx, h2, enc, *p.src_attn, src_mask, src_weights);
  Tensor<Real> x2 = add(ctx.g, x1, ctx_dropout(ctx, s));

  Tensor<Real> h3 = layer_norm(ctx.g, x2, p.ln_ffn.gain, p.ln_ffn.bias);
  Tensor<Real> f = ffn(ctx, h3, p.ffn);
  return add(ctx.g, x2, ctx_dropout(ctx, f));
}

}  // namespace stnat
