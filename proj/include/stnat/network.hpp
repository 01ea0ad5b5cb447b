#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stnat/ctc.hpp"
#include "stnat/layers.hpp"

namespace stnat {

struct ModelConfig {
  enum class Mode { SpikeTriggered, MaskedFixedLength };

  std::size_t n_enc_blocks = 6;
  std::size_t n_dec_blocks = 6;
  std::size_t n_heads = 4;
  std::size_t d_model = 320;
  std::size_t d_ff = 640;
  std::size_t feat_dim = 40;
  std::size_t vocab_size = 0;  // incl. PAD/UNK/EOS
  double alpha = 0.6;          // CTC weight in the joint loss
  double beta = 0.3;           // trigger threshold
  double dropout = 0.1;
  Mode mode = Mode::SpikeTriggered;
  std::size_t fixed_mask_len = 60;  // masked-NAT baseline decoder length

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw UsageError("config: d_model must be divisible by n_heads");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw UsageError("config: alpha must lie in [0, 1]");
    if (!(beta > 0.0 && beta < 1.0))
      throw UsageError("config: beta must lie in (0, 1)");
    if (vocab_size < 4)
      throw UsageError("config: vocab_size must cover PAD/UNK/EOS plus at "
                       "least one character");
    if (n_enc_blocks == 0 || n_dec_blocks == 0 || d_ff == 0 || feat_dim == 0)
      throw UsageError("config: zero-sized component");
    if (mode == Mode::MaskedFixedLength && fixed_mask_len == 0)
      throw UsageError("config: fixed_mask_len must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw UsageError("config: dropout must lie in [0, 1)");
  }
};

inline const char* mode_name(ModelConfig::Mode m) {
  return m == ModelConfig::Mode::SpikeTriggered ? "spike-triggered"
                                                : "masked-fixed-length";
}

inline ModelConfig::Mode mode_from_name(const std::string& s) {
  if (s == "spike-triggered") return ModelConfig::Mode::SpikeTriggered;
  if (s == "masked-fixed-length") return ModelConfig::Mode::MaskedFixedLength;
  throw FormatError("unknown model mode '" + s + "'");
}

template <class Real>
struct ModelParams {
  ModelConfig cfg;
  FrontEndParams<Real> front;
  std::vector<BlockParams<Real>> enc_blocks;
  std::vector<BlockParams<Real>> dec_blocks;
  Tensor<Real> ctc_w, ctc_b;    // spike-triggered mode
  Tensor<Real> out_w, out_b;    // d_m x V projection
  Tensor<Real> mask_embed;      // masked baseline mode, [1 x d_m]

  // Decoder forward-pass counter; the one-pass NAT property is asserted
  // against it.
  std::shared_ptr<std::atomic<std::uint64_t>> decoder_forwards =
      std::make_shared<std::atomic<std::uint64_t>>(0);

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams m;
    m.cfg = cfg;
    m.front = FrontEndParams<Real>::init(cfg.feat_dim, cfg.d_model, rng);
    for (std::size_t i = 0; i < cfg.n_enc_blocks; ++i)
      m.enc_blocks.push_back(BlockParams<Real>::init(
          cfg.d_model, cfg.n_heads, cfg.d_ff, /*with_source=*/false, rng));
    for (std::size_t i = 0; i < cfg.n_dec_blocks; ++i)
      m.dec_blocks.push_back(BlockParams<Real>::init(
          cfg.d_model, cfg.n_heads, cfg.d_ff, /*with_source=*/true, rng));
    if (cfg.mode == ModelConfig::Mode::SpikeTriggered) {
      m.ctc_w = xavier_init<Real>({cfg.d_model, cfg.vocab_size + 1}, rng);
      m.ctc_b = Tensor<Real>(Shape{cfg.vocab_size + 1}, true);
    } else {
      m.mask_embed = xavier_init<Real>({1, cfg.d_model}, rng);
    }
    m.out_w = xavier_init<Real>({cfg.d_model, cfg.vocab_size}, rng);
    m.out_b = Tensor<Real>(Shape{cfg.vocab_size}, true);
    return m;
  }

  // Fixed, documented ordering; checkpoints, averaging, and the optimizer
  // all iterate this list.
  std::vector<std::pair<std::string, Tensor<Real>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    out.emplace_back("front.conv1.kernel", front.conv1_k);
    out.emplace_back("front.conv1.bias", front.conv1_b);
    out.emplace_back("front.conv2.kernel", front.conv2_k);
    out.emplace_back("front.conv2.bias", front.conv2_b);
    const auto add_attn = [&out](const std::string& p,
                                 const AttentionParams<Real>& a) {
      out.emplace_back(p + ".wq", a.wq);
      out.emplace_back(p + ".wk", a.wk);
      out.emplace_back(p + ".wv", a.wv);
      out.emplace_back(p + ".wo", a.wo);
    };
    const auto add_ln = [&out](const std::string& p,
                               const LayerNormParams<Real>& n) {
      out.emplace_back(p + ".gain", n.gain);
      out.emplace_back(p + ".bias", n.bias);
    };
    const auto add_block = [&](const std::string& p,
                               const BlockParams<Real>& b) {
      add_attn(p + ".self", b.self_attn);
      add_ln(p + ".ln_self", b.ln_self);
      if (b.src_attn) {
        add_attn(p + ".src", *b.src_attn);
        add_ln(p + ".ln_src", *b.ln_src);
      }
      out.emplace_back(p + ".ffn.w1", b.ffn.w1);
      out.emplace_back(p + ".ffn.b1", b.ffn.b1);
      out.emplace_back(p + ".ffn.w2", b.ffn.w2);
      out.emplace_back(p + ".ffn.b2", b.ffn.b2);
      add_ln(p + ".ln_ffn", b.ln_ffn);
    };
    for (std::size_t i = 0; i < enc_blocks.size(); ++i)
      add_block("enc" + std::to_string(i), enc_blocks[i]);
    for (std::size_t i = 0; i < dec_blocks.size(); ++i)
      add_block("dec" + std::to_string(i), dec_blocks[i]);
    if (ctc_w.defined()) {
      out.emplace_back("ctc.w", ctc_w);
      out.emplace_back("ctc.b", ctc_b);
    }
    out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    if (mask_embed.defined()) out.emplace_back("mask.embed", mask_embed);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.size();
    return n;
  }

  // Parameters that belong to the decoder side (decoder blocks plus the
  // output projection); used to assert the ctc-only branch leaves them
  // untouched.
  std::vector<std::pair<std::string, Tensor<Real>>> decoder_params() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    for (const auto& [name, t] : named_params())
      if (name.rfind("dec", 0) == 0 || name.rfind("out.", 0) == 0 ||
          name.rfind("mask.", 0) == 0)
        out.emplace_back(name, t);
    return out;
  }
};

namespace detail {

inline std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace detail

// First `n` rows of x.
template <class Real>
Tensor<Real> slice_rows(Graph<Real>& g, Tensor<Real> x, std::size_t n) {
  if (n == x.rows()) return x;
  return gather_rows(g, x, detail::iota_rows(n));
}

// Front end plus encoder stack over possibly padded features. Frames at or
// beyond `valid_frames` are padding: they are masked out as attention keys
// and sliced away from the returned states, so the result holds exactly the
// front_end_out_len(valid_frames) real encoder rows.
template <class Real>
Tensor<Real> encode(RunCtx<Real>& ctx, const ModelParams<Real>& m,
                    Tensor<Real> feat,
                    std::size_t valid_frames = std::size_t(-1)) {
  if (!feat.defined() || feat.rows() == 0)
    throw ShapeError("encode: empty feature matrix");
  if (feat.cols() != m.cfg.feat_dim)
    throw ShapeError("encode: feature dim " + std::to_string(feat.cols()) +
                     " vs configured " + std::to_string(m.cfg.feat_dim));
  if (valid_frames > feat.rows()) valid_frames = feat.rows();
  if (valid_frames == 0) throw ShapeError("encode: no valid frames");
  Tensor<Real> h = conv_front_end(ctx, feat, m.front, valid_frames);
  const std::size_t t_enc = h.rows();
  const std::size_t valid_enc = front_end_out_len(valid_frames);
  BoolGrid mask;
  const BoolGrid* mask_ptr = nullptr;
  if (valid_enc < t_enc) {
    mask = BoolGrid::key_padding(t_enc, t_enc, valid_enc);
    mask_ptr = &mask;
  }
  for (const auto& block : m.enc_blocks)
    h = encoder_block(ctx, h, block, mask_ptr);
  return slice_rows(ctx.g, h, valid_enc);
}

// One parallel decoder pass: unmasked self-attention over the T' inputs
// (full bidirectional context), source attention over the encoder states,
// projection, log_softmax. T' = 0 flows through and yields a [0 x V] grid.
template <class Real>
Tensor<Real> decode_parallel(RunCtx<Real>& ctx, const ModelParams<Real>& m,
                             Tensor<Real> dec_in, Tensor<Real> enc) {
  m.decoder_forwards->fetch_add(1, std::memory_order_relaxed);
  if (ctx.capture) ctx.capture->source.assign(m.dec_blocks.size(), {});
  Tensor<Real> x = dec_in;
  for (std::size_t i = 0; i < m.dec_blocks.size(); ++i)
    x = decoder_block(ctx, x, enc, m.dec_blocks[i], nullptr, nullptr,
                      ctx.capture ? &ctx.capture->source[i] : nullptr);
  Tensor<Real> logits = add_rowvec(ctx.g, matmul(ctx.g, x, m.out_w), m.out_b);
  return log_softmax(ctx.g, logits, -1);
}

template <class Real>
struct StNatOutput {
  PosteriorGrid<Real> grid;
  TriggerSet trig;
  Tensor<Real> dec_logp;  // [T' x V]
  Tensor<Real> enc;       // real encoder rows
};

// Full spike-triggered forward: encode, CTC posteriors, trigger, gather the
// triggered states (with fresh positions 0..T'-1 re-added), one parallel
// decode. Trigger positions are index selection only: gradients flow through
// the gathered values, never through the position choice. `forced_trigger`
// substitutes a fixed trigger set (gradient checks, ablations).
template <class Real>
StNatOutput<Real> forward_st_nat(RunCtx<Real>& ctx, const ModelParams<Real>& m,
                                 Tensor<Real> feat,
                                 std::size_t valid_frames = std::size_t(-1),
                                 const TriggerSet* forced_trigger = nullptr) {
  if (m.cfg.mode != ModelConfig::Mode::SpikeTriggered)
    throw UsageError("forward_st_nat: model is not in spike-triggered mode");
  StNatOutput<Real> out;
  out.enc = encode(ctx, m, feat, valid_frames);
  out.grid = ctc_head(ctx, out.enc, m.ctc_w, m.ctc_b);
  out.trig = forced_trigger ? *forced_trigger
                            : trigger(out.grid, m.cfg.beta);
  Tensor<Real> dec_in = gather_triggered(ctx.g, out.enc, out.trig);
  dec_in = add(ctx.g, dec_in,
               positional_embedding<Real>(out.trig.size(), m.cfg.d_model));
  out.dec_logp = decode_parallel(ctx, m, dec_in, out.enc);
  return out;
}

// Masked-NAT baseline: the decoder input is fixed_mask_len copies of the
// learned mask embedding plus positions; decoder compute is constant in the
// target length by construction.
template <class Real>
Tensor<Real> forward_masked_nat(RunCtx<Real>& ctx, const ModelParams<Real>& m,
                                Tensor<Real> feat,
                                std::size_t valid_frames = std::size_t(-1)) {
  if (m.cfg.mode != ModelConfig::Mode::MaskedFixedLength)
    throw UsageError("forward_masked_nat: model is not in masked mode");
  Tensor<Real> enc = encode(ctx, m, feat, valid_frames);
  const std::size_t L = m.cfg.fixed_mask_len;
  Tensor<Real> dec_in = repeat_rows(ctx.g, m.mask_embed, L);
  dec_in = add(ctx.g, dec_in, positional_embedding<Real>(L, m.cfg.d_model));
  return decode_parallel(ctx, m, dec_in, enc);
}

}  // namespace stnat
