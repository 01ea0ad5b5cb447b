#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "stnat/adam.hpp"
#include "stnat/layers.hpp"

namespace stnat {

struct LmConfig {
  std::size_t n_blocks = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t context_limit = 64;  // max tokens conditioned on
  std::size_t vocab_size = 0;      // shared with the ASR model

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw UsageError("lm config: d_model must be divisible by n_heads");
    if (vocab_size < 4) throw UsageError("lm config: vocab_size too small");
    if (n_blocks == 0 || d_ff == 0 || context_limit < 2)
      throw UsageError("lm config: zero-sized component");
  }
};

// Embedding table has vocab_size + 1 rows; the extra last row is the
// begin-of-sequence embedding used for the empty prefix.
template <class Real>
struct LmParams {
  LmConfig cfg;
  Tensor<Real> embed;  // [(V + 1) x d_m]
  std::vector<BlockParams<Real>> blocks;
  Tensor<Real> out_w, out_b;

  static LmParams init(const LmConfig& cfg, Rng& rng) {
    cfg.validate();
    LmParams p;
    p.cfg = cfg;
    p.embed = xavier_init<Real>({cfg.vocab_size + 1, cfg.d_model}, rng);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i)
      p.blocks.push_back(BlockParams<Real>::init(
          cfg.d_model, cfg.n_heads, cfg.d_ff, /*with_source=*/false, rng));
    // zero-initialized head: an untrained LM scores exactly uniformly
    p.out_w = Tensor<Real>(Shape{cfg.d_model, cfg.vocab_size}, true);
    p.out_b = Tensor<Real>(Shape{cfg.vocab_size}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    out.emplace_back("embed", embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blk" + std::to_string(i);
      const auto& b = blocks[i];
      out.emplace_back(p + ".self.wq", b.self_attn.wq);
      out.emplace_back(p + ".self.wk", b.self_attn.wk);
      out.emplace_back(p + ".self.wv", b.self_attn.wv);
      out.emplace_back(p + ".self.wo", b.self_attn.wo);
      out.emplace_back(p + ".ln_self.gain", b.ln_self.gain);
      out.emplace_back(p + ".ln_self.bias", b.ln_self.bias);
      out.emplace_back(p + ".ffn.w1", b.ffn.w1);
      out.emplace_back(p + ".ffn.b1", b.ffn.b1);
      out.emplace_back(p + ".ffn.w2", b.ffn.w2);
      out.emplace_back(p + ".ffn.b2", b.ffn.b2);
      out.emplace_back(p + ".ln_ffn.gain", b.ln_ffn.gain);
      out.emplace_back(p + ".ln_ffn.bias", b.ln_ffn.bias);
    }
    out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    return out;
  }
};

// Keeps the most recent tokens when a prefix exceeds the context limit
// (oldest are dropped, including the BOS slot).
inline TokenSequence lm_clip_context(const TokenSequence& prefix,
                                     std::size_t context_limit) {
  if (prefix.size() + 1 <= context_limit) return prefix;
  return TokenSequence(prefix.end() - static_cast<std::ptrdiff_t>(
                                          context_limit - 1),
                       prefix.end());
}

// Per-position next-token log distributions for [BOS, prefix...]: row i
// predicts the token following the first i context entries.
template <class Real>
Tensor<Real> lm_forward(RunCtx<Real>& ctx, const LmParams<Real>& lm,
                        const TokenSequence& prefix) {
  const TokenSequence clipped = lm_clip_context(prefix, lm.cfg.context_limit);
  const TokenId bos = static_cast<TokenId>(lm.cfg.vocab_size);
  std::vector<std::size_t> rows;
  rows.reserve(clipped.size() + 1);
  rows.push_back(static_cast<std::size_t>(bos));
  for (TokenId id : clipped) {
    if (id < 0 || static_cast<std::size_t>(id) >= lm.cfg.vocab_size)
      throw UsageError("lm: token id " + std::to_string(id) +
                       " outside vocabulary");
    rows.push_back(static_cast<std::size_t>(id));
  }
  Tensor<Real> x = gather_rows(ctx.g, lm.embed, rows);
  x = scale(ctx.g, x,
            static_cast<Real>(std::sqrt(static_cast<double>(lm.cfg.d_model))));
  x = add(ctx.g, x, positional_embedding<Real>(rows.size(), lm.cfg.d_model));
  const BoolGrid causal = BoolGrid::causal(rows.size());
  for (const auto& block : lm.blocks)
    x = encoder_block(ctx, x, block, &causal);
  Tensor<Real> logits = add_rowvec(ctx.g, matmul(ctx.g, x, lm.out_w), lm.out_b);
  return log_softmax(ctx.g, logits, -1);
}

// Next-token log probabilities given a prefix (empty prefix scores from the
// BOS embedding alone).
template <class Real>
std::vector<Real> lm_score_step(const LmParams<Real>& lm,
                                const TokenSequence& prefix) {
  Graph<Real> g;
  g.recording = false;
  RunCtx<Real> ctx{g};
  Tensor<Real> logp = lm_forward(ctx, lm, prefix);
  const std::size_t V = lm.cfg.vocab_size;
  const std::size_t last = logp.rows() - 1;
  std::vector<Real> out(V);
  std::copy_n(logp.v().data() + last * V, V, out.begin());
  return out;
}

struct LmTrainOptions {
  std::size_t warmup_steps = 100;
  double lr_scale = 1.0;
  std::size_t epochs = 50;
  std::size_t batch_size = 4;
};

template <class Real>
struct LmStepRecord {
  std::size_t step;
  double lr;
  double loss;
};

// Next-token cross-entropy over [BOS, y...] -> [y..., EOS]; EOS is an
// ordinary predicted token. Same Adam + warmup schedule as the ASR trainer.
template <class Real, class OnStep = std::nullptr_t>
LmParams<Real> lm_train(const std::vector<TokenSequence>& corpus,
                        const LmConfig& cfg, TokenId eos_id,
                        const LmTrainOptions& opt, std::uint64_t seed,
                        OnStep&& on_step = nullptr) {
  if (corpus.empty()) throw UsageError("lm_train: empty corpus");
  Rng init_rng = Rng::derive(seed, 1);
  LmParams<Real> lm = LmParams<Real>::init(cfg, init_rng);
  AdamOptimizer<Real> opt_state(lm.named_params());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(seed, 1000 + epoch);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    for (std::size_t at = 0; at < order.size(); at += opt.batch_size) {
      const std::size_t n =
          std::min(opt.batch_size, order.size() - at);
      Graph<Real> g;
      RunCtx<Real> ctx{g};
      Tensor<Real> total;
      for (std::size_t i = 0; i < n; ++i) {
        const TokenSequence& seq = corpus[order[at + i]];
        TokenSequence clipped = lm_clip_context(seq, cfg.context_limit);
        TokenSequence targets = clipped;
        targets.push_back(eos_id);
        Tensor<Real> logp = lm_forward(ctx, lm, clipped);
        Tensor<Real> nll = pick_nll_mean(ctx.g, logp, targets);
        total = total.defined() ? add(ctx.g, total, nll) : nll;
      }
      Tensor<Real> loss = scale(ctx.g, total, Real(1) / static_cast<Real>(n));
      if (!loss.all_finite())
        throw Error("lm_train: loss diverged (non-finite)");
      opt_state.zero_grad();
      g.backward(loss);
      ++step;
      const double lr =
          lr_schedule(step, opt.warmup_steps, cfg.d_model, opt.lr_scale);
      opt_state.step(static_cast<Real>(lr));
      if constexpr (!std::is_same_v<std::decay_t<OnStep>, std::nullptr_t>)
        on_step(LmStepRecord<Real>{step, lr, static_cast<double>(loss.v()[0])});
    }
  }
  return lm;
}

// Teacher-forced perplexity: exp of the mean per-token NLL (EOS included).
template <class Real>
double lm_perplexity(const LmParams<Real>& lm,
                     const std::vector<TokenSequence>& corpus, TokenId eos_id) {
  double total_nll = 0;
  std::size_t total_tokens = 0;
  for (const auto& seq : corpus) {
    Graph<Real> g;
    g.recording = false;
    RunCtx<Real> ctx{g};
    TokenSequence clipped = lm_clip_context(seq, lm.cfg.context_limit);
    TokenSequence targets = clipped;
    targets.push_back(eos_id);
    Tensor<Real> logp = lm_forward(ctx, lm, clipped);
    for (std::size_t t = 0; t < targets.size(); ++t)
      total_nll -= static_cast<double>(
          logp.v()[t * lm.cfg.vocab_size +
                   static_cast<std::size_t>(targets[t])]);
    total_tokens += targets.size();
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

}  // namespace stnat
