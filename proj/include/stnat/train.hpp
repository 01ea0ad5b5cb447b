#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stnat/adam.hpp"
#include "stnat/config.hpp"
#include "stnat/data.hpp"
#include "stnat/network.hpp"

namespace stnat {

// ---------------------------------------------------------------------------
// Conditional joint objective: alpha * L_CTC + (1 - alpha) * L_CE when the
// predicted length covers the target (T' >= T), CTC alone otherwise. The
// branch is decided per utterance.
// ---------------------------------------------------------------------------

struct LossReport {
  double total = 0;
  double ctc = 0;
  double ce = 0;
  bool joint = false;  // joint branch iff T' >= T
  std::size_t predicted_len = 0;
  std::size_t target_len = 0;
};

// Reference characters padded with EOS to the predicted length. When
// T' == T the decoder is trained to emit the reference with no EOS at all;
// EOS supervision only happens for the surplus positions.
inline TokenSequence build_ce_target(const TokenSequence& ref,
                                     std::size_t predicted_len,
                                     TokenId eos_id) {
  if (predicted_len < ref.size())
    throw ContractError("build_ce_target: predicted length " +
                        std::to_string(predicted_len) +
                        " shorter than reference length " +
                        std::to_string(ref.size()));
  TokenSequence out = ref;
  out.resize(predicted_len, eos_id);
  return out;
}

template <class Real>
struct JointLoss {
  Tensor<Real> loss;
  LossReport report;
};

// CTC is normalized by the label length so alpha trades comparable
// magnitudes; CE is the mean per-position NLL. The alpha endpoints skip the
// zero-weighted term entirely, so alpha = 1 returns the CTC term exactly.
template <class Real>
JointLoss<Real> joint_loss(Graph<Real>& g, const PosteriorGrid<Real>& grid,
                           const TriggerSet& trig, Tensor<Real> dec_logp,
                           const TokenSequence& ref, double alpha,
                           TokenId eos_id) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw UsageError("joint_loss: alpha must lie in [0, 1]");
  const std::size_t target_len = ref.size();
  const std::size_t predicted_len = trig.size();
  JointLoss<Real> out;
  out.report.predicted_len = predicted_len;
  out.report.target_len = target_len;
  Tensor<Real> l_ctc = scale(g, ctc_loss(g, grid, ref),
                             Real(1) / static_cast<Real>(target_len));
  out.report.ctc = static_cast<double>(l_ctc.v()[0]);
  if (predicted_len >= target_len) {
    out.report.joint = true;
    Tensor<Real> l_ce = pick_nll_mean(
        g, dec_logp, build_ce_target(ref, predicted_len, eos_id));
    out.report.ce = static_cast<double>(l_ce.v()[0]);
    if (alpha >= 1.0)
      out.loss = l_ctc;
    else if (alpha <= 0.0)
      out.loss = l_ce;
    else
      out.loss = add(g, scale(g, l_ctc, static_cast<Real>(alpha)),
                     scale(g, l_ce, static_cast<Real>(1.0 - alpha)));
  } else {
    // T' < T: CTC alone optimizes the encoder; the decoder receives no
    // gradient.
    out.loss = l_ctc;
  }
  out.report.total = static_cast<double>(out.loss.v()[0]);
  return out;
}

// ---------------------------------------------------------------------------
// Time/frequency masking augmentation: up to n_time_masks random time bands
// and n_freq_masks frequency bands are zeroed, band widths drawn uniformly
// from [0, max_width]. Deterministic under the given generator.
// ---------------------------------------------------------------------------

inline Tensor<float> spec_mask(const Tensor<float>& feat,
                               const TrainConfig& cfg, Rng& rng) {
  Tensor<float> out(feat.shape(), feat.v());
  const std::size_t T = feat.rows(), F = feat.cols();
  for (std::size_t i = 0; i < cfg.n_time_masks; ++i) {
    const std::size_t w = std::min<std::size_t>(
        static_cast<std::size_t>(
            rng.range(0, static_cast<std::int64_t>(cfg.max_time_width))),
        T);
    const std::size_t start = static_cast<std::size_t>(
        rng.range(0, static_cast<std::int64_t>(T - w)));
    for (std::size_t t = start; t < start + w; ++t)
      for (std::size_t f = 0; f < F; ++f) out.at(t, f) = 0.0f;
  }
  for (std::size_t i = 0; i < cfg.n_freq_masks; ++i) {
    const std::size_t w = std::min<std::size_t>(
        static_cast<std::size_t>(
            rng.range(0, static_cast<std::int64_t>(cfg.max_freq_width))),
        F);
    const std::size_t start = static_cast<std::size_t>(
        rng.range(0, static_cast<std::int64_t>(F - w)));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = start; f < start + w; ++f) out.at(t, f) = 0.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop. Deterministic under (dataset, configs, seed): every random
// stream is derived from the seed, and parameters update in a fixed order.
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double ctc = 0;
  double ce = 0;
  double joint_fraction = 0;  // fraction of the batch on the joint branch
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::size_t epoch, const ModelParams<float>&)> on_epoch;
};

inline ModelParams<float> train_loop(const std::vector<Utterance>& dataset,
                                     const ModelConfig& mcfg,
                                     const TrainConfig& tcfg,
                                     std::uint64_t seed,
                                     const TrainHooks& hooks = {}) {
  if (dataset.empty()) throw UsageError("train_loop: empty dataset");
  mcfg.validate();
  tcfg.validate();
  const TokenId pad_id = reserved_pad_id(mcfg.vocab_size);
  const TokenId eos_id = reserved_eos_id(mcfg.vocab_size);

  Rng init_rng = Rng::derive(seed, 1);
  ModelParams<float> model = ModelParams<float>::init(mcfg, init_rng);
  AdamOptimizer<float> optimizer(model.named_params());

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng batch_rng = Rng::derive(seed, 10000 + epoch);
    Rng aug_rng = Rng::derive(seed, 20000 + epoch);
    Rng dropout_rng = Rng::derive(seed, 30000 + epoch);
    const auto batches = make_batches(dataset, tcfg.batch_size, batch_rng,
                                      tcfg.sort_by_length, pad_id);
    for (const auto& batch : batches) {
      Graph<float> g;
      RunCtx<float> ctx{g, /*training=*/true,
                        static_cast<float>(mcfg.dropout), &dropout_rng};
      Tensor<float> sum;
      double ctc_acc = 0, ce_acc = 0;
      std::size_t joint_count = 0;
      const std::size_t t_max = batch.max_frames();
      const std::size_t fdim = batch.feat_dim();
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const Utterance& utt = dataset[batch.order[b]];
        Tensor<float> aug = spec_mask(utt.features, tcfg, aug_rng);
        Tensor<float> padded(Shape{t_max, fdim});
        std::copy_n(aug.v().data(), aug.size(), padded.v().data());
        const TokenSequence target = batch.utterance_target(b);

        Tensor<float> utt_loss;
        LossReport report;
        if (mcfg.mode == ModelConfig::Mode::SpikeTriggered) {
          auto fwd =
              forward_st_nat(ctx, model, padded, batch.frame_len[b]);
          auto jl = joint_loss(g, fwd.grid, fwd.trig, fwd.dec_logp, target,
                               mcfg.alpha, eos_id);
          utt_loss = jl.loss;
          report = jl.report;
        } else {
          Tensor<float> logp =
              forward_masked_nat(ctx, model, padded, batch.frame_len[b]);
          utt_loss = pick_nll_mean(
              g, logp, build_ce_target(target, mcfg.fixed_mask_len, eos_id));
          report.joint = true;
          report.ce = static_cast<double>(utt_loss.v()[0]);
          report.total = report.ce;
          report.predicted_len = mcfg.fixed_mask_len;
          report.target_len = target.size();
        }
        ctc_acc += report.ctc;
        if (report.joint) {
          ce_acc += report.ce;
          ++joint_count;
        }
        sum = sum.defined() ? add(g, sum, utt_loss) : utt_loss;
      }
      Tensor<float> loss =
          scale(g, sum, 1.0f / static_cast<float>(batch.size()));
      if (!loss.all_finite())
        throw Error("train_loop: loss diverged (non-finite) at step " +
                    std::to_string(step + 1));
      optimizer.zero_grad();
      g.backward(loss);
      ++step;
      const double lr =
          lr_schedule(step, tcfg.warmup_steps, mcfg.d_model, tcfg.lr_scale);
      optimizer.step(static_cast<float>(lr));
      if (hooks.on_step) {
        StepRecord rec;
        rec.step = step;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.loss = static_cast<double>(loss.v()[0]);
        rec.ctc = ctc_acc / static_cast<double>(batch.size());
        rec.ce = joint_count ? ce_acc / static_cast<double>(joint_count) : 0.0;
        rec.joint_fraction =
            static_cast<double>(joint_count) / static_cast<double>(batch.size());
        hooks.on_step(rec);
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, model);
  }
  return model;
}

}  // namespace stnat
