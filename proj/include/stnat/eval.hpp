#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stnat/ctc.hpp"
#include "stnat/data.hpp"
#include "stnat/infer.hpp"
#include "stnat/network.hpp"

namespace stnat {

// ---------------------------------------------------------------------------
// Character error rate: minimal unit-cost edit distance with a deterministic
// S/D/I decomposition (diagonal preferred, then deletion, then insertion).
// ---------------------------------------------------------------------------

struct CerCounts {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;   // reference characters missing from hyp
  std::size_t insertions = 0;  // extra characters in hyp
  double rate = 0;             // distance / |ref|
};

inline CerCounts cer(const TokenSequence& hyp, const TokenSequence& ref) {
  if (ref.empty()) throw ContractError("cer: empty reference");
  const std::size_t m = hyp.size(), n = ref.size();
  std::vector<std::size_t> d((m + 1) * (n + 1));
  const auto at = [&](std::size_t i, std::size_t j) -> std::size_t& {
    return d[i * (n + 1) + j];
  };
  for (std::size_t i = 0; i <= m; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= n; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= m; ++i)
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t sub =
          at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i, j - 1) + 1, at(i - 1, j) + 1});
    }
  CerCounts out;
  out.distance = at(m, n);
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        at(i, j) == at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0 : 1)) {
      if (hyp[i - 1] != ref[j - 1]) ++out.substitutions;
      --i;
      --j;
    } else if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++out.deletions;
      --j;
    } else {
      ++out.insertions;
      --i;
    }
  }
  out.rate = static_cast<double>(out.distance) / static_cast<double>(n);
  return out;
}

struct CorpusCer {
  std::size_t distance = 0, ref_len = 0;
  std::size_t substitutions = 0, deletions = 0, insertions = 0;
  double rate = 0;
};

inline CorpusCer corpus_cer(
    const std::vector<std::pair<TokenSequence, TokenSequence>>& hyp_ref) {
  CorpusCer out;
  for (const auto& [hyp, ref] : hyp_ref) {
    const CerCounts c = cer(hyp, ref);
    out.distance += c.distance;
    out.substitutions += c.substitutions;
    out.deletions += c.deletions;
    out.insertions += c.insertions;
    out.ref_len += ref.size();
  }
  if (out.ref_len)
    out.rate = static_cast<double>(out.distance) /
               static_cast<double>(out.ref_len);
  return out;
}

// ---------------------------------------------------------------------------
// Length-error histogram over (T - T'); positive bins are under-predictions
// (missing-character risk).
// ---------------------------------------------------------------------------

struct LengthErrorHistogram {
  std::map<long long, std::size_t> bins;  // key: T - T'
  std::size_t total = 0;
  std::size_t exact = 0;        // T' == T
  std::size_t missing = 0;      // T' < T
  double miss_fraction = 0;
};

inline LengthErrorHistogram length_histogram(
    const std::vector<std::pair<std::size_t, std::size_t>>& target_predicted) {
  LengthErrorHistogram h;
  for (const auto& [t, tp] : target_predicted) {
    const long long diff =
        static_cast<long long>(t) - static_cast<long long>(tp);
    ++h.bins[diff];
    ++h.total;
    if (diff == 0) ++h.exact;
    if (diff > 0) ++h.missing;
  }
  if (h.total)
    h.miss_fraction =
        static_cast<double>(h.missing) / static_cast<double>(h.total);
  return h;
}

// ---------------------------------------------------------------------------
// Real-time factor: decode seconds per second of audio, from a sequential
// decode ledger.
// ---------------------------------------------------------------------------

struct RtfReport {
  double total_decode_seconds = 0;
  double total_audio_seconds = 0;
  double rtf = 0;
  std::vector<LedgerRow> rows;
};

inline RtfReport rtf(const DecodeLedger& ledger) {
  RtfReport r;
  r.rows = ledger.rows;
  for (const auto& row : ledger.rows) {
    r.total_decode_seconds += row.decode_seconds;
    r.total_audio_seconds += row.audio_seconds;
  }
  if (r.total_audio_seconds <= 0)
    throw UsageError("rtf: ledger has no audio time");
  r.rtf = r.total_decode_seconds / r.total_audio_seconds;
  return r;
}

// ---------------------------------------------------------------------------
// Spike-vs-boundary analysis (synthetic data has ground-truth character
// boundaries). A trigger at encoder frame t covers feature frames
// [4t, 4t + 4) through the two stride-2 convolutions; it is "inside" a
// character when the intervals overlap, otherwise it falls in silence.
// ---------------------------------------------------------------------------

struct SpikeVerdict {
  std::size_t trigger_frame = 0;  // encoder frame index
  std::size_t feat_begin = 0, feat_end = 0;
  long long token_index = -1;  // -1 : silence
  bool in_long_silence = false;  // fully inside a silence gap > 4 frames
};

struct SpikeBoundaryReport {
  std::vector<SpikeVerdict> spikes;
  std::size_t n_inside = 0;
  std::size_t n_in_long_silence = 0;
  double inside_fraction = 1.0;
};

inline SpikeBoundaryReport spike_boundary_report(
    const TriggerSet& trig, const std::vector<Boundary>& boundaries,
    std::size_t n_feat_frames) {
  SpikeBoundaryReport rep;
  // Silence gaps: complement of the character intervals.
  std::vector<Boundary> gaps;
  std::size_t cursor = 0;
  for (const auto& [s, e] : boundaries) {
    if (s > cursor) gaps.emplace_back(cursor, s);
    cursor = std::max(cursor, e);
  }
  if (cursor < n_feat_frames) gaps.emplace_back(cursor, n_feat_frames);

  for (std::size_t t : trig.positions) {
    SpikeVerdict v;
    v.trigger_frame = t;
    v.feat_begin = 4 * t;
    v.feat_end = std::min<std::size_t>(4 * t + 4, n_feat_frames);
    std::size_t best_overlap = 0;
    for (std::size_t k = 0; k < boundaries.size(); ++k) {
      const auto& [s, e] = boundaries[k];
      const std::size_t lo = std::max(s, v.feat_begin);
      const std::size_t hi = std::min(e, v.feat_end);
      const std::size_t overlap = hi > lo ? hi - lo : 0;
      if (overlap > best_overlap) {
        best_overlap = overlap;
        v.token_index = static_cast<long long>(k);
      }
    }
    if (v.token_index >= 0) {
      ++rep.n_inside;
    } else {
      for (const auto& [s, e] : gaps)
        if (v.feat_begin >= s && v.feat_end <= e && e - s > 4) {
          v.in_long_silence = true;
          ++rep.n_in_long_silence;
          break;
        }
    }
    rep.spikes.push_back(v);
  }
  if (!rep.spikes.empty())
    rep.inside_fraction = static_cast<double>(rep.n_inside) /
                          static_cast<double>(rep.spikes.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Source-attention export: the [T' x T_enc] weight grid of one decoder
// layer/head, rows summing to 1.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> export_attention(const ModelParams<Real>& model,
                              const Tensor<Real>& feat, std::size_t layer,
                              std::size_t head) {
  if (layer >= model.dec_blocks.size())
    throw UsageError("export_attention: layer " + std::to_string(layer) +
                     " out of range (model has " +
                     std::to_string(model.dec_blocks.size()) +
                     " decoder blocks)");
  if (head >= model.cfg.n_heads)
    throw UsageError("export_attention: head " + std::to_string(head) +
                     " out of range");
  Graph<Real> g;
  g.recording = false;
  AttnCapture<Real> capture;
  RunCtx<Real> ctx{g, false, Real(0), nullptr, &capture};
  if (model.cfg.mode == ModelConfig::Mode::SpikeTriggered)
    forward_st_nat(ctx, model, feat);
  else
    forward_masked_nat(ctx, model, feat);
  return capture.source[layer][head];
}

}  // namespace stnat
