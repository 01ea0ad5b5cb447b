#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <future>
#include <string>
#include <vector>

#include "stnat/data.hpp"
#include "stnat/lm.hpp"
#include "stnat/network.hpp"

namespace stnat {

// ---------------------------------------------------------------------------
// Hypotheses combine the NAT score with an optional shallow-fusion LM score:
// combined = nat_logp + lambda * lm_logp. Scores accumulate in double so the
// combination is exact over float model outputs.
// ---------------------------------------------------------------------------

struct Hypothesis {
  TokenSequence tokens;  // never contains PAD or EOS
  double nat_logp = 0;
  double lm_logp = 0;
  bool finalized = false;

  double combined(double lambda) const { return nat_logp + lambda * lm_logp; }
};

namespace detail {

// (score desc, token sequence lex asc) — the deterministic hypothesis order.
inline bool hyp_better(double sa, const TokenSequence& ta, double sb,
                       const TokenSequence& tb) {
  if (sa != sb) return sa > sb;
  return ta < tb;
}

}  // namespace detail

// NAT output rows for either model mode, computed without recording.
template <class Real>
Tensor<Real> nat_output_rows(const ModelParams<Real>& model,
                             const Tensor<Real>& feat) {
  Graph<Real> g;
  g.recording = false;
  RunCtx<Real> ctx{g};
  if (model.cfg.mode == ModelConfig::Mode::SpikeTriggered)
    return forward_st_nat(ctx, model, feat).dec_logp;
  return forward_masked_nat(ctx, model, feat);
}

// Per-position argmax with ties broken toward the lowest token id, truncated
// at the first EOS (EOS excluded). PAD is never emitted.
template <class Real>
TokenSequence greedy_from_rows(const Tensor<Real>& logp, TokenId eos_id,
                               TokenId pad_id) {
  const std::size_t T = logp.rows(), V = logp.cols();
  TokenSequence out;
  for (std::size_t t = 0; t < T; ++t) {
    TokenId best = -1;
    for (std::size_t v = 0; v < V; ++v) {
      if (static_cast<TokenId>(v) == pad_id) continue;
      if (best < 0 ||
          logp.v()[t * V + v] > logp.v()[t * V + static_cast<std::size_t>(best)])
        best = static_cast<TokenId>(v);
    }
    if (best == eos_id) break;
    out.push_back(best);
  }
  return out;
}

// Position-synchronous beam over the T' NAT rows with per-step shallow
// fusion: extending a prefix with token v adds
// nat_logp(pos, v) + lambda * lm_score_step(prefix)[v]. A hypothesis that
// emits EOS is finalized (its LM EOS probability included); reaching the
// last position also ends a hypothesis. The winner is the best combined
// score over finalized and full-length hypotheses together, so a wide
// enough beam returns the exact argmax of the combined score.
template <class Real>
Hypothesis beam_from_rows(const Tensor<Real>& nat_logp,
                          const LmParams<Real>* lm, double lambda,
                          std::size_t beam, TokenId eos_id, TokenId pad_id) {
  if (beam == 0) throw UsageError("beam_from_rows: beam width must be >= 1");
  if (lambda < 0) throw UsageError("beam_from_rows: lambda must be >= 0");
  if (lambda > 0 && lm == nullptr)
    throw UsageError("beam_from_rows: lambda > 0 requires a language model");
  const std::size_t T = nat_logp.rows(), V = nat_logp.cols();
  std::vector<Hypothesis> active{Hypothesis{}};
  std::vector<Hypothesis> finalized;
  const bool use_lm = lm != nullptr && lambda > 0;
  for (std::size_t pos = 0; pos < T && !active.empty(); ++pos) {
    std::vector<Hypothesis> candidates;
    candidates.reserve(active.size() * std::min<std::size_t>(beam, V));
    for (const Hypothesis& hyp : active) {
      std::vector<double> lm_row;
      if (use_lm) {
        const auto scores = lm_score_step(*lm, hyp.tokens);
        lm_row.assign(scores.begin(), scores.end());
      }
      std::vector<std::pair<double, TokenId>> ext;
      ext.reserve(V);
      for (std::size_t v = 0; v < V; ++v) {
        if (static_cast<TokenId>(v) == pad_id) continue;
        const double delta =
            static_cast<double>(nat_logp.v()[pos * V + v]) +
            (use_lm ? lambda * lm_row[v] : 0.0);
        ext.emplace_back(delta, static_cast<TokenId>(v));
      }
      const std::size_t keep = std::min(beam, ext.size());
      std::partial_sort(ext.begin(),
                        ext.begin() + static_cast<std::ptrdiff_t>(keep),
                        ext.end(), [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      ext.resize(keep);
      for (const auto& [delta, token] : ext) {
        Hypothesis next = hyp;
        next.nat_logp +=
            static_cast<double>(nat_logp.v()[pos * V +
                                             static_cast<std::size_t>(token)]);
        if (use_lm) next.lm_logp += lm_row[static_cast<std::size_t>(token)];
        if (token == eos_id)
          next.finalized = true;  // EOS score counted, token not emitted
        else
          next.tokens.push_back(token);
        candidates.push_back(std::move(next));
      }
    }
    active.clear();
    for (auto& c : candidates)
      (c.finalized ? finalized : active).push_back(std::move(c));
    std::sort(active.begin(), active.end(),
              [lambda](const Hypothesis& a, const Hypothesis& b) {
                return detail::hyp_better(a.combined(lambda), a.tokens,
                                          b.combined(lambda), b.tokens);
              });
    if (active.size() > beam) active.resize(beam);
  }
  finalized.insert(finalized.end(), active.begin(), active.end());
  if (finalized.empty()) return Hypothesis{};  // T' == 0
  std::size_t best = 0;
  for (std::size_t i = 1; i < finalized.size(); ++i)
    if (detail::hyp_better(finalized[i].combined(lambda), finalized[i].tokens,
                           finalized[best].combined(lambda),
                           finalized[best].tokens))
      best = i;
  return finalized[best];
}

// ---------------------------------------------------------------------------
// Whole-utterance entry points
// ---------------------------------------------------------------------------

template <class Real>
TokenSequence greedy_decode(const ModelParams<Real>& model,
                            const Tensor<Real>& feat) {
  return greedy_from_rows(nat_output_rows(model, feat),
                          reserved_eos_id(model.cfg.vocab_size),
                          reserved_pad_id(model.cfg.vocab_size));
}

template <class Real>
TokenSequence beam_decode(const ModelParams<Real>& model,
                          const LmParams<Real>* lm, const Tensor<Real>& feat,
                          double lambda, std::size_t beam = 5) {
  return beam_from_rows(nat_output_rows(model, feat), lm, lambda, beam,
                        reserved_eos_id(model.cfg.vocab_size),
                        reserved_pad_id(model.cfg.vocab_size))
      .tokens;
}

// ---------------------------------------------------------------------------
// Batch decoding with a per-utterance timing ledger. Features are already in
// memory, so the timed span covers model computation only. RTF mode is
// contractually sequential; otherwise utterances may decode in parallel
// against the shared read-only model.
// ---------------------------------------------------------------------------

struct DecodeOptions {
  const LmParams<float>* lm = nullptr;
  double lambda = 0;
  std::size_t beam = 1;
  bool use_beam = false;  // route through the beam path even without an LM
  bool rtf = false;       // sequential decoding + ledger contract
  std::size_t threads = 1;
};

struct LedgerRow {
  std::string id;
  double audio_seconds = 0;
  double decode_seconds = 0;
};

struct DecodeLedger {
  std::vector<LedgerRow> rows;
  double wall_seconds = 0;  // span around the decode loop
};

struct HypRow {
  std::string id;
  TokenSequence tokens;
  std::string error;  // empty on success
};

struct DecodeResult {
  std::vector<HypRow> hyps;
  DecodeLedger ledger;
  std::size_t failures = 0;
};

inline DecodeResult batch_decode(const ModelParams<float>& model,
                                 const std::vector<Utterance>& utts,
                                 const DecodeOptions& opt) {
  using clock = std::chrono::steady_clock;
  DecodeResult res;
  res.hyps.resize(utts.size());
  res.ledger.rows.resize(utts.size());
  const auto decode_one = [&](std::size_t i) {
    const Utterance& u = utts[i];
    res.hyps[i].id = u.id;
    res.ledger.rows[i].id = u.id;
    res.ledger.rows[i].audio_seconds = u.audio_seconds();
    const auto t0 = clock::now();
    try {
      if (opt.use_beam || opt.lm != nullptr)
        res.hyps[i].tokens =
            beam_decode(model, opt.lm, u.features, opt.lambda, opt.beam);
      else
        res.hyps[i].tokens = greedy_decode(model, u.features);
    } catch (const std::exception& e) {
      res.hyps[i].error = e.what();
    }
    res.ledger.rows[i].decode_seconds =
        std::chrono::duration<double>(clock::now() - t0).count();
  };
  const auto span0 = clock::now();
  const std::size_t threads = opt.rtf ? 1 : std::max<std::size_t>(opt.threads, 1);
  if (threads <= 1 || utts.size() <= 1) {
    for (std::size_t i = 0; i < utts.size(); ++i) decode_one(i);
  } else {
    std::vector<std::future<void>> work;
    const std::size_t chunk = (utts.size() + threads - 1) / threads;
    for (std::size_t lo = 0; lo < utts.size(); lo += chunk)
      work.push_back(std::async(std::launch::async, [&, lo]() {
        for (std::size_t i = lo; i < std::min(lo + chunk, utts.size()); ++i)
          decode_one(i);
      }));
    for (auto& w : work) w.get();
  }
  res.ledger.wall_seconds =
      std::chrono::duration<double>(clock::now() - span0).count();
  for (const auto& h : res.hyps)
    if (!h.error.empty()) ++res.failures;
  return res;
}

}  // namespace stnat
