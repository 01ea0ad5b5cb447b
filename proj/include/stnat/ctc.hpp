#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "stnat/layers.hpp"
#include "stnat/ops.hpp"

namespace stnat {

// Per-frame log distributions over the vocabulary plus blank. Column 0 is
// blank; column 1 + k is vocabulary id k.
template <class Real>
struct PosteriorGrid {
  Tensor<Real> log_probs;  // [T_enc x (V + 1)]

  std::size_t frames() const { return log_probs.rows(); }
  std::size_t vocab() const { return log_probs.cols() - 1; }

  Real blank_logp(std::size_t t) const {
    return log_probs.v()[t * log_probs.cols()];
  }
};

// Frame indices where the non-blank posterior clears the threshold; the
// cardinality is the predicted target length T'.
struct TriggerSet {
  std::vector<std::size_t> positions;  // strictly increasing
  double threshold = 0;

  std::size_t size() const { return positions.size(); }
};

// Linear projection + log_softmax over V + 1 labels per frame.
template <class Real>
PosteriorGrid<Real> ctc_head(RunCtx<Real>& ctx, Tensor<Real> enc,
                             Tensor<Real> w, Tensor<Real> b) {
  Tensor<Real> logits = add_rowvec(ctx.g, matmul(ctx.g, enc, w), b);
  return PosteriorGrid<Real>{log_softmax(ctx.g, logits, -1)};
}

// Frames whose non-blank probability 1 - p_b meets the threshold (>= beta,
// equality triggers).
template <class Real>
TriggerSet trigger(const PosteriorGrid<Real>& grid, double beta) {
  if (!(beta > 0.0 && beta < 1.0))
    throw UsageError("trigger: threshold must lie in (0, 1)");
  TriggerSet out;
  out.threshold = beta;
  for (std::size_t t = 0; t < grid.frames(); ++t) {
    const double p_blank = std::exp(static_cast<double>(grid.blank_logp(t)));
    if (1.0 - p_blank >= beta) out.positions.push_back(t);
  }
  return out;
}

// Encoder rows at the trigger positions, order preserved; gradients scatter
// back to the source rows.
template <class Real>
Tensor<Real> gather_triggered(Graph<Real>& g, Tensor<Real> enc,
                              const TriggerSet& trig) {
  return gather_rows(g, enc, trig.positions);
}

// Diagnostic greedy CTC decode: per-frame argmax, collapse repeats, drop
// blanks. Ties break toward the lowest column.
template <class Real>
TokenSequence ctc_greedy_path(const PosteriorGrid<Real>& grid) {
  const std::size_t T = grid.frames(), C = grid.log_probs.cols();
  TokenSequence out;
  std::size_t prev = 0;
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (grid.log_probs.v()[t * C + c] > grid.log_probs.v()[t * C + best])
        best = c;
    if (best != 0 && best != prev)
      out.push_back(static_cast<TokenId>(best - 1));
    prev = best;
  }
  return out;
}

namespace detail {

inline double lse2(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double lse3(double a, double b, double c) { return lse2(lse2(a, b), c); }

}  // namespace detail

// Exact CTC negative log-likelihood via the forward algorithm over the
// blank-extended label sequence, entirely in log space. Differentiable
// through the grid: the adjoint is the usual alpha-beta occupancy
// d(-logP)/d(logp[t][k]) = -exp(lse_{s in lab(k)}(alpha + beta - logp) - logP).
// The DP runs in double regardless of Real.
template <class Real>
Tensor<Real> ctc_loss(Graph<Real>& g, const PosteriorGrid<Real>& grid,
                      const TokenSequence& target) {
  constexpr double NEG_INF = -std::numeric_limits<double>::infinity();
  const std::size_t T = grid.frames(), C = grid.log_probs.cols();
  const std::size_t L = target.size();
  if (L == 0) throw UsageError("ctc_loss: empty target");
  std::size_t repeats = 0;
  for (std::size_t i = 0; i < L; ++i) {
    if (target[i] < 0 || static_cast<std::size_t>(target[i]) + 1 >= C)
      throw Error("ctc_loss: label " + std::to_string(target[i]) +
                  " outside vocabulary of " + std::to_string(C - 1));
    if (i > 0 && target[i] == target[i - 1]) ++repeats;
  }
  if (T < L + repeats)
    throw CtcInfeasibleError(
        "ctc_loss: target of length " + std::to_string(L) + " with " +
        std::to_string(repeats) + " adjacent repeats needs at least " +
        std::to_string(L + repeats) + " frames, got " + std::to_string(T));

  const std::size_t S = 2 * L + 1;
  const auto col = [&](std::size_t s) -> std::size_t {
    return (s % 2 == 1) ? static_cast<std::size_t>(target[s / 2]) + 1 : 0;
  };
  const auto lp = [&](std::size_t t, std::size_t s) -> double {
    return static_cast<double>(grid.log_probs.v()[t * C + col(s)]);
  };

  std::vector<double> alpha(T * S, NEG_INF);
  alpha[0 * S + 0] = lp(0, 0);
  if (S > 1) alpha[0 * S + 1] = lp(0, 1);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double stay = alpha[(t - 1) * S + s];
      double prev = s >= 1 ? alpha[(t - 1) * S + s - 1] : NEG_INF;
      double skip = NEG_INF;
      if (s >= 2 && col(s) != 0 && col(s) != col(s - 2))
        skip = alpha[(t - 1) * S + s - 2];
      const double inc = detail::lse3(stay, prev, skip);
      if (inc != NEG_INF) alpha[t * S + s] = lp(t, s) + inc;
    }

  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = detail::lse2(log_p, alpha[(T - 1) * S + S - 2]);
  if (log_p == NEG_INF)
    throw CtcInfeasibleError("ctc_loss: no feasible alignment (P = 0)");

  Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(-log_p),
                                          grid.log_probs.requires_grad());

  if (g.recording && out.requires_grad()) {
    // Backward occupancy (beta includes the emission at its own frame).
    std::vector<double> beta(T * S, NEG_INF);
    beta[(T - 1) * S + S - 1] = lp(T - 1, S - 1);
    if (S > 1) beta[(T - 1) * S + S - 2] = lp(T - 1, S - 2);
    for (std::size_t ti = T - 1; ti-- > 0;)
      for (std::size_t s = 0; s < S; ++s) {
        double stay = beta[(ti + 1) * S + s];
        double next = s + 1 < S ? beta[(ti + 1) * S + s + 1] : NEG_INF;
        double skip = NEG_INF;
        if (s + 2 < S && col(s + 2) != 0 && col(s + 2) != col(s))
          skip = beta[(ti + 1) * S + s + 2];
        const double inc = detail::lse3(stay, next, skip);
        if (inc != NEG_INF) beta[ti * S + s] = lp(ti, s) + inc;
      }

    std::vector<Real> ggrid(T * C, Real(0));
    std::vector<double> acc(C, NEG_INF);
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(acc.begin(), acc.end(), NEG_INF);
      for (std::size_t s = 0; s < S; ++s) {
        const double a = alpha[t * S + s], b = beta[t * S + s];
        if (a == NEG_INF || b == NEG_INF) continue;
        // alpha and beta both include the frame-t emission; divide once.
        acc[col(s)] = detail::lse2(acc[col(s)], a + b - lp(t, s));
      }
      for (std::size_t k = 0; k < C; ++k)
        if (acc[k] != NEG_INF)
          ggrid[t * C + k] = static_cast<Real>(-std::exp(acc[k] - log_p));
    }
    Tensor<Real> grid_t = grid.log_probs;
    g.record([grid_t, out, ggrid]() mutable {
      if (!out.has_grad()) return;
      const Real d = out.grad()[0];
      auto& dg = grid_t.grad();
      for (std::size_t i = 0; i < ggrid.size(); ++i) dg[i] += d * ggrid[i];
    });
  }
  return out;
}

}  // namespace stnat
