#pragma once

#include <cmath>
#include <vector>

#include "stnat/common.hpp"
#include "stnat/tensor.hpp"

namespace testutil {

// CTC collapse: merge consecutive repeats, then drop blanks (column 0).
inline stnat::TokenSequence ctc_collapse(const std::vector<std::size_t>& path) {
  stnat::TokenSequence out;
  std::size_t prev = static_cast<std::size_t>(-1);
  for (std::size_t c : path) {
    if (c != prev && c != 0) out.push_back(static_cast<stnat::TokenId>(c - 1));
    prev = c;
  }
  return out;
}

// Independent CTC oracle: enumerates every frame labelling over the V + 1
// classes, collapses it, and sums the probability of labellings that equal
// the target. Returns the negative log of that sum. Exponential in T; only
// for tiny grids.
inline double brute_force_ctc_nll(const stnat::Tensor<double>& log_probs,
                                  const stnat::TokenSequence& target) {
  const std::size_t T = log_probs.rows(), C = log_probs.cols();
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    if (ctc_collapse(path) == target) {
      double lp = 0;
      for (std::size_t t = 0; t < T; ++t) lp += log_probs.at(t, path[t]);
      total += std::exp(lp);
    }
    std::size_t pos = 0;
    while (pos < T && ++path[pos] == C) path[pos++] = 0;
    if (pos == T) break;
  }
  return -std::log(total);
}

}  // namespace testutil
