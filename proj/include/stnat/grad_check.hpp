#pragma once

#include <cmath>
#include <vector>

#include "stnat/tensor.hpp"

namespace stnat {

// Central-difference gradient verification, double precision only (finite
// differences are unreliable in single precision).
//
// `f` is called as f(graph, inputs) and must return a scalar tensor built
// through `graph` from the current values of `inputs`. Returns the maximum
// over all input elements of |analytic - numeric| / max(1, |numeric|).
template <class F>
double grad_check(F&& f, std::vector<Tensor<double>> inputs,
                  double step = 1e-5) {
  for (auto& in : inputs) in.set_requires_grad(true);

  Graph<double> g;
  Tensor<double> loss = f(g, inputs);
  if (!loss.defined() || loss.size() != 1)
    throw UsageError("grad_check: f must return a scalar tensor");
  for (auto& in : inputs) in.zero_grad();
  g.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.push_back(in.grad());

  const auto eval = [&](std::vector<Tensor<double>>& ins) {
    Graph<double> quiet;
    quiet.recording = false;
    return f(quiet, ins).v()[0];
  };

  double max_err = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& vals = inputs[t].v();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double up = eval(inputs);
      vals[i] = keep - step;
      const double down = eval(inputs);
      vals[i] = keep;
      const double numeric = (up - down) / (2 * step);
      const double err = std::abs(analytic[t][i] - numeric) /
                         std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace stnat
