#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stnat/tensor.hpp"

namespace stnat {

// Per-parameter Adam accumulators. Defaults follow the transformer
// convention (beta1 0.9, beta2 0.98, eps 1e-9).
template <class Real>
struct AdamState {
  std::vector<Real> m, v;
  std::int64_t step = 0;
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.98);
  Real eps = Real(1e-9);
};

// One bias-corrected Adam update on a single parameter tensor. An absent
// gradient buffer counts as an all-zero gradient.
template <class Real>
void adam_step(Tensor<Real>& param, AdamState<Real>& st, Real lr) {
  if (lr <= Real(0)) throw UsageError("adam_step: lr must be positive");
  const std::size_t n = param.size();
  if (st.m.empty()) {
    st.m.assign(n, Real(0));
    st.v.assign(n, Real(0));
  }
  if (st.m.size() != n)
    throw ShapeError("adam_step: state size " + std::to_string(st.m.size()) +
                     " vs parameter size " + std::to_string(n));
  st.step += 1;
  const Real bc1 = Real(1) - std::pow(st.beta1, static_cast<Real>(st.step));
  const Real bc2 = Real(1) - std::pow(st.beta2, static_cast<Real>(st.step));
  const Real* grad = param.has_grad() ? param.grad().data() : nullptr;
  for (std::size_t i = 0; i < n; ++i) {
    const Real gi = grad ? grad[i] : Real(0);
    st.m[i] = st.beta1 * st.m[i] + (Real(1) - st.beta1) * gi;
    st.v[i] = st.beta2 * st.v[i] + (Real(1) - st.beta2) * gi * gi;
    const Real mhat = st.m[i] / bc1;
    const Real vhat = st.v[i] / bc2;
    param.v()[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

// Warmup learning-rate schedule:
//   scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
// Linear ramp to the peak at step == warmup, then inverse-sqrt decay.
inline double lr_schedule(std::size_t step, std::size_t warmup,
                          std::size_t d_model, double scale = 1.0) {
  if (step < 1) throw UsageError("lr_schedule: step counts from 1");
  if (warmup < 1) throw UsageError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  return scale * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(1.0 / std::sqrt(s),
                  s * std::pow(static_cast<double>(warmup), -1.5));
}

// Adam over a fixed, ordered set of named parameters (order matters for
// bit-exact reproducibility).
template <class Real>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<std::pair<std::string, Tensor<Real>>> params)
      : params_(std::move(params)), states_(params_.size()) {}

  void step(Real lr) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      adam_step(params_[i].second, states_[i], lr);
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  const std::vector<std::pair<std::string, Tensor<Real>>>& params() const {
    return params_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<Real>>> params_;
  std::vector<AdamState<Real>> states_;
};

}  // namespace stnat
