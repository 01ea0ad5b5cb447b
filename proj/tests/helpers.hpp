#pragma once

#include <cmath>
#include <vector>

#include "stnat/common.hpp"
#include "stnat/tensor.hpp"

namespace testutil {

template <class Real>
stnat::Tensor<Real> random_tensor(stnat::Shape shape, stnat::Rng& rng,
                                  double scale = 1.0) {
  stnat::Tensor<Real> t(std::move(shape));
  for (auto& v : t.v()) v = static_cast<Real>(rng.normal() * scale);
  return t;
}

inline bool approx(double a, double b, double tol) {
  return std::abs(a - b) <= tol;
}

}  // namespace testutil
