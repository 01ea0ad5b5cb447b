#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "stnat/tensor.hpp"

namespace stnat {

namespace detail {

template <class... Ts>
bool any_requires_grad(const Ts&... ts) {
  return (... || ts.requires_grad());
}

// Decomposes a shape around `axis` as outer x n x inner; element (o, j, i)
// lives at ((o * n) + j) * inner + i.
struct AxisView {
  std::size_t outer, n, inner;
};

inline AxisView axis_view(const Shape& s, int axis) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw UsageError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  AxisView v{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) v.inner *= s[static_cast<std::size_t>(i)];
  return v;
}

inline void require_rank2(const Shape& s, const char* who) {
  if (s.size() != 2)
    throw ShapeError(std::string(who) + ": expected rank-2 tensor, got " +
                     shape_str(s));
}

}  // namespace detail

// Boolean attention mask; allow(q, k) == true means query q may attend key k.
struct BoolGrid {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> allow;

  BoolGrid() = default;
  BoolGrid(std::size_t r, std::size_t c, bool init)
      : rows(r), cols(c), allow(r * c, init ? 1 : 0) {}

  bool at(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool b) { allow[r * cols + c] = b ? 1 : 0; }

  static BoolGrid causal(std::size_t n) {
    BoolGrid g(n, n, false);
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k <= q; ++k) g.set(q, k, true);
    return g;
  }

  // Every query may attend keys [0, valid_keys); the padded tail is blocked.
  static BoolGrid key_padding(std::size_t n_q, std::size_t n_k,
                              std::size_t valid_keys) {
    BoolGrid g(n_q, n_k, false);
    for (std::size_t q = 0; q < n_q; ++q)
      for (std::size_t k = 0; k < std::min(valid_keys, n_k); ++k)
        g.set(q, k, true);
    return g;
  }
};

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(Graph<Real>& g, Tensor<Real> a, Tensor<Real> b) {
  detail::require_rank2(a.shape(), "matmul lhs");
  detail::require_rank2(b.shape(), "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<Real> out(Shape{m, n}, detail::any_requires_grad(a, b));
  const Real* av = a.v().data();
  const Real* bv = b.v().data();
  Real* ov = out.v().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      if (aip == Real(0)) continue;
      const Real* brow = bv + p * n;
      Real* orow = ov + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  if (g.recording && out.requires_grad())
    g.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Real* dy = out.grad().data();
      if (a.requires_grad()) {
        Real* da = a.grad().data();
        const Real* bv = b.v().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real acc = 0;
            const Real* dyr = dy + i * n;
            const Real* br = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += dyr[j] * br[j];
            da[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        Real* db = b.grad().data();
        const Real* av = a.v().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const Real aip = av[i * k + p];
            if (aip == Real(0)) continue;
            const Real* dyr = dy + i * n;
            Real* dbr = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbr[j] += aip * dyr[j];
          }
      }
    });
  return out;
}

// a[m x k] . b^T where b is [n x k]; avoids materializing transposes in
// attention score computation.
template <class Real>
Tensor<Real> matmul_nt(Graph<Real>& g, Tensor<Real> a, Tensor<Real> b) {
  detail::require_rank2(a.shape(), "matmul_nt lhs");
  detail::require_rank2(b.shape(), "matmul_nt rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  Tensor<Real> out(Shape{m, n}, detail::any_requires_grad(a, b));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real acc = 0;
      const Real* ar = a.v().data() + i * k;
      const Real* br = b.v().data() + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out.v()[i * n + j] = acc;
    }
  if (g.recording && out.requires_grad())
    g.record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const Real* dy = out.grad().data();
      if (a.requires_grad()) {
        Real* da = a.grad().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const Real d = dy[i * n + j];
            if (d == Real(0)) continue;
            const Real* br = b.v().data() + j * k;
            Real* dar = da + i * k;
            for (std::size_t p = 0; p < k; ++p) dar[p] += d * br[p];
          }
      }
      if (b.requires_grad()) {
        Real* db = b.grad().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const Real d = dy[i * n + j];
            if (d == Real(0)) continue;
            const Real* ar = a.v().data() + i * k;
            Real* dbr = db + j * k;
            for (std::size_t p = 0; p < k; ++p) dbr[p] += d * ar[p];
          }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(Graph<Real>& g, Tensor<Real> a, Tensor<Real> b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<Real> out(a.shape(), detail::any_requires_grad(a, b));
  for (std::size_t i = 0; i < a.size(); ++i) out.v()[i] = a.v()[i] + b.v()[i];
  if (g.recording && out.requires_grad())
    g.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      if (a.requires_grad()) {
        auto& da = a.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto& db = b.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  return out;
}

// x[m x n] + row-broadcast bias[n].
template <class Real>
Tensor<Real> add_rowvec(Graph<Real>& g, Tensor<Real> x, Tensor<Real> bias) {
  const std::size_t n = x.cols();
  if (bias.size() != n)
    throw ShapeError("add_rowvec: bias " + shape_str(bias.shape()) +
                     " vs cols " + std::to_string(n));
  const std::size_t m = x.size() / std::max<std::size_t>(n, 1);
  Tensor<Real> out(x.shape(), detail::any_requires_grad(x, bias));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.v()[i * n + j] = x.v()[i * n + j] + bias.v()[j];
  if (g.recording && out.requires_grad())
    g.record([x, bias, out, m, n]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      if (x.requires_grad()) {
        auto& dx = x.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (bias.requires_grad()) {
        auto& db = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
      }
    });
  return out;
}

template <class Real>
Tensor<Real> mul(Graph<Real>& g, Tensor<Real> a, Tensor<Real> b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<Real> out(a.shape(), detail::any_requires_grad(a, b));
  for (std::size_t i = 0; i < a.size(); ++i) out.v()[i] = a.v()[i] * b.v()[i];
  if (g.recording && out.requires_grad())
    g.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      if (a.requires_grad()) {
        auto& da = a.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b.v()[i];
      }
      if (b.requires_grad()) {
        auto& db = b.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a.v()[i];
      }
    });
  return out;
}

template <class Real>
Tensor<Real> scale(Graph<Real>& g, Tensor<Real> x, Real s) {
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) out.v()[i] = x.v()[i] * s;
  if (g.recording && out.requires_grad())
    g.record([x, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s;
    });
  return out;
}

template <class Real>
Tensor<Real> relu(Graph<Real>& g, Tensor<Real> x) {
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.v()[i] = x.v()[i] > Real(0) ? x.v()[i] : Real(0);
  if (g.recording && out.requires_grad())
    g.record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (x.v()[i] > Real(0)) dx[i] += dy[i];
    });
  return out;
}

template <class Real>
Tensor<Real> sigmoid(Graph<Real>& g, Tensor<Real> x) {
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.v()[i] = Real(1) / (Real(1) + std::exp(-x.v()[i]));
  if (g.recording && out.requires_grad())
    g.record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const Real y = out.v()[i];
        dx[i] += dy[i] * y * (Real(1) - y);
      }
    });
  return out;
}

// Gated linear unit over the last axis: [..., 2h] -> [..., h], first half
// gated by the sigmoid of the second half.
template <class Real>
Tensor<Real> glu(Graph<Real>& g, Tensor<Real> x) {
  const std::size_t two_h = x.cols();
  if (two_h == 0 || two_h % 2 != 0)
    throw ShapeError("glu: last extent must be even, got " +
                     std::to_string(two_h));
  const std::size_t h = two_h / 2;
  const std::size_t rows = x.size() / two_h;
  Shape out_shape = x.shape();
  out_shape.back() = h;
  Tensor<Real> out(out_shape, x.requires_grad());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < h; ++j) {
      const Real a = x.v()[r * two_h + j];
      const Real b = x.v()[r * two_h + h + j];
      out.v()[r * h + j] = a / (Real(1) + std::exp(-b));
    }
  if (g.recording && out.requires_grad())
    g.record([x, out, rows, h, two_h]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) {
          const Real a = x.v()[r * two_h + j];
          const Real b = x.v()[r * two_h + h + j];
          const Real sb = Real(1) / (Real(1) + std::exp(-b));
          const Real d = dy[r * h + j];
          dx[r * two_h + j] += d * sb;
          dx[r * two_h + h + j] += d * a * sb * (Real(1) - sb);
        }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> softmax(Graph<Real>& g, Tensor<Real> x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const auto idx = [&](std::size_t j) { return (o * v.n + j) * v.inner + i; };
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, x.v()[idx(j)]);
      Real z = 0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const Real e = std::exp(x.v()[idx(j)] - mx);
        out.v()[idx(j)] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) out.v()[idx(j)] /= z;
    }
  if (g.recording && out.requires_grad())
    g.record([x, out, v]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          const auto idx = [&](std::size_t j) {
            return (o * v.n + j) * v.inner + i;
          };
          Real dot = 0;
          for (std::size_t j = 0; j < v.n; ++j)
            dot += dy[idx(j)] * out.v()[idx(j)];
          for (std::size_t j = 0; j < v.n; ++j)
            dx[idx(j)] += out.v()[idx(j)] * (dy[idx(j)] - dot);
        }
    });
  return out;
}

template <class Real>
Tensor<Real> log_softmax(Graph<Real>& g, Tensor<Real> x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const auto idx = [&](std::size_t j) { return (o * v.n + j) * v.inner + i; };
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, x.v()[idx(j)]);
      Real z = 0;
      for (std::size_t j = 0; j < v.n; ++j) z += std::exp(x.v()[idx(j)] - mx);
      const Real lz = mx + std::log(z);
      for (std::size_t j = 0; j < v.n; ++j) out.v()[idx(j)] = x.v()[idx(j)] - lz;
    }
  if (g.recording && out.requires_grad())
    g.record([x, out, v]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          const auto idx = [&](std::size_t j) {
            return (o * v.n + j) * v.inner + i;
          };
          Real sum = 0;
          for (std::size_t j = 0; j < v.n; ++j) sum += dy[idx(j)];
          for (std::size_t j = 0; j < v.n; ++j)
            dx[idx(j)] += dy[idx(j)] - std::exp(out.v()[idx(j)]) * sum;
        }
    });
  return out;
}

// Row softmax over scores[q x k] where blocked entries get exactly zero
// weight (they are excluded from the max and the normalizer, not merely
// pushed to -inf). A fully blocked row is an invariant breach.
template <class Real>
Tensor<Real> masked_softmax(Graph<Real>& g, Tensor<Real> scores,
                            const BoolGrid* mask) {
  if (mask == nullptr) return softmax(g, scores, -1);
  detail::require_rank2(scores.shape(), "masked_softmax");
  const std::size_t m = scores.rows(), n = scores.cols();
  if (mask->rows != m || mask->cols != n)
    throw ShapeError("masked_softmax: mask " + std::to_string(mask->rows) +
                     "x" + std::to_string(mask->cols) + " vs scores " +
                     shape_str(scores.shape()));
  Tensor<Real> out(scores.shape(), scores.requires_grad());
  const BoolGrid grid = *mask;  // copy so the tape never dangles
  for (std::size_t q = 0; q < m; ++q) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (grid.at(q, k)) mx = std::max(mx, scores.v()[q * n + k]);
    if (!(mx > -std::numeric_limits<Real>::infinity()))
      throw Error("masked_softmax: attention row " + std::to_string(q) +
                  " has no allowed keys");
    Real z = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (!grid.at(q, k)) continue;
      const Real e = std::exp(scores.v()[q * n + k] - mx);
      out.v()[q * n + k] = e;
      z += e;
    }
    for (std::size_t k = 0; k < n; ++k)
      if (grid.at(q, k)) out.v()[q * n + k] /= z;
  }
  if (g.recording && out.requires_grad())
    g.record([scores, out, grid, m, n]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = scores.grad();
      for (std::size_t q = 0; q < m; ++q) {
        Real dot = 0;
        for (std::size_t k = 0; k < n; ++k)
          if (grid.at(q, k)) dot += dy[q * n + k] * out.v()[q * n + k];
        for (std::size_t k = 0; k < n; ++k)
          if (grid.at(q, k))
            dx[q * n + k] += out.v()[q * n + k] * (dy[q * n + k] - dot);
      }
    });
  return out;
}

// Per-row normalization over the last axis: zero mean, unit variance
// (population, eps inside the sqrt), then an affine gain/bias.
template <class Real>
Tensor<Real> layer_norm(Graph<Real>& g, Tensor<Real> x, Tensor<Real> gain,
                        Tensor<Real> bias, Real eps = Real(1e-5)) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm: gain/bias must have extent " +
                     std::to_string(d));
  const std::size_t rows = x.size() / std::max<std::size_t>(d, 1);
  Tensor<Real> out(x.shape(), detail::any_requires_grad(x, gain, bias));
  std::vector<Real> inv_std(rows), mean(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x.v()[r * d + j];
    mu /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real c = x.v()[r * d + j] - mu;
      var += c * c;
    }
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j)
      out.v()[r * d + j] = (x.v()[r * d + j] - mu) * inv * gain.v()[j] + bias.v()[j];
  }
  if (g.recording && out.requires_grad())
    g.record([x, gain, bias, out, rows, d, mean, inv_std]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real mu = mean[r], inv = inv_std[r];
        if (gain.requires_grad() || bias.requires_grad()) {
          auto& dg = gain.grad();
          auto& db = bias.grad();
          for (std::size_t j = 0; j < d; ++j) {
            const Real xhat = (x.v()[r * d + j] - mu) * inv;
            if (gain.requires_grad()) dg[j] += dy[r * d + j] * xhat;
            if (bias.requires_grad()) db[j] += dy[r * d + j];
          }
        }
        if (x.requires_grad()) {
          auto& dx = x.grad();
          Real sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const Real xhat = (x.v()[r * d + j] - mu) * inv;
            const Real dxhat = dy[r * d + j] * gain.v()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          for (std::size_t j = 0; j < d; ++j) {
            const Real xhat = (x.v()[r * d + j] - mu) * inv;
            const Real dxhat = dy[r * d + j] * gain.v()[j];
            dx[r * d + j] += inv * (dxhat - sum_dxhat / Real(d) -
                                    xhat * sum_dxhat_xhat / Real(d));
          }
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Time-axis convolution (kernel {width, c_in, c_out}, symmetric zero padding
// of width/2 frames each side). Output length floor((T - 1) / stride) + 1,
// which is ceil(T / 2) for the width-3 stride-2 configuration.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> conv_time(Graph<Real>& g, Tensor<Real> x, Tensor<Real> kernel,
                       Tensor<Real> bias, std::size_t stride = 2) {
  detail::require_rank2(x.shape(), "conv_time input");
  if (kernel.rank() != 3)
    throw ShapeError("conv_time: kernel must be {width, c_in, c_out}");
  const std::size_t T = x.rows(), c_in = x.cols();
  const std::size_t width = kernel.shape()[0];
  const std::size_t c_out = kernel.shape()[2];
  if (kernel.shape()[1] != c_in)
    throw ShapeError("conv_time: kernel c_in " +
                     std::to_string(kernel.shape()[1]) + " vs input " +
                     std::to_string(c_in));
  if (bias.size() != c_out)
    throw ShapeError("conv_time: bias extent mismatch");
  if (T == 0) throw ShapeError("conv_time: empty input");
  if (width % 2 == 0) throw UsageError("conv_time: kernel width must be odd");
  const std::size_t pad = width / 2;
  const std::size_t T_out = (T + 2 * pad - width) / stride + 1;
  Tensor<Real> out(Shape{T_out, c_out},
                   detail::any_requires_grad(x, kernel, bias));
  const auto kidx = [c_in, c_out](std::size_t k, std::size_t ci, std::size_t o) {
    return (k * c_in + ci) * c_out + o;
  };
  for (std::size_t t = 0; t < T_out; ++t) {
    Real* orow = out.v().data() + t * c_out;
    for (std::size_t o = 0; o < c_out; ++o) orow[o] = bias.v()[o];
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t ti =
          static_cast<std::ptrdiff_t>(t * stride + k) -
          static_cast<std::ptrdiff_t>(pad);
      if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
      const Real* xrow = x.v().data() + static_cast<std::size_t>(ti) * c_in;
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        const Real xv = xrow[ci];
        if (xv == Real(0)) continue;
        const Real* krow = kernel.v().data() + kidx(k, ci, 0);
        for (std::size_t o = 0; o < c_out; ++o) orow[o] += xv * krow[o];
      }
    }
  }
  if (g.recording && out.requires_grad())
    g.record([x, kernel, bias, out, T, T_out, c_in, c_out, width, pad, stride,
              kidx]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      for (std::size_t t = 0; t < T_out; ++t) {
        const Real* dyr = dy.data() + t * c_out;
        if (bias.requires_grad()) {
          auto& db = bias.grad();
          for (std::size_t o = 0; o < c_out; ++o) db[o] += dyr[o];
        }
        for (std::size_t k = 0; k < width; ++k) {
          const std::ptrdiff_t ti =
              static_cast<std::ptrdiff_t>(t * stride + k) -
              static_cast<std::ptrdiff_t>(pad);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
          const std::size_t tu = static_cast<std::size_t>(ti);
          if (kernel.requires_grad()) {
            auto& dk = kernel.grad();
            for (std::size_t ci = 0; ci < c_in; ++ci) {
              const Real xv = x.v()[tu * c_in + ci];
              if (xv == Real(0)) continue;
              Real* dkr = dk.data() + kidx(k, ci, 0);
              for (std::size_t o = 0; o < c_out; ++o) dkr[o] += xv * dyr[o];
            }
          }
          if (x.requires_grad()) {
            auto& dx = x.grad();
            for (std::size_t ci = 0; ci < c_in; ++ci) {
              const Real* krow = kernel.v().data() + kidx(k, ci, 0);
              Real acc = 0;
              for (std::size_t o = 0; o < c_out; ++o) acc += krow[o] * dyr[o];
              dx[tu * c_in + ci] += acc;
            }
          }
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

// Zeroes every row at or beyond `from` (padding hygiene between strided
// conv layers, so padded frames stay exactly zero like the virtual padding
// of the unpadded computation). No gradient flows into the zeroed rows.
template <class Real>
Tensor<Real> zero_rows_from(Graph<Real>& g, Tensor<Real> x, std::size_t from) {
  detail::require_rank2(x.shape(), "zero_rows_from");
  if (from >= x.rows()) return x;
  const std::size_t d = x.cols();
  Tensor<Real> out(x.shape(), x.requires_grad());
  std::copy_n(x.v().data(), from * d, out.v().data());
  if (g.recording && out.requires_grad())
    g.record([x, out, from, d]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < from * d; ++i) dx[i] += dy[i];
    });
  return out;
}

// Rows of x at the given indices, order preserved. The gradient scatters
// back; duplicate indices accumulate.
template <class Real>
Tensor<Real> gather_rows(Graph<Real>& g, Tensor<Real> x,
                         std::vector<std::size_t> idx) {
  detail::require_rank2(x.shape(), "gather_rows");
  const std::size_t d = x.cols();
  for (std::size_t r : idx)
    if (r >= x.rows())
      throw Error("gather_rows: row " + std::to_string(r) +
                  " out of range for " + shape_str(x.shape()));
  Tensor<Real> out(Shape{idx.size(), d}, x.requires_grad());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.v().data() + idx[i] * d, d, out.v().data() + i * d);
  if (g.recording && out.requires_grad())
    g.record([x, out, idx, d]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          dx[idx[i] * d + j] += dy[i * d + j];
    });
  return out;
}

// n copies of a [1 x d] row; gradient sums over the copies.
template <class Real>
Tensor<Real> repeat_rows(Graph<Real>& g, Tensor<Real> row, std::size_t n) {
  if (row.rows() != 1)
    throw ShapeError("repeat_rows: expected a single row, got " +
                     shape_str(row.shape()));
  const std::size_t d = row.cols();
  Tensor<Real> out(Shape{n, d}, row.requires_grad());
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(row.v().data(), d, out.v().data() + i * d);
  if (g.recording && out.requires_grad())
    g.record([row, out, n, d]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dr = row.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) dr[j] += dy[i * d + j];
    });
  return out;
}

template <class Real>
Tensor<Real> slice_cols(Graph<Real>& g, Tensor<Real> x, std::size_t c0,
                        std::size_t c1) {
  detail::require_rank2(x.shape(), "slice_cols");
  if (c0 >= c1 || c1 > x.cols())
    throw ShapeError("slice_cols: [" + std::to_string(c0) + ", " +
                     std::to_string(c1) + ") out of " +
                     std::to_string(x.cols()));
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  Tensor<Real> out(Shape{m, w}, x.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.v().data() + i * n + c0, w, out.v().data() + i * w);
  if (g.recording && out.requires_grad())
    g.record([x, out, m, n, w, c0]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          dx[i * n + c0 + j] += dy[i * w + j];
    });
  return out;
}

template <class Real>
Tensor<Real> concat_cols(Graph<Real>& g, std::vector<Tensor<Real>> xs) {
  if (xs.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t m = xs.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& x : xs) {
    detail::require_rank2(x.shape(), "concat_cols");
    if (x.rows() != m) throw ShapeError("concat_cols: row count mismatch");
    total += x.cols();
    rg = rg || x.requires_grad();
  }
  Tensor<Real> out(Shape{m, total}, rg);
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.v().data() + i * w, w, out.v().data() + i * total + off);
    off += w;
  }
  if (g.recording && out.requires_grad())
    g.record([xs, out, m, total]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      std::size_t off = 0;
      for (auto& x : xs) {
        const std::size_t w = x.cols();
        if (x.requires_grad()) {
          auto& dx = x.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              dx[i * w + j] += dy[i * total + off + j];
        }
        off += w;
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(Graph<Real>& g, Tensor<Real> x) {
  Real acc = 0;
  for (Real v : x.v()) acc += v;
  Tensor<Real> out = Tensor<Real>::scalar(acc, x.requires_grad());
  if (g.recording && out.requires_grad())
    g.record([x, out]() mutable {
      if (!out.has_grad()) return;
      const Real d = out.grad()[0];
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
    });
  return out;
}

template <class Real>
Tensor<Real> mean_all(Graph<Real>& g, Tensor<Real> x) {
  if (x.size() == 0) throw UsageError("mean_all: empty tensor");
  Real acc = 0;
  for (Real v : x.v()) acc += v;
  const Real n = static_cast<Real>(x.size());
  Tensor<Real> out = Tensor<Real>::scalar(acc / n, x.requires_grad());
  if (g.recording && out.requires_grad())
    g.record([x, out, n]() mutable {
      if (!out.has_grad()) return;
      const Real d = out.grad()[0] / n;
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
    });
  return out;
}

// Mean negative log-likelihood of target ids under per-row log
// distributions: -(1/T) sum_t logp[t, ids[t]].
template <class Real>
Tensor<Real> pick_nll_mean(Graph<Real>& g, Tensor<Real> logp,
                           const TokenSequence& ids) {
  detail::require_rank2(logp.shape(), "pick_nll_mean");
  const std::size_t T = logp.rows(), V = logp.cols();
  if (ids.size() != T)
    throw ShapeError("pick_nll_mean: " + std::to_string(ids.size()) +
                     " targets for " + std::to_string(T) + " rows");
  if (T == 0) throw UsageError("pick_nll_mean: empty target");
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw Error("pick_nll_mean: id " + std::to_string(id) + " out of range");
  Real acc = 0;
  for (std::size_t t = 0; t < T; ++t)
    acc -= logp.v()[t * V + static_cast<std::size_t>(ids[t])];
  Tensor<Real> out =
      Tensor<Real>::scalar(acc / static_cast<Real>(T), logp.requires_grad());
  if (g.recording && out.requires_grad())
    g.record([logp, out, ids, T, V]() mutable {
      if (!out.has_grad()) return;
      const Real d = out.grad()[0] / static_cast<Real>(T);
      auto& dl = logp.grad();
      for (std::size_t t = 0; t < T; ++t)
        dl[t * V + static_cast<std::size_t>(ids[t])] -= d;
    });
  return out;
}

// Inverted-scale dropout; the same mask is replayed in the backward pass.
// p == 0 returns the input unchanged.
template <class Real>
Tensor<Real> dropout(Graph<Real>& g, Tensor<Real> x, Real p, Rng& rng) {
  if (p <= Real(0)) return x;
  if (p >= Real(1)) throw UsageError("dropout: rate must be < 1");
  std::vector<Real> mask(x.size());
  const Real keep_scale = Real(1) / (Real(1) - p);
  for (auto& m : mask)
    m = (rng.uniform() >= static_cast<double>(p)) ? keep_scale : Real(0);
  Tensor<Real> out(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < x.size(); ++i) out.v()[i] = x.v()[i] * mask[i];
  if (g.recording && out.requires_grad())
    g.record([x, out, mask]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      auto& dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  return out;
}

}  // namespace stnat
