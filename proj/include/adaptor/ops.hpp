#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "adaptor/tensor.hpp"

// Differentiable primitives over rank-2 tensors. Every op returns a fresh
// node; backward closures capture inputs by shared handle.
namespace adaptor {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// 2-D broadcast: each extent equal or 1 on one side.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_rank2(a, op);
  require_rank2(b, op);
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    auto x = a.shape()[d], y = b.shape()[d];
    if (x != y && x != 1 && y != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " are not broadcast-compatible");
    }
    out[d] = std::max(x, y);
  }
  return out;
}

inline std::size_t bcast_index(const Shape& s, std::size_t r, std::size_t c) {
  return (s[0] == 1 ? 0 : r) * s[1] + (s[1] == 1 ? 0 : c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const auto m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), P = static_cast<Eigen::Index>(p);
  std::vector<double> out(m * p);
  detail::MutMap(out.data(), M, P).noalias() =
      detail::ConstMap(a.data().data(), M, K) * detail::ConstMap(b.data().data(), K, P);
  return detail::make_result({m, p}, std::move(out), {a, b}, [a, b, M, K, P](detail::Node& self) {
    detail::ConstMap g(self.grad.data(), M, P);
    if (a.requires_grad()) {
      detail::MutMap(a.node()->grad_buffer().data(), M, K).noalias() +=
          g * detail::ConstMap(b.data().data(), K, P).transpose();
    }
    if (b.requires_grad()) {
      detail::MutMap(b.node()->grad_buffer().data(), K, P).noalias() +=
          detail::ConstMap(a.data().data(), M, K).transpose() * g;
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result({n, m}, std::move(out), {a}, [a, m, n](detail::Node& self) {
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [a](detail::Node& self) {
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto shape = detail::broadcast_shape(a, b, "add");
  const auto R = shape[0], C = shape[1];
  std::vector<double> out(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      out[r * C + c] = a.data()[detail::bcast_index(a.shape(), r, c)] +
                       b.data()[detail::bcast_index(b.shape(), r, c)];
  return detail::make_result(shape, std::move(out), {a, b}, [a, b, R, C](detail::Node& self) {
    for (const auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& g = t->node()->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[detail::bcast_index(t->shape(), r, c)] += self.grad[r * C + c];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto shape = detail::broadcast_shape(a, b, "mul");
  const auto R = shape[0], C = shape[1];
  std::vector<double> out(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      out[r * C + c] = a.data()[detail::bcast_index(a.shape(), r, c)] *
                       b.data()[detail::bcast_index(b.shape(), r, c)];
  return detail::make_result(shape, std::move(out), {a, b}, [a, b, R, C](detail::Node& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
          g[detail::bcast_index(a.shape(), r, c)] +=
              self.grad[r * C + c] * b.data()[detail::bcast_index(b.shape(), r, c)];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
          g[detail::bcast_index(b.shape(), r, c)] +=
              self.grad[r * C + c] * a.data()[detail::bcast_index(a.shape(), r, c)];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result(a.shape(), std::move(out), {a}, [a, factor](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

// a / s for a 1x1 tensor s, computed as a true division.
inline Tensor div_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("div_scalar: divisor must have one element, got " + shape_str(s.shape()));
  const double d = s.item();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v /= d;
  return detail::make_result(a.shape(), std::move(out), {a, s}, [a, s, d](detail::Node& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / d;
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.data.size(); ++i) acc += self.grad[i] * self.data[i];
      s.node()->grad_buffer()[0] -= acc / d;
    }
  });
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result(a.shape(), std::move(out), {a}, [a, df](Node& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(a.data()[i], self.data[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// tanh approximation
inline Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const auto x = a.data();
  std::vector<double> out(x.size());
  auto th = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*th)[i] = std::tanh(k * (x[i] + c * x[i] * x[i] * x[i]));
    out[i] = 0.5 * x[i] * (1.0 + (*th)[i]);
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [a, th](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    const auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = (*th)[i];
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * k * (1.0 + 3.0 * c * x[i] * x[i]));
    }
  });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log: input must be strictly positive, got " + std::to_string(v));
  }
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor l2_normalize_rows(const Tensor& a) {
  detail::require_rank2(a, "l2_normalize_rows");
  const auto R = a.rows(), C = a.cols();
  std::vector<double> out(R * C);
  std::vector<double> norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < C; ++c) ss += a.data()[r * C + c] * a.data()[r * C + c];
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > 0.0) || !std::isfinite(norms[r])) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero or non-finite norm");
    }
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.data()[r * C + c] / norms[r];
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [a, R, C, norms](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      const double* y = self.data.data() + r * C;
      const double* dy = self.grad.data() + r * C;
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += y[c] * dy[c];
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += (dy[c] - y[c] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizations

namespace detail {

// Strided view of the lanes a softmax runs along.
struct Lanes {
  std::size_t count, length, lane_stride, elem_stride;
};

inline Lanes lanes_for(const Tensor& x, int axis, const char* op) {
  require_rank2(x, op);
  const auto R = x.rows(), C = x.cols();
  if (axis == 1) return {R, C, C, 1};
  if (axis == 0) return {C, R, 1, C};
  throw DimensionError(std::string(op) + ": axis must be 0 or 1");
}

}  // namespace detail

/// Softmax along `axis` (1 = each row sums to one), max-subtracted.
inline Tensor softmax(const Tensor& x, int axis = 1) {
  const auto L = detail::lanes_for(x, axis, "softmax");
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  std::vector<double> out(x.numel());
  const double* X = x.data().data();
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t base = l * L.lane_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < L.length; ++i) mx = std::max(mx, X[base + i * L.elem_stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < L.length; ++i) {
      const auto idx = base + i * L.elem_stride;
      out[idx] = std::exp(X[idx] - mx);
      sum += out[idx];
    }
    for (std::size_t i = 0; i < L.length; ++i) out[base + i * L.elem_stride] /= sum;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [x, L](detail::Node& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t l = 0; l < L.count; ++l) {
      const std::size_t base = l * L.lane_stride;
      double dot = 0.0;
      for (std::size_t i = 0; i < L.length; ++i) {
        const auto idx = base + i * L.elem_stride;
        dot += self.grad[idx] * self.data[idx];
      }
      for (std::size_t i = 0; i < L.length; ++i) {
        const auto idx = base + i * L.elem_stride;
        g[idx] += self.data[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

inline Tensor log_softmax(const Tensor& x, int axis = 1) {
  const auto L = detail::lanes_for(x, axis, "log_softmax");
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError("log_softmax: NaN input");
  }
  std::vector<double> out(x.numel());
  const double* X = x.data().data();
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t base = l * L.lane_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < L.length; ++i) mx = std::max(mx, X[base + i * L.elem_stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < L.length; ++i) sum += std::exp(X[base + i * L.elem_stride] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < L.length; ++i) {
      const auto idx = base + i * L.elem_stride;
      out[idx] = X[idx] - lse;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [x, L](detail::Node& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t l = 0; l < L.count; ++l) {
      const std::size_t base = l * L.lane_stride;
      double total = 0.0;
      for (std::size_t i = 0; i < L.length; ++i) total += self.grad[base + i * L.elem_stride];
      for (std::size_t i = 0; i < L.length; ++i) {
        const auto idx = base + i * L.elem_stride;
        g[idx] += self.grad[idx] - std::exp(self.data[idx]) * total;
      }
    }
  });
}

/// Per-row layer normalization with biased variance, then gain/bias (1 x d).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  const auto R = x.rows(), D = x.cols();
  if (D == 0) throw DimensionError("layer_norm: zero-length token");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  if (gain.numel() != D || bias.numel() != D) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(D) + " elements, got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  std::vector<double> xhat(R * D), inv(R), out(R * D);
  const double* X = x.data().data();
  const double* G = gain.data().data();
  const double* B = bias.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < D; ++c) mean += X[r * D + c];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      const double d = X[r * D + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(D);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < D; ++c) {
      xhat[r * D + c] = (X[r * D + c] - mean) * inv[r];
      out[r * D + c] = xhat[r * D + c] * G[c] + B[c];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, R, D, xhat = std::move(xhat), inv = std::move(inv)](detail::Node& self) {
        const double* dY = self.grad.data();
        if (gain.requires_grad()) {
          auto& gg = gain.node()->grad_buffer();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < D; ++c) gg[c] += dY[r * D + c] * xhat[r * D + c];
        }
        if (bias.requires_grad()) {
          auto& gb = bias.node()->grad_buffer();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < D; ++c) gb[c] += dY[r * D + c];
        }
        if (x.requires_grad()) {
          auto& gx = x.node()->grad_buffer();
          const double* G = gain.data().data();
          std::vector<double> dxhat(D);
          for (std::size_t r = 0; r < R; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < D; ++c) {
              dxhat[c] = dY[r * D + c] * G[c];
              m1 += dxhat[c];
              m2 += dxhat[c] * xhat[r * D + c];
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            for (std::size_t c = 0; c < D; ++c) gx[r * D + c] += inv[r] * (dxhat[c] - m1 - xhat[r * D + c] * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1, 1}, {s}, {a}, [a](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return detail::make_result({1, 1}, {s / n}, {a}, [a, n](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

// Main diagonal of a square matrix as a 1 x n row.
inline Tensor diag(const Tensor& a) {
  detail::require_rank2(a, "diag");
  const auto n = a.rows();
  if (a.cols() != n) throw DimensionError("diag: matrix must be square, got " + shape_str(a.shape()));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i * n + i];
  return detail::make_result({1, n}, std::move(out), {a}, [a, n](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
  });
}

// out[r] = <a[r,:], b[r,:]>, shape rows x 1.
inline Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "rowwise_dot");
  detail::require_rank2(b, "rowwise_dot");
  if (a.shape() != b.shape()) {
    throw DimensionError("rowwise_dot: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto R = a.rows(), C = a.cols();
  std::vector<double> out(R, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r] += a.data()[r * C + c] * b.data()[r * C + c];
  return detail::make_result({R, 1}, std::move(out), {a, b}, [a, b, R, C](detail::Node& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r] * b.data()[r * C + c];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += self.grad[r] * a.data()[r * C + c];
    }
  });
}

/// Selects rows by index (repeats allowed); backward scatter-adds.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_rank2(a, "gather_rows");
  const auto R = a.rows(), C = a.cols();
  std::vector<double> out(index.size() * C);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= R) throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of range");
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(index[i] * C), C, out.begin() + static_cast<std::ptrdiff_t>(i * C));
  }
  const auto n = index.size();
  return detail::make_result({n, C}, std::move(out), {a}, [a, C, index = std::move(index)](detail::Node& self) {
    auto& g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < C; ++c) g[index[i] * C + c] += self.grad[i * C + c];
  });
}

/// Mean over consecutive groups of `group` rows: (groups*group) x d -> groups x d.
inline Tensor segment_mean(const Tensor& a, std::size_t group) {
  detail::require_rank2(a, "segment_mean");
  if (group == 0 || a.rows() % group != 0) {
    throw DimensionError("segment_mean: " + std::to_string(a.rows()) + " rows not divisible into groups of " +
                         std::to_string(group));
  }
  const auto G = a.rows() / group, C = a.cols();
  if (group == 1) return a;
  std::vector<double> out(G * C, 0.0);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t t = 0; t < group; ++t)
      for (std::size_t c = 0; c < C; ++c) out[g * C + c] += a.data()[(g * group + t) * C + c];
  for (auto& v : out) v /= static_cast<double>(group);
  return detail::make_result({G, C}, std::move(out), {a}, [a, G, C, group](detail::Node& self) {
    auto& ga = a.node()->grad_buffer();
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t t = 0; t < group; ++t)
        for (std::size_t c = 0; c < C; ++c) ga[(g * group + t) * C + c] += self.grad[g * C + c] * inv;
  });
}

// x W + b with W (in x out) and b (1 x out).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace adaptor
