#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "transmil/errors.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// C[m x p] += A[m x k] * B[k x p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x p] += A[m x k] * B[p x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c[i * p + j] += acc;
    }
  }
}

// C[m x p] += A[k x m]^T * B[k x p]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out({m, p});
  detail::gemm_nn(a.ptr(), b.ptr(), out.mutable_data().data(), m, k, p);
  if (detail::tracking({&a, &b})) {
    detail::record(out, [a, b, out, m, k, p]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(g, b.ptr(), a.mutable_grad().data(), m, p, k);
      if (b.requires_grad()) detail::gemm_tn(a.ptr(), g, b.mutable_grad().data(), k, m, p);
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = a[i * c + j];
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, r, c]() mutable {
      auto ga = a.mutable_grad();
      auto g = out.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (detail::tracking({&a, &b})) {
    detail::record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] += g[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  if (detail::tracking({&a, &b})) {
    detail::record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] -= g[i];
    });
  }
  return out;
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (detail::tracking({&a, &b})) {
    detail::record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i] * b[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] += g[i] * a[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * factor;
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

/// c * I - a for square a.
inline Tensor scaled_identity_minus(double c, const Tensor& a) {
  detail::require_rank2(a, "scaled_identity_minus");
  if (a.rows() != a.cols()) throw DimensionError("scaled_identity_minus: matrix must be square");
  const std::size_t n = a.rows();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = -a[i];
  for (std::size_t i = 0; i < n; ++i) o[i * n + i] += c;
  if (detail::tracking({&a})) {
    detail::record(out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
    });
  }
  return out;
}

/// Adds a length-cols bias to every row of a.
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  detail::require_rank2(a, "add_row_bias");
  const std::size_t r = a.rows(), c = a.cols();
  if (bias.size() != c)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs matrix " +
                         shape_str(a.shape()));
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = a[i * c + j] + bias[j];
  if (detail::tracking({&a, &bias})) {
    detail::record(out, [a, bias, out, r, c]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i];
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
  if (detail::tracking({&a})) {
    detail::record(out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * std::numbers::sqrt2 / 2.0));
  if (detail::tracking({&a})) {
    detail::record(out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = a[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (detail::tracking({&a})) {
    detail::record(out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Column means of a matrix, as a 1 x cols row.
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank2(a, "mean_rows");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out({1, c});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j] += a[i * c + j];
  for (auto& v : o) v /= static_cast<double>(r);
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, r, c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      const double inv = 1.0 / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
    });
  }
  return out;
}

/// Means of consecutive row segments of length `segment` (last one may be shorter).
inline Tensor segment_means(const Tensor& a, std::size_t segment) {
  detail::require_rank2(a, "segment_means");
  if (segment == 0) throw ParameterError("segment_means: segment length must be >= 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t count = (r + segment - 1) / segment;
  Tensor out({count, c});
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t lo = s * segment, hi = std::min(r, lo + segment);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < c; ++j) o[s * c + j] += a[i * c + j];
    for (std::size_t j = 0; j < c; ++j) o[s * c + j] *= inv;
  }
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, r, c, segment, count]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t s = 0; s < count; ++s) {
        const std::size_t lo = s * segment, hi = std::min(r, lo + segment);
        const double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t i = lo; i < hi; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[s * c + j] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (detail::tracking({&a})) {
    detail::record(out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != c)
      throw DimensionError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    r += p.rows();
  }
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  Tensor out({r, c}, std::move(data));
  if (detail::tracking(std::span<const Tensor>(parts))) {
    detail::record(out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return out;
}

/// Rows [begin, end).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_rows");
  if (begin >= end || end > a.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for " + shape_str(a.shape()));
  const std::size_t c = a.cols();
  Tensor out({end - begin, c},
             std::vector<double>(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 a.data().begin() + static_cast<std::ptrdiff_t>(end * c)));
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, begin, c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != r)
      throw DimensionError("concat_cols: height mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    c += p.cols();
  }
  Tensor out({r, c});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) o[i * c + offset + j] = p[i * pc + j];
    offset += pc;
  }
  if (detail::tracking(std::span<const Tensor>(parts))) {
    detail::record(out, [parts, out, r, c]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * c + off + j];
        }
        off += pc;
      }
    });
  }
  return out;
}

/// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_cols");
  if (begin >= end || end > a.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for " + shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  Tensor out({r, w});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) o[i * w + j] = a[i * c + begin + j];
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, r, c, w, begin]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
    });
  }
  return out;
}

/// out[i] = a[indices[i]]; gradients of repeated rows accumulate onto the source.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices) {
  detail::require_rank2(a, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t c = a.cols();
  Tensor out({indices.size(), c});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.rows())
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " out of bounds for " +
                           shape_str(a.shape()));
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = a[indices[i] * c + j];
  }
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, indices = std::move(indices), c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[indices[i] * c + j] += g[i * c + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank2(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.ptr() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] /= z;
  }
  if (detail::tracking({&x})) {
    detail::record(out, [x, out, r, c]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row layer normalisation: biased variance, eps inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t r = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width of " + shape_str(x.shape()));
  Tensor out(x.shape());
  std::vector<double> xhat(r * d), inv_std(r);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.ptr() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      o[i * d + j] = xhat[i * d + j] * gamma[j] + beta[j];
    }
  }
  if (detail::tracking({&x, &gamma, &beta})) {
    detail::record(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                         d]() mutable {
      auto g = out.grad();
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            if (gamma.requires_grad()) gamma.mutable_grad()[j] += g[i * d + j] * xhat[i * d + j];
            if (beta.requires_grad()) beta.mutable_grad()[j] += g[i * d + j];
          }
      }
      if (!x.requires_grad()) return;
      auto gx = x.mutable_grad();
      const double dd = static_cast<double>(d);
      for (std::size_t i = 0; i < r; ++i) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = g[i * d + j] * gamma[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat[i * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = g[i * d + j] * gamma[j];
          gx[i * d + j] +=
              inv_std[i] / dd * (dd * dxh - sum_dxhat - xhat[i * d + j] * sum_dxhat_xhat);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Depthwise convolution
// ---------------------------------------------------------------------------

/// Depthwise 2-D cross-correlation of a [channels x H x W] input with one
/// [k x k] kernel per channel, zero-padded by (k-1)/2 so the output keeps H x W.
inline Tensor grouped_conv2d(const Tensor& x, const Tensor& kernels) {
  if (x.rank() != 3 || kernels.rank() != 3)
    throw DimensionError("grouped_conv2d: expected [C x H x W] input and [C x k x k] kernels, got " +
                         shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2), k = kernels.dim(1);
  if (kernels.dim(2) != k) throw DimensionError("grouped_conv2d: kernels must be square");
  if (k % 2 == 0) throw ParameterError("grouped_conv2d: kernel size must be odd, got " + std::to_string(k));
  if (kernels.dim(0) != ch)
    throw DimensionError("grouped_conv2d: " + std::to_string(kernels.dim(0)) + " kernels for " +
                         std::to_string(ch) + " channels");
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  const auto K = static_cast<std::ptrdiff_t>(k);

  // Visits every (output, input, tap) triple that lies inside the image.
  auto for_each_tap = [=](auto&& fn) {
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(ch); ++c)
      for (std::ptrdiff_t i = 0; i < H; ++i)
        for (std::ptrdiff_t j = 0; j < W; ++j)
          for (std::ptrdiff_t u = 0; u < K; ++u) {
            const std::ptrdiff_t ii = i + u - pad;
            if (ii < 0 || ii >= H) continue;
            for (std::ptrdiff_t v = 0; v < K; ++v) {
              const std::ptrdiff_t jj = j + v - pad;
              if (jj < 0 || jj >= W) continue;
              fn(static_cast<std::size_t>((c * H + i) * W + j), static_cast<std::size_t>((c * H + ii) * W + jj),
                 static_cast<std::size_t>((c * K + u) * K + v));
            }
          }
  };

  Tensor out(x.shape());
  auto o = out.mutable_data();
  for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t ki) { o[oi] += kernels[ki] * x[xi]; });
  if (detail::tracking({&x, &kernels})) {
    detail::record(out, [x, kernels, out, for_each_tap]() mutable {
      auto g = out.grad();
      const bool gx = x.requires_grad(), gk = kernels.requires_grad();
      for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t ki) {
        if (gx) x.mutable_grad()[xi] += kernels[ki] * g[oi];
        if (gk) kernels.mutable_grad()[ki] += x[xi] * g[oi];
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudoinverse
// ---------------------------------------------------------------------------

/// A^T / (||A||_1 * ||A||_inf), the standard Newton-Schulz starting point.
/// Differentiable, with subgradients through the max-norm arguments.
inline Tensor pinv_initial_guess(const Tensor& a) {
  detail::require_rank2(a, "pinv_initial_guess");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> col_sum(c, 0.0), row_sum(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = std::abs(a[i * c + j]);
      row_sum[i] += v;
      col_sum[j] += v;
    }
  const std::size_t jstar = static_cast<std::size_t>(std::max_element(col_sum.begin(), col_sum.end()) - col_sum.begin());
  const std::size_t istar = static_cast<std::size_t>(std::max_element(row_sum.begin(), row_sum.end()) - row_sum.begin());
  const double norm1 = col_sum[jstar], norm_inf = row_sum[istar];
  const double denom = norm1 * norm_inf;
  if (!(denom > 0.0)) throw ContractError("pinv_initial_guess: matrix is zero");
  Tensor out({c, r});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = a[i * c + j] / denom;
  if (detail::tracking({&a})) {
    detail::record(out, [a, out, r, c, istar, jstar, norm1, norm_inf, denom]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      double g_denom = 0.0;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          ga[i * c + j] += g[j * r + i] / denom;
          g_denom -= g[j * r + i] * a[i * c + j] / (denom * denom);
        }
      const double g_norm1 = g_denom * norm_inf, g_norm_inf = g_denom * norm1;
      auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
      for (std::size_t i = 0; i < r; ++i) ga[i * c + jstar] += g_norm1 * sign(a[i * c + jstar]);
      for (std::size_t j = 0; j < c; ++j) ga[istar * c + j] += g_norm_inf * sign(a[istar * c + j]);
    });
  }
  return out;
}

inline constexpr std::size_t kTrainPinvIters = 6;
inline constexpr std::size_t kVerifyPinvIters = 20;

/// Moore-Penrose pseudoinverse of a square matrix by the iteration
///   Z <- 1/4 Z (13I - AZ (15I - AZ (7I - AZ))).
/// Built from differentiable primitives, so backward flows through every iteration.
inline Tensor pinv_newton_schulz(const Tensor& a, std::size_t iters = kTrainPinvIters) {
  detail::require_rank2(a, "pinv_newton_schulz");
  if (a.rows() != a.cols()) throw DimensionError("pinv_newton_schulz: matrix must be square, got " + shape_str(a.shape()));
  if (iters == 0) throw ParameterError("pinv_newton_schulz: iters must be >= 1");
  Tensor z = pinv_initial_guess(a);
  for (std::size_t it = 0; it < iters; ++it) {
    const Tensor az = matmul(a, z);
    Tensor inner = scaled_identity_minus(7.0, az);
    inner = scaled_identity_minus(15.0, matmul(az, inner));
    inner = scaled_identity_minus(13.0, matmul(az, inner));
    z = scale(matmul(z, inner), 0.25);
  }
  return z;
}

}  // namespace transmil
