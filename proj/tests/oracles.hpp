#pragma once

/// Independent reference implementations used as test oracles. Plain loops over
/// std::vector, sharing no code with the library under test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = flat[r * cols + c];
  return m;
}

/// softmax(Q K^T / sqrt(d)) V with a double loop per output entry.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* weights = nullptr) {
  const std::size_t s = q.size(), dq = q[0].size(), dv = v[0].size();
  Matrix out(s, std::vector<double>(dv, 0.0));
  Matrix w(s, std::vector<double>(k.size()));
  for (std::size_t i = 0; i < s; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < dq; ++t) dot += q[i][t] * k[j][t];
      w[i][j] = dot / std::sqrt(static_cast<double>(dq));
      mx = std::max(mx, w[i][j]);
    }
    double z = 0.0;
    for (auto& x : w[i]) z += (x = std::exp(x - mx));
    for (auto& x : w[i]) x /= z;
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t t = 0; t < dv; ++t) out[i][t] += w[i][j] * v[j][t];
  }
  if (weights) *weights = w;
  return out;
}

/// Sliding-window cross-correlation of one H x W channel with zero padding.
inline Matrix conv_same(const Matrix& x, const Matrix& kernel) {
  const int h = static_cast<int>(x.size()), w = static_cast<int>(x[0].size());
  const int ks = static_cast<int>(kernel.size()), r = ks / 2;
  Matrix out(h, std::vector<double>(w, 0.0));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int a = 0; a < ks; ++a)
        for (int b = 0; b < ks; ++b) {
          const int y = i + a - r, xx = j + b - r;
          if (y >= 0 && y < h && xx >= 0 && xx < w) out[i][j] += kernel[a][b] * x[y][xx];
        }
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

/// Row-wise layer norm with biased variance and eps 1e-5.
inline Matrix layer_norm(const Matrix& x, const std::vector<double>& gamma, const std::vector<double>& beta) {
  Matrix y = x;
  const double d = static_cast<double>(x[0].size());
  for (auto& row : y) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v / d;
    for (double v : row) var += (v - mu) * (v - mu) / d;
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * gamma[j] + beta[j];
  }
  return y;
}

/// Pre-norm multi-head block X + concat_h(attention_h(LN X)) W_O with column-sliced heads.
/// `class_row` receives row 0 of the attention averaged over heads.
inline Matrix msa(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo,
                  const std::vector<double>& gamma, const std::vector<double>& beta, std::size_t heads,
                  std::vector<double>* class_row = nullptr) {
  const std::size_t s = x.size(), d = x[0].size(), dh = d / heads;
  const Matrix ln = layer_norm(x, gamma, beta);
  const Matrix q = matmul(ln, wq), k = matmul(ln, wk), v = matmul(ln, wv);
  Matrix merged(s, std::vector<double>(d));
  if (class_row) class_row->assign(s, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    auto cols = [&](const Matrix& m) {
      Matrix out(s, std::vector<double>(dh));
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t c = 0; c < dh; ++c) out[i][c] = m[i][h * dh + c];
      return out;
    };
    Matrix w;
    const Matrix ctx = attention(cols(q), cols(k), cols(v), &w);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t c = 0; c < dh; ++c) merged[i][h * dh + c] = ctx[i][c];
    if (class_row)
      for (std::size_t j = 0; j < s; ++j) (*class_row)[j] += w[0][j] / static_cast<double>(heads);
  }
  Matrix out = matmul(merged, wo);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i][j] += x[i][j];
  return out;
}

/// AUC by enumerating every (positive, negative) pair.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (labels[i] == 1 && labels[j] == 0) {
        pairs += 1.0;
        good += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
      }
  return good / pairs;
}

/// Shannon entropy in bits of a probability vector.
inline double entropy_bits(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log2(x);
  return h;
}

}  // namespace oracle
