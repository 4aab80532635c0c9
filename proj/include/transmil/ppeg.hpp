#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transmil/errors.hpp"
#include "transmil/ops.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

/// Depthwise kernel banks of the pyramid position encoder (3x3, 5x5, 7x7).
struct PPEGWeights {
  Tensor k3, k5, k7;

  /// Zero kernels: the encoder starts out as the identity map.
  static PPEGWeights zeros(std::size_t d) {
    return {Tensor::zeros({d, 3, 3}), Tensor::zeros({d, 5, 5}), Tensor::zeros({d, 7, 7})};
  }

  template <class Rng>
  static PPEGWeights random(std::size_t d, Rng& rng, double stddev) {
    return {Tensor::randn({d, 3, 3}, rng, stddev), Tensor::randn({d, 5, 5}, rng, stddev),
            Tensor::randn({d, 7, 7}, rng, stddev)};
  }

  std::size_t channels() const { return k3.dim(0); }
  std::vector<Tensor> parameters() const { return {k3, k5, k7}; }
};

inline std::size_t exact_isqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return r;
}

/// Class token passes through; the N patch tokens are restored to a
/// sqrt(N) x sqrt(N) grid (row-major), convolved by each kernel bank,
/// fused additively with the grid, flattened back and re-attached.
inline Tensor ppeg_forward(const Tensor& tokens, const PPEGWeights& w) {
  if (tokens.rank() != 2 || tokens.rows() < 2)
    throw DimensionError("ppeg_forward: need a class token plus patch tokens, got " + shape_str(tokens.shape()));
  const std::size_t n = tokens.rows() - 1, d = tokens.cols();
  const std::size_t g = exact_isqrt(n);
  if (g * g != n)
    throw ContractError("ppeg_forward: " + std::to_string(n) + " patch tokens do not form a square grid");
  if (w.channels() != d)
    throw DimensionError("ppeg_forward: kernels have " + std::to_string(w.channels()) + " channels, tokens have " +
                         std::to_string(d));

  const Tensor cls = slice_rows(tokens, 0, 1);
  const Tensor grid = reshape(transpose(slice_rows(tokens, 1, n + 1)), {d, g, g});
  Tensor fused = add(grid, grouped_conv2d(grid, w.k3));
  fused = add(fused, grouped_conv2d(grid, w.k5));
  fused = add(fused, grouped_conv2d(grid, w.k7));
  const Tensor patches = transpose(reshape(fused, {d, n}));
  return concat_rows({cls, patches});
}

inline constexpr double kSinusoidalScale = 0.001;

/// Fixed sine/cosine table, position = row index, base 10000.
inline Tensor sinusoidal_table(std::size_t rows, std::size_t d) {
  Tensor pe({rows, d});
  auto p = pe.mutable_data();
  for (std::size_t pos = 0; pos < rows; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      p[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

/// Ablation alternative to PPEG: adds 0.001 x the sinusoidal table.
inline Tensor sinusoidal_encoding(const Tensor& tokens) {
  detail::require_rank2(tokens, "sinusoidal_encoding");
  return add(tokens, scale(sinusoidal_table(tokens.rows(), tokens.cols()), kSinusoidalScale));
}

}  // namespace transmil
