#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transmil/tensor.hpp"

namespace transmil {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error, so exact zeros compare absolutely.
  double floor = 1e-6;
  /// Check at most this many entries per parameter (evenly strided); 0 = all.
  std::size_t max_entries_per_param = 0;
};

/// Compares reverse-mode gradients of `loss_fn()` against central differences.
/// `loss_fn` must build a scalar loss from the given parameters each call.
template <class LossFn>
GradCheckResult check_gradients(LossFn&& loss_fn, std::vector<Tensor> params, GradCheckOptions opt = {}) {
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    GradTape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    const std::size_t n = p.size();
    const std::size_t stride =
        opt.max_entries_per_param == 0 ? 1 : std::max<std::size_t>(1, n / opt.max_entries_per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.mutable_data()[i];
      p.mutable_data()[i] = orig + opt.step;
      const double up = loss_fn().item();
      p.mutable_data()[i] = orig - opt.step;
      const double down = loss_fn().item();
      p.mutable_data()[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace transmil
