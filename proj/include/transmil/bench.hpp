#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "transmil/attention.hpp"
#include "transmil/errors.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

struct BenchConfig {
  std::vector<std::size_t> lengths{1024, 2048, 4096};
  std::size_t dim = 64;
  std::size_t landmarks = 64;
  std::size_t pinv_iters = kTrainPinvIters;
  std::size_t repeats = 3;  // best-of-N wall clock
  std::uint64_t seed = 0;

  void validate() const {
    if (lengths.empty()) throw ParameterError("bench needs at least one sequence length");
    if (dim == 0 || landmarks == 0 || repeats == 0) throw ParameterError("bench dim, landmarks and repeats must be >= 1");
  }
};

struct BenchRow {
  std::size_t n = 0;
  AttentionMode mode = AttentionMode::exact;
  double millis = 0.0;
  std::size_t peak_elements = 0;  // largest single buffer allocated during the pass
};

struct BenchReport {
  std::vector<BenchRow> rows;

  double millis(std::size_t n, AttentionMode mode) const {
    for (const auto& r : rows)
      if (r.n == n && r.mode == mode) return r.millis;
    throw ParameterError("no bench row for n=" + std::to_string(n));
  }
  std::size_t peak_elements(std::size_t n, AttentionMode mode) const {
    for (const auto& r : rows)
      if (r.n == n && r.mode == mode) return r.peak_elements;
    throw ParameterError("no bench row for n=" + std::to_string(n));
  }
  /// t(largest n) / t(smallest n) for one mode.
  double growth(AttentionMode mode) const {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& r : rows) {
      lo = std::min(lo, r.n);
      hi = std::max(hi, r.n);
    }
    return millis(hi, mode) / millis(lo, mode);
  }
};

/// Times single-head attention forward passes (no gradient tape) for both modes.
inline BenchReport run_attention_bench(const BenchConfig& cfg) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  std::mt19937_64 rng(cfg.seed);
  BenchReport report;
  for (std::size_t n : cfg.lengths) {
    const Tensor q = Tensor::randn({n, cfg.dim}, rng, 1.0);
    const Tensor k = Tensor::randn({n, cfg.dim}, rng, 1.0);
    const Tensor v = Tensor::randn({n, cfg.dim}, rng, 1.0);
    for (AttentionMode mode : {AttentionMode::exact, AttentionMode::nystrom}) {
      double best = 0.0;
      std::size_t peak = 0;
      for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
        AllocationProbe::reset();
        const auto t0 = clock::now();
        Tensor out = mode == AttentionMode::exact ? exact_self_attention(q, k, v).context
                                                  : nystrom_attention(q, k, v, cfg.landmarks, cfg.pinv_iters);
        const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        peak = std::max(peak, AllocationProbe::peak_elements());
        best = rep == 0 ? ms : std::min(best, ms);
      }
      report.rows.push_back({n, mode, best, peak});
    }
  }
  return report;
}

/// CSV `n,mode,millis`.
inline void write_bench_csv(const BenchReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "n,mode,millis\n" << std::setprecision(10);
  for (const auto& r : report.rows) out << r.n << ',' << to_string(r.mode) << ',' << r.millis << '\n';
}

}  // namespace transmil
