#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "transmil/attention.hpp"
#include "transmil/errors.hpp"
#include "transmil/model.hpp"
#include "transmil/ops.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

/// Binary MIL label: negative iff every instance is negative.
inline int bag_label_rule(std::span<const int> instance_labels) {
  if (instance_labels.empty()) throw EmptyBagError();
  for (int y : instance_labels) {
    if (y != 0 && y != 1) throw ParameterError("instance labels must be 0 or 1");
    if (y == 1) return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Pooling matrices

enum class PoolingKind { max, mean, bypass_attention, self_attention };

inline const char* to_string(PoolingKind k) {
  switch (k) {
    case PoolingKind::max: return "max";
    case PoolingKind::mean: return "mean";
    case PoolingKind::bypass_attention: return "bypass_attention";
    case PoolingKind::self_attention: return "self_attention";
  }
  return "?";
}

/// n x n aggregation matrix P in X_P = P X_fh. Diagonal for the i.i.d.
/// operators, dense for self-attention.
struct PoolingMatrix {
  PoolingKind kind = PoolingKind::mean;
  Tensor matrix;

  std::size_t size() const { return matrix.rows(); }

  /// Entrywise check of the structural rule for this kind.
  bool satisfies_invariant(double tol = 1e-12) const {
    const std::size_t n = size();
    auto off_diagonal_zero = [&] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j && matrix.at(i, j) != 0.0) return false;
      return true;
    };
    switch (kind) {
      case PoolingKind::max: {
        std::size_t nonzero = 0;
        for (double v : matrix.data()) nonzero += v != 0.0;
        if (nonzero != 1 || !off_diagonal_zero()) return false;
        for (std::size_t i = 0; i < n; ++i)
          if (matrix.at(i, i) != 0.0) return matrix.at(i, i) == 1.0;
        return false;
      }
      case PoolingKind::mean:
        if (!off_diagonal_zero()) return false;
        for (std::size_t i = 0; i < n; ++i)
          if (matrix.at(i, i) != 1.0 / static_cast<double>(n)) return false;
        return true;
      case PoolingKind::bypass_attention: {
        if (!off_diagonal_zero()) return false;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (matrix.at(i, i) < 0.0) return false;
          total += matrix.at(i, i);
        }
        return std::abs(total - 1.0) <= tol;
      }
      case PoolingKind::self_attention:
        for (std::size_t i = 0; i < n; ++i) {
          double row = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (matrix.at(i, j) < 0.0) return false;
            row += matrix.at(i, j);
          }
          if (std::abs(row - 1.0) > tol) return false;
        }
        return true;
    }
    return false;
  }
};

/// Builds P for the given kind.
///   max:              needs `scores`; a single 1 at the argmax (first on ties)
///   mean:             diag(1/n)
///   bypass_attention: needs `scores` (logits); diag(softmax(scores))
///   self_attention:   needs `features` (n x d); the exact self-attention matrix of X against itself
inline PoolingMatrix build_pooling_matrix(PoolingKind kind, std::size_t n,
                                          std::optional<std::span<const double>> scores = std::nullopt,
                                          const Tensor& features = Tensor{}) {
  if (n == 0) throw EmptyBagError();
  PoolingMatrix p{kind, Tensor::zeros({n, n})};
  auto m = p.matrix.mutable_data();
  auto require_scores = [&] {
    if (!scores || scores->size() != n)
      throw ParameterError(std::string(to_string(kind)) + " pooling needs one score per instance");
  };
  switch (kind) {
    case PoolingKind::max: {
      require_scores();
      const auto best = static_cast<std::size_t>(std::max_element(scores->begin(), scores->end()) - scores->begin());
      m[best * n + best] = 1.0;
      break;
    }
    case PoolingKind::mean:
      if (scores) throw ParameterError("mean pooling takes no scores");
      for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0 / static_cast<double>(n);
      break;
    case PoolingKind::bypass_attention: {
      require_scores();
      const double mx = *std::max_element(scores->begin(), scores->end());
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += (m[i * n + i] = std::exp((*scores)[i] - mx));
      for (std::size_t i = 0; i < n; ++i) m[i * n + i] /= z;
      break;
    }
    case PoolingKind::self_attention: {
      if (scores) throw ParameterError("self_attention pooling is built from features, not scores");
      if (!features.defined() || features.rank() != 2 || features.rows() != n)
        throw ParameterError("self_attention pooling needs an n x d feature matrix");
      const Tensor x = features.detach();
      p.matrix = exact_self_attention(x, x, x).attn;
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Generic three-step correlated-MIL pipeline

using FeatureMap = std::function<Tensor(const Tensor&)>;
using PoolingBuilder = std::function<PoolingMatrix(const Tensor&)>;
using Readout = std::function<Tensor(const Tensor&)>;

/// X_fh = f(X) + h(X);  X_P = P X_fh;  prediction = g(X_P).
inline Tensor generic_three_step(const Tensor& bag, const FeatureMap& f, const FeatureMap& h,
                                 const PoolingBuilder& pool, const Readout& g) {
  if (!bag.defined()) throw EmptyBagError();
  const Tensor xf = f(bag);
  const Tensor xh = h(bag);
  if (xf.shape() != xh.shape())
    throw ContractError("f and h disagree on output shape: " + shape_str(xf.shape()) + " vs " + shape_str(xh.shape()));
  const Tensor x_fh = add(xf, xh);
  const PoolingMatrix p = pool(x_fh);
  if (p.size() != x_fh.rows())
    throw ContractError("pooling matrix is " + std::to_string(p.size()) + "x" + std::to_string(p.size()) +
                        " but there are " + std::to_string(x_fh.rows()) + " rows");
  return g(matmul(p.matrix, x_fh));
}

/// Readout helper: sums the rows of X_P (pooled rows are already weighted by P)
/// and applies a linear map to class scores.
inline Tensor linear_readout(const Tensor& x_p, const Tensor& weight, const Tensor& bias) {
  const Tensor pooled = matmul(Tensor::ones({1, x_p.rows()}), x_p);
  return reshape(add_row_bias(matmul(pooled, weight), bias), {bias.size()});
}

/// Mean-pooling MIL baseline: f = affine reducer, h = 0, P = mean, g = linear.
struct MeanPoolModel {
  Tensor reducer_w, reducer_b, head_w, head_b;

  static MeanPoolModel create(std::size_t input_dim, std::size_t dim, std::size_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double rb = std::sqrt(6.0 / static_cast<double>(input_dim + dim));
    const double hb = std::sqrt(6.0 / static_cast<double>(dim + classes));
    MeanPoolModel m{Tensor::uniform({input_dim, dim}, rng, -rb, rb), Tensor::zeros({dim}),
                    Tensor::uniform({dim, classes}, rng, -hb, hb), Tensor::zeros({classes})};
    for (auto& p : m.parameters()) p.set_requires_grad(true);
    return m;
  }

  std::vector<Tensor> parameters() const { return {reducer_w, reducer_b, head_w, head_b}; }

  std::size_t input_dim() const { return reducer_w.rows(); }

  template <class Options>
  Tensor forward(const Tensor& bag, const Options&) const {
    const std::size_t dim = reducer_w.cols();
    return generic_three_step(
        bag, [&](const Tensor& x) { return add_row_bias(matmul(x, reducer_w), reducer_b); },
        [&](const Tensor& x) { return Tensor::zeros({x.rows(), dim}); },
        [](const Tensor& x) { return build_pooling_matrix(PoolingKind::mean, x.rows()); },
        [&](const Tensor& xp) { return linear_readout(xp, head_w, head_b); });
  }
};

/// The transformer classifier written as f + h, P, g:
///   f = reduce, square, MSA, MSA without position encoding (morphology + correlation)
///   h = what PPEG adds to that token sequence (spatial information)
///   P = class-token selector (max-type matrix with its 1 on token 0)
///   g = sum of pooled rows, layer norm, linear head.
struct TransMILFramework {
  FeatureMap f;
  FeatureMap h;
  PoolingBuilder pool;
  Readout g;
};

inline TransMILFramework transmil_framework(const TransMILModel& model, AttentionMode mode) {
  auto tokens = [&model, mode](const Tensor& raw, bool with_ppeg) {
    const SquaredSequence seq = square_sequence(feature_reduce(raw, model), model.class_token);
    Tensor t = msa_block(seq.tokens, model.layer1, model.config.msa, mode).out;
    if (with_ppeg) t = ppeg_forward(t, model.ppeg);
    return msa_block(t, model.layer2, model.config.msa, mode).out;
  };
  TransMILFramework fw;
  fw.f = [tokens](const Tensor& raw) { return tokens(raw, false); };
  fw.h = [tokens](const Tensor& raw) { return sub(tokens(raw, true), tokens(raw, false)); };
  fw.pool = [](const Tensor& x_fh) {
    std::vector<double> pick(x_fh.rows(), 0.0);
    pick[0] = 1.0;
    return build_pooling_matrix(PoolingKind::max, x_fh.rows(), std::span<const double>(pick));
  };
  fw.g = [&model](const Tensor& x_p) {
    const Tensor pooled = matmul(Tensor::ones({1, x_p.rows()}), x_p);
    const Tensor normed = layer_norm(pooled, model.head_gamma, model.head_beta);
    return reshape(add_row_bias(matmul(normed, model.head_w), model.head_b), {model.config.classes});
  };
  return fw;
}

// ---------------------------------------------------------------------------
// Entropy of discrete joints (binary alphabets)

/// Joint distribution over n binary variables. Bit t of a table index is the
/// value of variable t (variable 0 is the least significant bit).
struct DiscreteJoint {
  std::size_t variables = 0;
  std::vector<double> table;

  static constexpr std::size_t kMaxVariables = 12;

  void validate(double tol = 1e-12) const {
    if (variables == 0 || variables > kMaxVariables)
      throw ParameterError("joint must have 1.." + std::to_string(kMaxVariables) + " variables");
    if (table.size() != (std::size_t{1} << variables)) throw ParameterError("table size must be 2^n");
    double total = 0.0;
    for (double p : table) {
      if (!(p >= 0.0)) throw ParameterError("probabilities must be nonnegative");
      total += p;
    }
    if (std::abs(total - 1.0) > tol) throw ParameterError("probabilities must sum to 1");
  }

  /// Flat Dirichlet sample over the 2^n outcomes.
  template <class Rng>
  static DiscreteJoint random(std::size_t n, Rng& rng) {
    DiscreteJoint j{n, std::vector<double>(std::size_t{1} << n)};
    std::exponential_distribution<double> gamma1(1.0);
    double total = 0.0;
    for (auto& p : j.table) total += (p = gamma1(rng));
    for (auto& p : j.table) p /= total;
    return j;
  }

  /// Independent Bernoulli variables with P(variable t = 1) = probs[t].
  static DiscreteJoint product(std::span<const double> probs) {
    const std::size_t n = probs.size();
    DiscreteJoint j{n, std::vector<double>(std::size_t{1} << n, 1.0)};
    for (std::size_t idx = 0; idx < j.table.size(); ++idx)
      for (std::size_t t = 0; t < n; ++t) j.table[idx] *= ((idx >> t) & 1U) ? probs[t] : 1.0 - probs[t];
    return j;
  }

  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << "n=" << variables << " p=[";
    for (std::size_t i = 0; i < table.size(); ++i) os << (i ? "," : "") << table[i];
    os << ']';
    return os.str();
  }
};

namespace detail {
inline double plogp(double p) { return p > 0.0 ? p * std::log2(p) : 0.0; }
}  // namespace detail

/// H(Theta_1..Theta_n) in bits.
inline double joint_entropy(const DiscreteJoint& j) {
  j.validate();
  double h = 0.0;
  for (double p : j.table) h -= detail::plogp(p);
  return h;
}

/// Sum of the marginal entropies, i.e. the bag entropy if instances were independent.
inline double marginal_entropy_sum(const DiscreteJoint& j) {
  j.validate();
  double h = 0.0;
  for (std::size_t t = 0; t < j.variables; ++t) {
    double p1 = 0.0;
    for (std::size_t idx = 0; idx < j.table.size(); ++idx)
      if ((idx >> t) & 1U) p1 += j.table[idx];
    h -= detail::plogp(p1) + detail::plogp(1.0 - p1);
  }
  return h;
}

/// H(Theta_1) + sum_t H(Theta_t | Theta_1..Theta_{t-1}), from conditional probabilities.
inline double conditional_chain_entropy(const DiscreteJoint& j) {
  j.validate();
  const std::size_t n = j.variables;
  // prefix[t][x] = P(Theta_1..Theta_t = x), x in [0, 2^t)
  std::vector<std::vector<double>> prefix(n + 1);
  prefix[n] = j.table;
  for (std::size_t t = n; t-- > 0;) {
    prefix[t].assign(std::size_t{1} << t, 0.0);
    for (std::size_t x = 0; x < prefix[t + 1].size(); ++x) prefix[t][x & ((std::size_t{1} << t) - 1)] += prefix[t + 1][x];
  }
  double h = -(detail::plogp(prefix[1][0]) + detail::plogp(prefix[1][1]));
  for (std::size_t t = 2; t <= n; ++t) {
    for (std::size_t x = 0; x < prefix[t].size(); ++x) {
      const double joint = prefix[t][x];
      const double given = prefix[t - 1][x & ((std::size_t{1} << (t - 1)) - 1)];
      if (joint > 0.0) h -= joint * std::log2(joint / given);
    }
  }
  return h;
}

struct EntropySweepReport {
  std::size_t tables_checked = 0;
  std::size_t product_tables_checked = 0;
  double max_inequality_excess = -1e300;  // max of H(joint) - sum H(marginal)
  double max_chain_gap = 0.0;             // max |chain - joint|
  double max_product_gap = 0.0;           // max |joint - sum marginal| on products
  std::vector<std::string> violations;

  bool passed() const { return violations.empty(); }
};

/// Random-table sweep of H(joint) <= sum H(marginal) and the chain-rule
/// identity, plus the equality case on product distributions.
inline EntropySweepReport run_entropy_sweep(std::size_t trials, std::span<const std::size_t> variable_counts,
                                            std::uint64_t seed, double tol = 1e-9) {
  if (trials == 0) throw ParameterError("trials must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  EntropySweepReport rep;
  for (std::size_t n : variable_counts) {
    for (std::size_t trial = 0; trial < trials; ++trial) {
      const DiscreteJoint j = DiscreteJoint::random(n, rng);
      const double hj = joint_entropy(j), hm = marginal_entropy_sum(j), hc = conditional_chain_entropy(j);
      ++rep.tables_checked;
      rep.max_inequality_excess = std::max(rep.max_inequality_excess, hj - hm);
      rep.max_chain_gap = std::max(rep.max_chain_gap, std::abs(hc - hj));
      if (hj > hm + tol) rep.violations.push_back("inequality violated: " + j.describe());
      if (std::abs(hc - hj) > tol) rep.violations.push_back("chain rule violated: " + j.describe());

      std::vector<double> probs(n);
      for (auto& p : probs) p = unit(rng);
      const DiscreteJoint prod = DiscreteJoint::product(probs);
      const double gap = std::abs(joint_entropy(prod) - marginal_entropy_sum(prod));
      ++rep.product_tables_checked;
      rep.max_product_gap = std::max(rep.max_product_gap, gap);
      if (gap > tol) rep.violations.push_back("product equality violated: " + prod.describe());
    }
  }
  return rep;
}

}  // namespace transmil
