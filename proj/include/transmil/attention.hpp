#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "transmil/errors.hpp"
#include "transmil/ops.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

enum class AttentionMode { exact, nystrom };

inline const char* to_string(AttentionMode mode) { return mode == AttentionMode::exact ? "exact" : "nystrom"; }

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "exact") return AttentionMode::exact;
  if (s == "nystrom") return AttentionMode::nystrom;
  throw ParameterError("unknown attention mode '" + s + "' (expected exact or nystrom)");
}

struct MSAConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t landmarks = 64;
  std::size_t pinv_iters = kTrainPinvIters;

  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0)
      throw ParameterError("head count " + std::to_string(heads) + " must divide model dim " +
                           std::to_string(model_dim));
    if (landmarks == 0) throw ParameterError("landmark count must be >= 1");
    if (pinv_iters == 0) throw ParameterError("pinv_iters must be >= 1");
  }
};

/// Packed per-head projections plus the pre-norm affine parameters of one MSA block.
struct MSAWeights {
  Tensor w_q, w_k, w_v, w_o;  // d x d each; head h owns columns [h*d_h, (h+1)*d_h)
  Tensor ln_gamma, ln_beta;   // d

  static MSAWeights zeros(std::size_t d) {
    return {Tensor::zeros({d, d}), Tensor::zeros({d, d}), Tensor::zeros({d, d}), Tensor::zeros({d, d}),
            Tensor::ones({d}),     Tensor::zeros({d})};
  }

  /// Xavier-uniform projections, identity layer norm.
  template <class Rng>
  static MSAWeights xavier(std::size_t d, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(2 * d));
    return {Tensor::uniform({d, d}, rng, -bound, bound), Tensor::uniform({d, d}, rng, -bound, bound),
            Tensor::uniform({d, d}, rng, -bound, bound), Tensor::uniform({d, d}, rng, -bound, bound),
            Tensor::ones({d}),
            Tensor::zeros({d})};
  }

  std::vector<Tensor> parameters() const { return {w_q, w_k, w_v, w_o, ln_gamma, ln_beta}; }
};

struct AttentionOutput {
  Tensor context;  // s x d_q
  Tensor attn;     // s x s
};

namespace detail {

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  require_rank2(q, op);
  require_rank2(k, op);
  require_rank2(v, op);
  if (q.shape() != k.shape() || k.rows() != v.rows())
    throw DimensionError(std::string(op) + ": Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()) + " are inconsistent");
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_q)) V, materialising the full s x s attention matrix.
inline AttentionOutput exact_self_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::check_qkv(q, k, v, "exact_self_attention");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
  Tensor context = matmul(attn, v);
  return {context, attn};
}

/// Effective number of landmarks for a length-s sequence: segments of
/// ceil(s/m) rows, so fewer than m segments may be non-empty.
inline std::size_t landmark_count(std::size_t s, std::size_t m) {
  if (m == 0) throw ParameterError("landmark count must be >= 1");
  m = std::min(m, s);
  const std::size_t seg = (s + m - 1) / m;
  return (s + seg - 1) / seg;
}

/// Segment-mean landmarks: rows split into contiguous runs of ceil(s/m).
inline Tensor select_landmarks(const Tensor& rows, std::size_t m) {
  detail::require_rank2(rows, "select_landmarks");
  if (m == 0) throw ParameterError("select_landmarks: m must be >= 1");
  const std::size_t s = rows.rows();
  m = std::min(m, s);
  return segment_means(rows, (s + m - 1) / m);
}

/// The three factors of the Nystrom reconstruction
///   S^ = softmax(Q K~^T/sqrt d) * pinv(softmax(Q~ K~^T/sqrt d)) * softmax(Q~ K^T/sqrt d)
/// each of size at most s x m.
struct NystromFactors {
  Tensor left;    // s x m
  Tensor middle;  // m x m, the pseudoinverse
  Tensor right;   // m x s
};

inline NystromFactors nystrom_factors(const Tensor& q, const Tensor& k, std::size_t m, std::size_t pinv_iters) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Tensor q_land = select_landmarks(q, m);
  const Tensor k_land = select_landmarks(k, m);
  Tensor left = softmax_rows(scale(matmul(q, transpose(k_land)), inv_sqrt));
  Tensor kernel = softmax_rows(scale(matmul(q_land, transpose(k_land)), inv_sqrt));
  Tensor right = softmax_rows(scale(matmul(q_land, transpose(k)), inv_sqrt));
  return {left, pinv_newton_schulz(kernel, pinv_iters), right};
}

/// Nystrom approximation of self-attention. Evaluated right-to-left so no
/// s x s buffer is ever allocated; cost is linear in s for fixed m.
inline Tensor nystrom_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t m,
                                std::size_t pinv_iters = kTrainPinvIters) {
  detail::check_qkv(q, k, v, "nystrom_attention");
  const NystromFactors f = nystrom_factors(q, k, m, pinv_iters);
  return matmul(f.left, matmul(f.middle, matmul(f.right, v)));
}

struct MSAResult {
  Tensor out;
  /// Row 0 of the attention matrix averaged over heads (length s); empty unless requested.
  std::vector<double> class_attention;
};

/// Pre-norm residual multi-head self-attention: out = X + concat_h(SA_h(LN(X))) W_O.
inline MSAResult msa_block(const Tensor& x, const MSAWeights& w, const MSAConfig& cfg, AttentionMode mode,
                           bool want_class_attention = false) {
  cfg.validate();
  detail::require_rank2(x, "msa_block");
  if (x.cols() != cfg.model_dim)
    throw DimensionError("msa_block: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(cfg.model_dim));
  const std::size_t s = x.rows(), dh = cfg.head_dim();
  const Tensor normed = layer_norm(x, w.ln_gamma, w.ln_beta);
  const Tensor q = matmul(normed, w.w_q);
  const Tensor k = matmul(normed, w.w_k);
  const Tensor v = matmul(normed, w.w_v);

  MSAResult result;
  if (want_class_attention) result.class_attention.assign(s, 0.0);
  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    if (mode == AttentionMode::exact) {
      AttentionOutput a = exact_self_attention(qh, kh, vh);
      if (want_class_attention)
        for (std::size_t j = 0; j < s; ++j) result.class_attention[j] += a.attn[j];
      heads.push_back(a.context);
    } else {
      const NystromFactors f = nystrom_factors(qh, kh, cfg.landmarks, cfg.pinv_iters);
      heads.push_back(matmul(f.left, matmul(f.middle, matmul(f.right, vh))));
      if (want_class_attention) {
        // Only the class-token row of S^, O(m * s).
        const Tensor row = matmul(matmul(slice_rows(f.left.detach(), 0, 1), f.middle.detach()), f.right.detach());
        for (std::size_t j = 0; j < s; ++j) result.class_attention[j] += row[j];
      }
    }
  }
  if (want_class_attention)
    for (auto& a : result.class_attention) a /= static_cast<double>(cfg.heads);
  const Tensor merged = cfg.heads == 1 ? heads.front() : concat_cols(heads);
  result.out = add(x, matmul(merged, w.w_o));
  return result;
}

}  // namespace transmil
