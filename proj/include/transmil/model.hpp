#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "transmil/attention.hpp"
#include "transmil/binary_io.hpp"
#include "transmil/errors.hpp"
#include "transmil/ops.hpp"
#include "transmil/ppeg.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

struct ModelConfig {
  std::size_t input_dim = 1024;
  MSAConfig msa{};
  std::size_t classes = 2;

  void validate() const {
    msa.validate();
    if (input_dim == 0) throw ParameterError("input dim must be >= 1");
    if (classes < 2) throw ParameterError("class count must be >= 2");
  }
};

/// Which positional signal the forward pass injects.
enum class PositionEncoding { ppeg, sinusoidal, none };

struct ForwardOptions {
  AttentionMode mode = AttentionMode::nystrom;
  PositionEncoding position = PositionEncoding::ppeg;
};

/// All learnable state of the transformer MIL classifier.
struct TransMILModel {
  ModelConfig config;
  Tensor reducer_w;    // d_in x d
  Tensor reducer_b;    // d
  Tensor class_token;  // 1 x d
  MSAWeights layer1;
  PPEGWeights ppeg;
  MSAWeights layer2;
  Tensor head_gamma, head_beta;  // d
  Tensor head_w;                 // d x C
  Tensor head_b;                 // C

  /// Xavier projections, zero class token, zero PPEG kernels, zero biases.
  static TransMILModel create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t din = cfg.input_dim, d = cfg.msa.model_dim, c = cfg.classes;
    TransMILModel m;
    m.config = cfg;
    const double rb = std::sqrt(6.0 / static_cast<double>(din + d));
    m.reducer_w = Tensor::uniform({din, d}, rng, -rb, rb);
    m.reducer_b = Tensor::zeros({d});
    m.class_token = Tensor::zeros({1, d});
    m.layer1 = MSAWeights::xavier(d, rng);
    m.ppeg = PPEGWeights::zeros(d);
    m.layer2 = MSAWeights::xavier(d, rng);
    m.head_gamma = Tensor::ones({d});
    m.head_beta = Tensor::zeros({d});
    const double hb = std::sqrt(6.0 / static_cast<double>(d + c));
    m.head_w = Tensor::uniform({d, c}, rng, -hb, hb);
    m.head_b = Tensor::zeros({c});
    m.enable_grad();
    return m;
  }

  /// Fixed order, shared with the checkpoint format.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p{reducer_w, reducer_b, class_token};
    for (auto& t : layer1.parameters()) p.push_back(t);
    for (auto& t : ppeg.parameters()) p.push_back(t);
    for (auto& t : layer2.parameters()) p.push_back(t);
    p.insert(p.end(), {head_gamma, head_beta, head_w, head_b});
    return p;
  }

  void enable_grad() {
    for (auto& p : parameters())
      if (!p.requires_grad()) p.set_requires_grad(true);
  }

  /// Deep copy with independent storage.
  TransMILModel clone() const {
    TransMILModel m = *this;
    auto src = parameters();
    std::vector<Tensor*> dst{&m.reducer_w, &m.reducer_b, &m.class_token,
                             &m.layer1.w_q, &m.layer1.w_k, &m.layer1.w_v, &m.layer1.w_o, &m.layer1.ln_gamma, &m.layer1.ln_beta,
                             &m.ppeg.k3, &m.ppeg.k5, &m.ppeg.k7,
                             &m.layer2.w_q, &m.layer2.w_k, &m.layer2.w_v, &m.layer2.w_o, &m.layer2.ln_gamma, &m.layer2.ln_beta,
                             &m.head_gamma, &m.head_beta, &m.head_w, &m.head_b};
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i].clone();
    return m;
  }

  /// Logits only; see tpt_forward for the attention scores.
  Tensor forward(const Tensor& raw_bag, const ForwardOptions& opt) const;

  std::size_t input_dim() const { return config.input_dim; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.size();
    return n;
  }
};

// ---------------------------------------------------------------------------

/// Row-wise affine reduction from the raw embedding width to the model width.
inline Tensor feature_reduce(const Tensor& raw_bag, const TransMILModel& model) {
  if (!raw_bag.defined()) throw EmptyBagError();
  detail::require_rank2(raw_bag, "feature_reduce");
  if (raw_bag.cols() != model.config.input_dim)
    throw DimensionError("feature_reduce: bag " + shape_str(raw_bag.shape()) + " but model expects width " +
                         std::to_string(model.config.input_dim));
  return add_row_bias(matmul(raw_bag, model.reducer_w), model.reducer_b);
}

/// Token sequence padded to a square grid: [class; H; H[0..M)].
struct SquaredSequence {
  Tensor tokens;  // (N+1) x d
  std::size_t original_n = 0;
  std::size_t n_total = 0;  // N
  std::size_t padding = 0;  // M = N - n

  std::size_t grid() const { return exact_isqrt(n_total); }
};

inline std::size_t squared_length(std::size_t n) {
  if (n == 0) throw EmptyBagError();
  std::size_t g = exact_isqrt(n);
  if (g * g < n) ++g;
  return g * g;
}

/// Index of the source instance for each of the N patch tokens.
inline std::vector<std::size_t> padded_sources(std::size_t n) {
  const std::size_t total = squared_length(n);
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i < n ? i : i - n;
  return idx;
}

inline SquaredSequence square_sequence(const Tensor& embeddings, const Tensor& class_token) {
  if (!embeddings.defined()) throw EmptyBagError();
  detail::require_rank2(embeddings, "square_sequence");
  if (class_token.size() != embeddings.cols())
    throw DimensionError("square_sequence: class token " + shape_str(class_token.shape()) + " vs embeddings " +
                         shape_str(embeddings.shape()));
  SquaredSequence seq;
  seq.original_n = embeddings.rows();
  seq.n_total = squared_length(seq.original_n);
  seq.padding = seq.n_total - seq.original_n;
  const Tensor cls = class_token.rank() == 2 ? class_token : reshape(class_token, {1, class_token.size()});
  seq.tokens = concat_rows({cls, gather_rows(embeddings, padded_sources(seq.original_n))});
  return seq;
}

struct TPTOutput {
  Tensor logits;  // [C]
  /// Layer-2 class-token attention over the N patch tokens, averaged over heads.
  std::vector<double> class_attention;
  std::size_t original_n = 0;
  std::size_t grid = 0;
};

/// Full forward pass: reduce, square, MSA, position encoding, MSA, LN + linear head on the class token.
inline TPTOutput tpt_forward(const Tensor& raw_bag, const TransMILModel& model, ForwardOptions opt = {}) {
  const Tensor reduced = feature_reduce(raw_bag, model);
  const SquaredSequence seq = square_sequence(reduced, model.class_token);
  const MSAConfig& msa = model.config.msa;

  Tensor tokens = seq.tokens;
  if (opt.position == PositionEncoding::sinusoidal) tokens = sinusoidal_encoding(tokens);
  tokens = msa_block(tokens, model.layer1, msa, opt.mode).out;
  if (opt.position == PositionEncoding::ppeg) tokens = ppeg_forward(tokens, model.ppeg);
  MSAResult second = msa_block(tokens, model.layer2, msa, opt.mode, /*want_class_attention=*/true);

  const Tensor cls = layer_norm(slice_rows(second.out, 0, 1), model.head_gamma, model.head_beta);
  const Tensor logits = add_row_bias(matmul(cls, model.head_w), model.head_b);

  TPTOutput out;
  out.logits = reshape(logits, {model.config.classes});
  out.class_attention.assign(second.class_attention.begin() + 1, second.class_attention.end());
  out.original_n = seq.original_n;
  out.grid = seq.grid();
  return out;
}

inline Tensor TransMILModel::forward(const Tensor& raw_bag, const ForwardOptions& opt) const {
  return tpt_forward(raw_bag, *this, opt).logits;
}

// ---------------------------------------------------------------------------
// Heatmaps

struct HeatmapEntry {
  std::size_t instance = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  double raw = 0.0;    // folded attention
  double score = 0.0;  // min-max normalised to [0,1]
};

struct Heatmap {
  std::size_t grid = 0;
  std::vector<HeatmapEntry> entries;  // one per original instance
};

/// Folds padding-token attention back onto the source instances, then
/// min-max normalises. A constant map normalises to 0.5 everywhere.
inline Heatmap export_heatmap(std::span<const double> class_attention, std::size_t original_n, std::size_t grid) {
  if (class_attention.size() < original_n || grid * grid != class_attention.size())
    throw DimensionError("export_heatmap: " + std::to_string(class_attention.size()) + " scores for " +
                         std::to_string(original_n) + " instances on a " + std::to_string(grid) + "-grid");
  Heatmap map;
  map.grid = grid;
  map.entries.resize(original_n);
  for (std::size_t i = 0; i < original_n; ++i) map.entries[i] = {i, i / grid, i % grid, 0.0, 0.0};
  for (std::size_t t = 0; t < class_attention.size(); ++t)
    map.entries[t < original_n ? t : t - original_n].raw += class_attention[t];
  auto [lo, hi] = std::minmax_element(map.entries.begin(), map.entries.end(),
                                      [](const auto& a, const auto& b) { return a.raw < b.raw; });
  const double min = lo->raw, range = hi->raw - lo->raw;
  for (auto& e : map.entries) e.score = range > 0.0 ? (e.raw - min) / range : 0.5;
  return map;
}

inline void write_heatmap_csv(const Heatmap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "instance,row,col,score\n" << std::setprecision(17);
  for (const auto& e : map.entries) out << e.instance << ',' << e.row << ',' << e.col << ',' << e.score << '\n';
}

/// Grey level for a normalised score: score x 255, rounded half-up.
inline int heatmap_grey(double score) { return static_cast<int>(std::floor(score * 255.0 + 0.5)); }

/// Plain "P2" PGM of the full grid; padding cells repeat their source instance.
inline void write_heatmap_pgm(const Heatmap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  const std::size_t n = map.entries.size();
  out << "P2\n" << map.grid << ' ' << map.grid << "\n255\n";
  for (std::size_t r = 0; r < map.grid; ++r) {
    for (std::size_t c = 0; c < map.grid; ++c) {
      const std::size_t cell = r * map.grid + c;
      out << (c ? " " : "") << heatmap_grey(map.entries[cell < n ? cell : cell - n].score);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "TMIL" | version u32 | d_in, d, h, m, C (u32 each)
//   then for every tensor in TransMILModel::parameters() order:
//     rank u32 | extents u32 x rank | f64 payload
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const TransMILModel& model) {
  io::ByteWriter w;
  w.bytes("TMIL");
  w.u32(kCheckpointVersion);
  const auto& c = model.config;
  for (std::size_t v : {c.input_dim, c.msa.model_dim, c.msa.heads, c.msa.landmarks, c.classes})
    w.u32(static_cast<std::uint32_t>(v));
  for (const auto& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.rank()));
    for (auto e : p.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : p.data()) w.f64(v);
  }
  return w.buffer();
}

inline TransMILModel decode_checkpoint(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.bytes(4, "magic") != "TMIL") throw FormatError("not a model checkpoint (bad magic)", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  ModelConfig cfg;
  cfg.input_dim = r.u32("d_in");
  cfg.msa.model_dim = r.u32("d");
  cfg.msa.heads = r.u32("h");
  cfg.msa.landmarks = r.u32("m");
  cfg.classes = r.u32("C");
  try {
    cfg.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("invalid config block: ") + e.what(), 8);
  }

  TransMILModel m = TransMILModel::create(cfg, 0);
  auto params = m.parameters();
  for (auto& p : params) {
    const std::size_t at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("extent");
    if (shape != p.shape())
      throw FormatError("tensor shape " + shape_str(shape) + " does not match config (expected " +
                        shape_str(p.shape()) + ")", at);
    for (auto& v : p.mutable_data()) v = r.f64("payload");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  return m;
}

inline void save_checkpoint(const TransMILModel& model, const std::string& path) {
  io::write_file(path, encode_checkpoint(model));
}

inline TransMILModel load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace transmil
