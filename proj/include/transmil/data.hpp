#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "transmil/binary_io.hpp"
#include "transmil/errors.hpp"
#include "transmil/ppeg.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

/// One bag: n x d instance embeddings and a bag-level label. Instance labels
/// are not part of a bag.
struct Bag {
  Tensor instances;
  int label = 0;
  std::string id;
  std::string patient_id;

  std::size_t size() const { return instances.defined() ? instances.rows() : 0; }
  std::size_t dim() const { return instances.defined() ? instances.cols() : 0; }
};

struct SyntheticConfig {
  std::size_t bag_count = 200;
  std::size_t min_instances = 80;
  std::size_t max_instances = 120;
  std::size_t feature_dim = 32;
  std::size_t class_count = 2;
  double witness_rate = 0.1;
  double cluster_separation = 2.5;
  bool spatial_clustering = true;
  std::uint64_t seed = 7;

  /// Sparse witnesses, like small metastases in a mostly healthy slide.
  static SyntheticConfig camelyon_like() { return {}; }

  /// Witness-dominated bags, like subtype slides that are mostly tumour.
  static SyntheticConfig tcga_like() {
    SyntheticConfig c;
    c.witness_rate = 0.8;
    c.cluster_separation = 0.75;
    return c;
  }

  void validate() const {
    if (bag_count < 4) throw ParameterError("bag_count must be >= 4");
    if (min_instances == 0 || max_instances < min_instances)
      throw ParameterError("instances_per_bag range must satisfy 1 <= min <= max");
    if (feature_dim == 0) throw ParameterError("feature_dim must be >= 1");
    if (class_count < 2) throw ParameterError("class_count must be >= 2");
    if (class_count - 1 > feature_dim) throw ParameterError("class_count - 1 must not exceed feature_dim");
    if (!(witness_rate > 0.0 && witness_rate <= 1.0)) throw ParameterError("witness_rate must be in (0, 1]");
    if (!(cluster_separation >= 0.0) || !std::isfinite(cluster_separation))
      throw ParameterError("cluster_separation must be finite and >= 0");
  }
};

struct SyntheticDataset {
  std::vector<Bag> bags;
  /// Ground-truth witness flags per bag, for evaluation only.
  std::vector<std::vector<int>> instance_labels;
};

inline std::size_t witness_count(std::size_t n, double witness_rate) {
  return std::min(n, static_cast<std::size_t>(std::ceil(witness_rate * static_cast<double>(n) - 1e-9)));
}

namespace detail {

/// Witness indices forming a compact block on the ceil(sqrt(n)) grid: a
/// rectangle of width ceil(sqrt(k)) filled row-major from a random origin.
template <class Rng>
std::vector<std::size_t> clustered_witnesses(std::size_t n, std::size_t k, Rng& rng) {
  std::size_t grid = exact_isqrt(n);
  if (grid * grid < n) ++grid;
  std::size_t width = exact_isqrt(k);
  if (width * width < k) ++width;
  width = std::min(width, grid);
  const std::size_t height = (k + width - 1) / width;
  auto cells_from = [&](std::size_t r0, std::size_t c0) {
    std::vector<std::size_t> cells;
    for (std::size_t i = 0; i < k; ++i) cells.push_back((r0 + i / width) * grid + c0 + i % width);
    return cells;
  };
  std::vector<std::pair<std::size_t, std::size_t>> origins;
  for (std::size_t r0 = 0; r0 + height <= grid; ++r0)
    for (std::size_t c0 = 0; c0 + width <= grid; ++c0)
      if (cells_from(r0, c0).back() < n) origins.emplace_back(r0, c0);
  if (origins.empty()) {
    // Block does not fit inside the occupied cells; fall back to a contiguous run.
    std::uniform_int_distribution<std::size_t> start(0, n - k);
    const std::size_t s = start(rng);
    std::vector<std::size_t> cells(k);
    for (std::size_t i = 0; i < k; ++i) cells[i] = s + i;
    return cells;
  }
  std::uniform_int_distribution<std::size_t> pick(0, origins.size() - 1);
  const auto [r0, c0] = origins[pick(rng)];
  return cells_from(r0, c0);
}

}  // namespace detail

/// Gaussian witness bags. Class 0 bags hold only background instances
/// (N(0, I)); a class c > 0 bag replaces ceil(witness_rate * n) of them with
/// draws from N(separation * e_{c-1}, I). Labels alternate 0,1,..,C-1 and
/// each bag is its own patient. Features are rounded to float32 so the
/// in-memory dataset equals what the bag files store.
inline SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> bag_size(cfg.min_instances, cfg.max_instances);
  SyntheticDataset ds;
  const int width = static_cast<int>(std::to_string(cfg.bag_count - 1).size());
  for (std::size_t b = 0; b < cfg.bag_count; ++b) {
    const std::size_t n = bag_size(rng), d = cfg.feature_dim;
    const int label = static_cast<int>(b % cfg.class_count);
    std::vector<int> flags(n, 0);
    if (label > 0) {
      const std::size_t k = witness_count(n, cfg.witness_rate);
      std::vector<std::size_t> idx;
      if (cfg.spatial_clustering) {
        idx = detail::clustered_witnesses(n, k, rng);
      } else {
        idx.resize(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(k);
      }
      for (auto i : idx) flags[i] = 1;
    }
    Tensor x({n, d});
    auto xs = x.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double v = noise(rng);
        if (flags[i] && j == static_cast<std::size_t>(label - 1)) v += cfg.cluster_separation;
        xs[i * d + j] = static_cast<double>(static_cast<float>(v));
      }
    std::ostringstream id;
    id << "bag_" << std::setw(width) << std::setfill('0') << b;
    std::ostringstream patient;
    patient << "patient_" << std::setw(width) << std::setfill('0') << b;
    ds.bags.push_back({x, label, id.str(), patient.str()});
    ds.instance_labels.push_back(std::move(flags));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Bag files
//
//   "MILB" | version u32 = 1 | n u32 | d u32 | label u32 |
//   patient-id length u32 | patient-id UTF-8 bytes | n*d f32, row-major
// All little-endian.

inline constexpr std::uint32_t kBagVersion = 1;

inline std::vector<char> encode_bag(const Bag& bag) {
  if (bag.size() == 0) throw EmptyBagError();
  if (bag.label < 0) throw ParameterError("bag label must be nonnegative");
  io::ByteWriter w;
  w.bytes("MILB");
  w.u32(kBagVersion);
  w.u32(static_cast<std::uint32_t>(bag.size()));
  w.u32(static_cast<std::uint32_t>(bag.dim()));
  w.u32(static_cast<std::uint32_t>(bag.label));
  w.u32(static_cast<std::uint32_t>(bag.patient_id.size()));
  w.bytes(bag.patient_id);
  for (double v : bag.instances.data()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline Bag decode_bag(std::vector<char> bytes, std::string id = {}) {
  io::ByteReader r(std::move(bytes));
  if (r.bytes(4, "magic") != "MILB") throw FormatError("not a bag file (bad magic)", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kBagVersion)
    throw FormatError("unsupported bag version " + std::to_string(v), version_at);
  const std::size_t dims_at = r.offset();
  const std::uint32_t n = r.u32("n"), d = r.u32("d");
  if (n == 0 || d == 0) throw FormatError("bag has zero extent", dims_at);
  Bag bag;
  bag.label = static_cast<int>(r.u32("label"));
  const std::uint32_t pid_len = r.u32("patient id length");
  bag.patient_id = r.bytes(pid_len, "patient id");
  const std::size_t payload = static_cast<std::size_t>(n) * d * sizeof(float);
  if (r.remaining() < payload) throw FormatError("truncated instance payload", r.offset());
  std::vector<double> values(static_cast<std::size_t>(n) * d);
  for (auto& v : values) v = static_cast<double>(r.f32("instance payload"));
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload", r.offset());
  bag.instances = Tensor({n, d}, std::move(values));
  bag.id = std::move(id);
  return bag;
}

inline void write_bag(const Bag& bag, const std::string& path) { io::write_file(path, encode_bag(bag)); }

inline Bag read_bag(const std::string& path) {
  return decode_bag(io::read_file(path), std::filesystem::path(path).stem().string());
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, val, test, unassigned };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "";
  }
  return "";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s.empty()) return Split::unassigned;
  throw ParameterError("unknown split '" + s + "'");
}

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  std::string patient_id;
  Split split = Split::unassigned;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> in_split(Split s) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }
};

/// UTF-8 CSV with header `path,label,patient_id,split` and LF line endings.
inline std::string format_manifest(const Manifest& m) {
  std::string out = "path,label,patient_id,split\n";
  for (const auto& r : m.records) {
    for (const auto& field : {r.path, r.patient_id})
      if (field.find_first_of(",\n\r\"") != std::string::npos)
        throw ParameterError("manifest field contains a reserved character: " + field);
    out += r.path + ',' + std::to_string(r.label) + ',' + r.patient_id + ',' + to_string(r.split) + '\n';
  }
  return out;
}

inline Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != "path,label,patient_id,split")
    throw FormatError("manifest header must be 'path,label,patient_id,split'", 0);
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) f.push_back(cell);
      if (line.back() == ',') f.emplace_back();
      if (f.size() != 4) throw FormatError("manifest row needs 4 fields: '" + line + "'", offset);
      ManifestRecord r;
      r.path = f[0];
      try {
        std::size_t used = 0;
        r.label = std::stoi(f[1], &used);
        if (used != f[1].size() || r.label < 0) throw std::invalid_argument("label");
        r.split = parse_split(f[3]);
      } catch (const std::exception&) {
        throw FormatError("bad label or split in manifest row '" + line + "'", offset);
      }
      r.patient_id = f[2];
      m.records.push_back(std::move(r));
    }
    offset += line.size() + 1;
  }
  return m;
}

inline void write_manifest(const Manifest& m, const std::string& path) {
  const std::string text = format_manifest(m);
  io::write_file(path, std::vector<char>(text.begin(), text.end()));
}

inline Manifest read_manifest(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

/// Patient-level split: patients are shuffled with `seed` and dealt into
/// train/val/test by largest-remainder rounding of ratio * patient count.
inline Manifest split_dataset(Manifest manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ParameterError("split ratios must be nonnegative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("split ratios must sum to 1");
  std::vector<std::string> patients;
  for (const auto& r : manifest.records)
    if (std::find(patients.begin(), patients.end(), r.patient_id) == patients.end()) patients.push_back(r.patient_id);
  const std::size_t wanted = static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));
  if (patients.size() < wanted)
    throw ParameterError("only " + std::to_string(patients.size()) + " patients for " + std::to_string(wanted) + " splits");

  std::sort(patients.begin(), patients.end());
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);

  const auto p = static_cast<double>(patients.size());
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = ratios[s] * p;
    counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[s] = exact - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  while (assigned < patients.size()) {
    const auto s = static_cast<std::size_t>(std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++counts[s];
    remainder[s] = -1.0;
    ++assigned;
  }
  // Every requested split gets at least one patient.
  for (std::size_t s = 0; s < 3; ++s)
    if (ratios[s] > 0.0 && counts[s] == 0) {
      const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      --counts[donor];
      ++counts[s];
    }

  std::map<std::string, Split> assignment;
  std::size_t i = 0;
  const std::array<Split, 3> order{Split::train, Split::val, Split::test};
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < counts[s]; ++c) assignment[patients[i++]] = order[s];
  for (auto& r : manifest.records) r.split = assignment.at(r.patient_id);
  return manifest;
}

/// Writes every bag as <id>.milb into `dir`; returns the matching unassigned manifest.
inline Manifest write_dataset(const std::vector<Bag>& bags, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  for (const auto& b : bags) {
    const std::string name = b.id + ".milb";
    write_bag(b, (std::filesystem::path(dir) / name).string());
    m.records.push_back({name, b.label, b.patient_id, Split::unassigned});
  }
  return m;
}

inline std::vector<Bag> load_split(const Manifest& m, const std::string& dir, Split split) {
  std::vector<Bag> bags;
  for (const auto& r : m.records)
    if (r.split == split) {
      Bag b = read_bag((std::filesystem::path(dir) / r.path).string());
      if (b.label != r.label) throw FormatError("label in '" + r.path + "' disagrees with manifest", 16);
      bags.push_back(std::move(b));
    }
  return bags;
}

}  // namespace transmil
