#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "transmil/errors.hpp"

namespace transmil {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Tracks the largest single tensor buffer created since the last reset.
/// Used to assert that linear-memory code paths never allocate an s x s matrix.
class AllocationProbe {
 public:
  static void reset() { peak().store(0, std::memory_order_relaxed); }
  static std::size_t peak_elements() { return peak().load(std::memory_order_relaxed); }

  static void note(std::size_t elements) {
    auto& p = peak();
    std::size_t cur = p.load(std::memory_order_relaxed);
    while (elements > cur && !p.compare_exchange_weak(cur, elements, std::memory_order_relaxed)) {
    }
  }

 private:
  static std::atomic<std::size_t>& peak() {
    static std::atomic<std::size_t> value{0};
    return value;
  }
};

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, the way
/// parameters are shared between a model, its optimizer and the tape.
/// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::TensorStorage>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_size(impl_->shape), fill);
    AllocationProbe::note(impl_->data.size());
  }

  Tensor(Shape shape, std::vector<double> data) : Tensor(std::move(shape)) {
    if (data.size() != impl_->data.size())
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(impl_->shape));
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, v); }

  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor from_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.impl_->data) v = dist(rng);
    return t;
  }

  template <class Rng>
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.impl_->data) v = dist(rng);
    return t;
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.at(1); }

  std::span<const double> data() const { return impl_->data; }
  /// Raw write access. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() const { return impl_->data; }
  const double* ptr() const { return impl_->data.data(); }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape[1] + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on)
      impl_->grad.assign(impl_->data.size(), 0.0);
    else
      impl_->grad.clear();
    return *this;
  }

  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() const { return impl_->grad; }
  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  /// Same values, fresh storage, no gradient tracking.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }
  Tensor clone() const {
    Tensor t = detach();
    if (requires_grad()) t.set_requires_grad(true);
    return t;
  }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorStorage> impl_;
};

/// Ordered record of differentiable operations executed while the tape is active.
///
/// Constructing a tape makes it the active tape of the current thread; the
/// destructor restores the previous one. Ops record a backward closure only
/// when a tape is active and one of their operands requires a gradient.
class GradTape {
 public:
  GradTape() : previous_(active_slot()) { active_slot() = this; }
  ~GradTape() { active_slot() = previous_; }

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_slot(); }

  void record(Tensor output, std::function<void()> backward_fn) {
    entries_.push_back({std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  /// Intermediate gradients are reset first, so calling this twice
  /// accumulates twice into the leaves.
  void backward(Tensor loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any tracked tensor");
    for (auto& e : entries_) e.output.zero_grad();
    loss.mutable_grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

 private:
  struct Entry {
    Tensor output;
    std::function<void()> backward;
  };

  static GradTape*& active_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }

  std::vector<Entry> entries_;
  GradTape* previous_;
};

inline void backward(const Tensor& loss, GradTape& tape) { tape.backward(loss); }

namespace detail {

/// True when an op over `inputs` must be recorded on the active tape.
inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (GradTape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

inline bool tracking(std::span<const Tensor> inputs) {
  if (GradTape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

template <class Fn>
void record(Tensor& out, Fn&& fn) {
  out.set_requires_grad(true);
  GradTape::active()->record(out, std::forward<Fn>(fn));
}

}  // namespace detail

}  // namespace transmil
