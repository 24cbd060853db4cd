#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mg {

using Shape = std::vector<std::int64_t>;

/// Raised when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-range hyperparameters (dropout rate, fan-in, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/Inf or cannot be carried out numerically.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 tensor.
///
/// A Tensor is a reference-counted handle: copying the handle aliases the
/// same storage and gradient buffer, which is how parameters are shared
/// between a network and the computation traces that use them. Use clone()
/// for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor scalar(float value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float& at(std::int64_t flat_index) { return data()[static_cast<std::size_t>(flat_index)]; }
  float at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  /// Deep copy of the values; the copy does not require grad.
  Tensor clone() const;
  /// Handle sharing this tensor's values but excluded from gradient tracking.
  Tensor detach() const;
  /// Copy of the values with a different shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  bool all_finite() const;

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<float>> values;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  Impl& impl();
  const Impl& impl() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered record of executed differentiable operations (a gradient tape).
///
/// Ops append one entry after computing their output, so every entry's
/// inputs are either leaves or outputs of earlier entries.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  /// True when an op consuming `inputs` must record a backward entry.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;

  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  /// Accumulates d(loss)/d(leaf) into the grad buffer of every leaf that
  /// requires grad. Intermediate gradients are reset on each call, leaf
  /// gradients are not.
  void backward(const Tensor& loss);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace mg
