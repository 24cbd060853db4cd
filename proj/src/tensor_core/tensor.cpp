#include "mg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    if (extent <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    n *= extent;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<Impl>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->values = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<Impl>()) {
  const auto n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::make_shared<std::vector<float>>(std::move(values));
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl().values->size()); }

std::span<float> Tensor::data() { return {*impl().values}; }
std::span<const float> Tensor::data() const { return {*impl().values}; }

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return (*impl().values)[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl().requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<float> Tensor::grad() {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.values->size(), 0.0f);
  return {im.grad};
}

std::span<const float> Tensor::grad() const {
  const auto& im = impl();
  if (im.grad.empty()) throw std::logic_error("tensor has no gradient buffer");
  return {im.grad};
}

void Tensor::zero_grad() {
  auto& im = impl();
  if (!im.grad.empty()) std::fill(im.grad.begin(), im.grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  return Tensor(shape(), *impl().values);
}

Tensor Tensor::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<Impl>();
  out.impl_->shape = shape();
  out.impl_->values = impl().values;
  return out;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), *impl().values);
}

bool Tensor::all_finite() const {
  const auto d = data();
  return std::all_of(d.begin(), d.end(), [](float v) { return std::isfinite(v); });
}

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  output.set_requires_grad(true);
  entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (auto& e : entries_) e.output.zero_grad();
  Tensor seed = loss;
  seed.grad()[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

}  // namespace mg
