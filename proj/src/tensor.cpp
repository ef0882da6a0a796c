#include "shortcut/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace shortcut {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw std::invalid_argument("tensor: " + std::to_string(values_.size()) +
                                " values for shape " + shape_string(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw std::invalid_argument("reshape " + shape_string(shape_) + " -> " +
                                shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::slice(std::size_t begin, std::size_t count) const {
  if (shape_.empty() || begin + count > shape_[0]) {
    throw std::out_of_range("slice out of range");
  }
  Shape s = shape_;
  s[0] = count;
  const std::size_t stride = values_.size() / shape_[0];
  std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                        values_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::sample(std::size_t n) const {
  Tensor one = slice(n, 1);
  Shape s(shape_.begin() + 1, shape_.end());
  return one.reshaped(std::move(s));
}

double Tensor::sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }

double Tensor::max() const {
  if (values_.empty()) throw std::logic_error("max of empty tensor");
  return *std::max_element(values_.begin(), values_.end());
}

double Tensor::min() const {
  if (values_.empty()) throw std::logic_error("min of empty tensor");
  return *std::min_element(values_.begin(), values_.end());
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) throw std::invalid_argument("shape mismatch in +=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) throw std::invalid_argument("shape mismatch in -=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : values_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw std::invalid_argument("stack of nothing");
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<double> v;
  v.reserve(shape_size(s));
  for (const Tensor& t : items) {
    if (t.shape() != items[0].shape()) throw std::invalid_argument("stack: ragged shapes");
    v.insert(v.end(), t.values().begin(), t.values().end());
  }
  return Tensor(std::move(s), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace shortcut
