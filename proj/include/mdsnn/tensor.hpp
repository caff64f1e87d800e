#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdsnn/error.hpp"

namespace mdsnn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. A default-constructed tensor is "undefined" (no
// shape, no data); every defined tensor has positive extents and
// numel(shape) == data.size().
template <typename Real = double>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)) {
    check_shape();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Real(1)); }

  // 1-D tensor from a list of values.
  static Tensor vector(std::vector<Real> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  const std::vector<Real>& values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  Real item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](Real v) { return std::isfinite(v); });
  }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto e : shape_) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         to_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

// Elementwise helpers on plain tensors (no tape).

template <typename Real, typename F>
Tensor<Real> map(const Tensor<Real>& x, F&& f) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <typename Real>
void require_same_shape(const char* op, const Tensor<Real>& a,
                        const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename Real>
Tensor<Real>& add_inplace(Tensor<Real>& acc, const Tensor<Real>& x) {
  require_same_shape("add_inplace", acc, x);
  for (std::size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
  return acc;
}

template <typename Real>
Real max_abs(const Tensor<Real>& x) {
  Real m = 0;
  for (auto v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

// Rows of the leading dimension, picked in the given order.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x,
                         std::span<const std::size_t> rows) {
  const std::size_t stride = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<Real> out;
  out.reserve(rows.size() * stride);
  for (auto r : rows) {
    if (r >= x.dim(0)) throw ShapeError("gather_rows: row out of range");
    auto begin = x.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor<Real>(std::move(shape), std::move(out));
}

// Concatenates along the leading dimension; trailing extents must agree.
template <typename Real>
Tensor<Real> concat_rows(std::span<const Tensor<Real>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Shape shape = parts.front().shape();
  shape[0] = 0;
  std::vector<Real> out;
  for (const auto& p : parts) {
    if (!std::equal(p.shape().begin() + 1, p.shape().end(),
                    parts.front().shape().begin() + 1,
                    parts.front().shape().end()) ||
        p.rank() != parts.front().rank()) {
      throw ShapeError("concat_rows: trailing shape mismatch " +
                       to_string(p.shape()) + " vs " +
                       to_string(parts.front().shape()));
    }
    shape[0] += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<Real>(std::move(shape), std::move(out));
}

}  // namespace mdsnn
