#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
///
/// Most row-wise operations treat an array of rank >= 1 as a matrix whose
/// row count is the product of the leading dimensions and whose column count
/// is the last dimension.
class Array {
 public:
  Array() : shape_{}, data_(1, 0.0) {}

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ConfigError("array data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
    }
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  static Array matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Array(Shape{rows, cols}, std::vector<double>(values));
  }

  static Array vector(std::initializer_list<double> values) {
    return Array(Shape{values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  double item() const {
    if (data_.size() != 1) throw ContractError("item() on array of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Array reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Array(std::move(shape), data_);
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Array& a, const Array& b) {
  if (a.shape() != b.shape()) throw ConfigError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace kvlab
