#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hessdiag {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major block of doubles. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({}, {value}); }
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  // rank-2 accessors; rows() of a vector is its length
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const noexcept { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& storage() noexcept { return values_; }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }

  double item() const;
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<double> values_;
};

}  // namespace hessdiag
