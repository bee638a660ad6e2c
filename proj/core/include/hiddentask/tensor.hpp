#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace hiddentask {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor holds one element.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  /// Rows [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const;
  std::span<const double> row_span(std::size_t row) const;
  std::span<double> row_span(std::size_t row);
  std::size_t row_width() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

Tensor sign(const Tensor& t);
/// Elementwise clamp into [lo, hi]; throws ContractError when lo > hi.
Tensor clip(const Tensor& t, double lo, double hi);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);
/// Stacks rank-N tensors of equal row width along the leading axis.
Tensor concat_rows(std::span<const Tensor> parts);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace hiddentask
