#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fedprior {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& dims);
std::string shape_str(const Shape& dims);

/// Dense row-major array of 64-bit floats.
///
/// A complex tensor stores interleaved (re, im) pairs in a trailing dimension
/// of size 2; `dims()` always includes that trailing dimension.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape dims, double fill = 0.0);
  Tensor(Shape dims, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  /// Complex zeros of logical shape `dims` (stored with a trailing 2).
  static Tensor complex_zeros(Shape dims);

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  bool is_complex() const noexcept { return complex_; }
  /// Marks the tensor as complex; requires a trailing dimension of size 2.
  void set_complex(bool on);

  std::span<double> values() & noexcept { return data_; }
  std::span<const double> values() const& noexcept { return data_; }
  // A span into a temporary would dangle.
  std::span<const double> values() const&& = delete;
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  double item() const;
  Tensor reshaped(Shape dims) const&;
  Tensor reshaped(Shape dims) &&;

  bool all_finite() const noexcept;
  void fill(double v);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape dims_;
  std::vector<double> data_;
  bool complex_ = false;
};

/// Byte-level equality, distinguishing -0.0 from 0.0 and NaN payloads.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Throws ShapeError unless `a` and `b` have identical dims.
void require_same_dims(const Tensor& a, const Tensor& b, const char* what);

}  // namespace fedprior
