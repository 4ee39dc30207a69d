#include "fedprior/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "fedprior/errors.hpp"

namespace fedprior {

std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape dims, double fill) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(dims_));
  }
  data_.assign(shape_size(dims_), fill);
}

Tensor::Tensor(Shape dims, std::vector<double> values) : dims_(std::move(dims)), data_(std::move(values)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(dims_));
  }
  if (shape_size(dims_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                     shape_str(dims_));
  }
}

Tensor Tensor::complex_zeros(Shape dims) {
  dims.push_back(2);
  Tensor t(std::move(dims));
  t.complex_ = true;
  return t;
}

void Tensor::set_complex(bool on) {
  if (on && (dims_.empty() || dims_.back() != 2)) {
    throw ShapeError("complex tensor needs a trailing dimension of 2, got " + shape_str(dims_));
  }
  complex_ = on;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of dims " + shape_str(dims_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape dims) const& {
  Tensor t = *this;
  return std::move(t).reshaped(std::move(dims));
}

Tensor Tensor::reshaped(Shape dims) && {
  if (shape_size(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
  }
  dims_ = std::move(dims);
  if (complex_ && (dims_.empty() || dims_.back() != 2)) complex_ = false;
  return std::move(*this);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() && a.is_complex() == b.is_complex() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(what) + ": dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
}

}  // namespace fedprior
