#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace woodflow {

#ifdef WOODFLOW_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. An empty shape denotes a scalar holding one element.
class Tensor {
 public:
  Tensor() : data_(1, real(0)) {}
  explicit Tensor(Shape shape, real fill = real(0));
  Tensor(Shape shape, std::vector<real> data);

  static Tensor scalar(real v) { return Tensor(Shape{}, std::vector<real>{v}); }
  static Tensor vector(std::initializer_list<real> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<real>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* raw() noexcept { return data_.data(); }
  const real* raw() const noexcept { return data_.data(); }
  std::vector<real>& storage() noexcept { return data_; }
  const std::vector<real>& storage() const noexcept { return data_; }

  real& operator[](std::size_t i) noexcept { return data_[i]; }
  real operator[](std::size_t i) const noexcept { return data_[i]; }

  // 2-d element access (row, col).
  real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  real operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  real item() const;

  // Same data under a new shape with equal element count.
  Tensor reshaped(Shape new_shape) const;

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<real> data_;
};

// ---- Elementwise and structural kernels -------------------------------------

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, real s);
Tensor transpose(const Tensor& a);

// Infinity norm of (a - b), treating both as flat arrays of equal shape.
real max_abs_diff(const Tensor& a, const Tensor& b);
real max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

// (m x k) * (k x n). Throws DimensionError on inner mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T * b and a * b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// out[..] = x permuted so that out axis i is input axis axes[i].
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& axes);

// Permute the axes, then reinterpret the row-major result under new_shape.
Tensor reshape_permute(const Tensor& x, const std::vector<std::size_t>& axes, Shape new_shape);

// Slice [start, start+len) along `axis`, and the matching concatenation.
Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat_axis(const Tensor& a, const Tensor& b, std::size_t axis);

// 2-d convolution over (B, Ci, H, W) with an odd square kernel (Co, Ci, k, k),
// stride 1, zero "same" padding, plus a per-output-channel bias.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Gradients of conv2d given the output gradient.
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape);

// Left-multiply the channel axis: out[b, i, p] = sum_j m(i, j) x[b, j, p] for a
// (B, C, H, W) input and an (C' x C) matrix.
Tensor channel_mix(const Tensor& x, const Tensor& m);
// Right-multiply the flattened spatial axis: out[b, i, q] = sum_p x[b, i, p] m(p, q)
// for (B, C, H, W) and (HW x Q); result is (B, C, Q).
Tensor spatial_mix(const Tensor& x, const Tensor& m);

}  // namespace woodflow
