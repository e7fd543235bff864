#include "woodflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "woodflow/errors.hpp"

namespace woodflow {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, real fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape_) + " cannot hold " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::vector(std::initializer_list<real> values) {
  return Tensor(Shape{values.size()}, std::vector<real>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<real> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1;
  return t;
}

real Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.ndim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

Tensor scaled(const Tensor& a, real s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

real max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("max_abs_diff: element count mismatch");
  real m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

real max_abs(const Tensor& a) {
  real m = 0;
  for (real v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](real v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  const real* pa = a.raw();
  const real* pb = b.raw();
  real* po = out.raw();
  for (std::size_t i = 0; i < m; ++i) {
    real* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = pa[i * k + p];
      if (av == real(0)) continue;
      const real* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  const real* pa = a.raw();
  const real* pb = b.raw();
  real* po = out.raw();
  for (std::size_t p = 0; p < k; ++p) {
    const real* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const real av = pa[p * m + i];
      if (av == real(0)) continue;
      real* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out(Shape{m, n});
  const real* pa = a.raw();
  const real* pb = b.raw();
  real* po = out.raw();
  for (std::size_t i = 0; i < m; ++i) {
    const real* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const real* brow = pb + j * k;
      real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      po[i * n + j] = acc;
    }
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t nd = x.ndim();
  if (axes.size() != nd) throw DimensionError("permute: axis count does not match rank");
  std::vector<bool> seen(nd, false);
  for (auto a : axes) {
    if (a >= nd || seen[a]) throw DimensionError("permute: invalid axis permutation");
    seen[a] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(axes[i]);
  Tensor out(out_shape);
  if (out.numel() == 0) return out;

  // Input strides, reordered to follow the output axes.
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  std::vector<std::size_t> stride(nd);
  for (std::size_t i = 0; i < nd; ++i) stride[i] = in_stride[axes[i]];

  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  const real* px = x.raw();
  real* po = out.raw();
  const std::size_t total = out.numel();
  for (std::size_t o = 0; o < total; ++o) {
    po[o] = px[src];
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv.at(axes[i]) = i;
  return inv;
}

Tensor reshape_permute(const Tensor& x, const std::vector<std::size_t>& axes, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape_permute: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  }
  return permute(x, axes).reshaped(std::move(new_shape));
}

Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.ndim() || start + len > x.dim(axis)) {
    throw DimensionError("slice_axis: range out of bounds for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  Shape s = x.shape();
  s[axis] = len;
  Tensor out(s);
  const std::size_t n_in = x.dim(axis);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.raw() + (o * n_in + start) * inner, len * inner, out.raw() + o * len * inner);
  }
  return out;
}

Tensor concat_axis(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.ndim() != b.ndim() || axis >= a.ndim()) throw DimensionError("concat_axis: rank mismatch");
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat_axis: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  Shape s = a.shape();
  s[axis] = a.dim(axis) + b.dim(axis);
  Tensor out(s);
  const std::size_t na = a.dim(axis) * inner, nb = b.dim(axis) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.raw() + o * na, na, out.raw() + o * (na + nb));
    std::copy_n(b.raw() + o * nb, nb, out.raw() + o * (na + nb) + na);
  }
  return out;
}

namespace {

struct ConvDims {
  std::size_t batch, cin, h, w, cout, k;
};

ConvDims conv_dims(const Shape& x, const Shape& weight) {
  if (x.size() != 4 || weight.size() != 4) throw DimensionError("conv2d: expected 4-d input and weight");
  if (weight[1] != x[1] || weight[2] != weight[3] || weight[2] % 2 == 0) {
    throw DimensionError("conv2d: weight " + shape_str(weight) + " incompatible with input " + shape_str(x));
  }
  return {x[0], x[1], x[2], x[3], weight[0], weight[2]};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto d = conv_dims(x.shape(), weight.shape());
  if (bias.numel() != d.cout) throw DimensionError("conv2d: bias length mismatch");
  Tensor out(Shape{d.batch, d.cout, d.h, d.w});
  const long pad = static_cast<long>(d.k / 2);
  const long H = static_cast<long>(d.h), W = static_cast<long>(d.w);
  const std::size_t plane = d.h * d.w;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      real* op = out.raw() + (b * d.cout + co) * plane;
      std::fill_n(op, plane, bias[co]);
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const real* ip = x.raw() + (b * d.cin + ci) * plane;
        const real* wp = weight.raw() + (co * d.cin + ci) * d.k * d.k;
        for (long ky = 0; ky < static_cast<long>(d.k); ++ky) {
          for (long kx = 0; kx < static_cast<long>(d.k); ++kx) {
            const real wv = wp[ky * static_cast<long>(d.k) + kx];
            if (wv == real(0)) continue;
            const long dy = ky - pad, dx = kx - pad;
            const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
            for (long yy = y0; yy < y1; ++yy) {
              real* orow = op + yy * W;
              const real* irow = ip + (yy + dy) * W + dx;
              for (long xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape) {
  const auto d = conv_dims(input_shape, weight.shape());
  Tensor gx(input_shape);
  const long pad = static_cast<long>(d.k / 2);
  const long H = static_cast<long>(d.h), W = static_cast<long>(d.w);
  const std::size_t plane = d.h * d.w;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const real* gp = grad_out.raw() + (b * d.cout + co) * plane;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        real* xp = gx.raw() + (b * d.cin + ci) * plane;
        const real* wp = weight.raw() + (co * d.cin + ci) * d.k * d.k;
        for (long ky = 0; ky < static_cast<long>(d.k); ++ky) {
          for (long kx = 0; kx < static_cast<long>(d.k); ++kx) {
            const real wv = wp[ky * static_cast<long>(d.k) + kx];
            if (wv == real(0)) continue;
            const long dy = ky - pad, dx = kx - pad;
            const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
            for (long yy = y0; yy < y1; ++yy) {
              const real* grow = gp + yy * W;
              real* xrow = xp + (yy + dy) * W + dx;
              for (long xx = x0; xx < x1; ++xx) xrow[xx] += wv * grow[xx];
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape) {
  const auto d = conv_dims(x.shape(), weight_shape);
  Tensor gw(weight_shape);
  const long pad = static_cast<long>(d.k / 2);
  const long H = static_cast<long>(d.h), W = static_cast<long>(d.w);
  const std::size_t plane = d.h * d.w;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const real* gp = grad_out.raw() + (b * d.cout + co) * plane;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const real* ip = x.raw() + (b * d.cin + ci) * plane;
        real* wp = gw.raw() + (co * d.cin + ci) * d.k * d.k;
        for (long ky = 0; ky < static_cast<long>(d.k); ++ky) {
          for (long kx = 0; kx < static_cast<long>(d.k); ++kx) {
            const long dy = ky - pad, dx = kx - pad;
            const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
            real acc = 0;
            for (long yy = y0; yy < y1; ++yy) {
              const real* grow = gp + yy * W;
              const real* irow = ip + (yy + dy) * W + dx;
              for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
            }
            wp[ky * static_cast<long>(d.k) + kx] += acc;
          }
        }
      }
    }
  }
  return gw;
}

Tensor channel_mix(const Tensor& x, const Tensor& m) {
  if (x.ndim() < 2 || m.ndim() != 2 || m.cols() != x.dim(1)) {
    throw DimensionError("channel_mix: " + shape_str(m.shape()) + " cannot act on " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = m.rows();
  const std::size_t n = x.numel() / std::max<std::size_t>(1, batch * cin);
  Shape s = x.shape();
  s[1] = cout;
  Tensor out(s);
  for (std::size_t b = 0; b < batch; ++b) {
    const real* xb = x.raw() + b * cin * n;
    real* ob = out.raw() + b * cout * n;
    for (std::size_t i = 0; i < cout; ++i) {
      real* orow = ob + i * n;
      for (std::size_t j = 0; j < cin; ++j) {
        const real mv = m(i, j);
        if (mv == real(0)) continue;
        const real* xrow = xb + j * n;
        for (std::size_t p = 0; p < n; ++p) orow[p] += mv * xrow[p];
      }
    }
  }
  return out;
}

Tensor spatial_mix(const Tensor& x, const Tensor& m) {
  if (x.ndim() < 2) throw DimensionError("spatial_mix: input must have batch and channel axes");
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t n = rows ? x.numel() / rows : 0;
  if (m.ndim() != 2 || m.rows() != n) {
    throw DimensionError("spatial_mix: " + shape_str(m.shape()) + " cannot act on " + shape_str(x.shape()));
  }
  Tensor flat = matmul(x.reshaped(Shape{rows, n}), m);
  return flat.reshaped(Shape{x.dim(0), x.dim(1), m.cols()});
}

}  // namespace woodflow
