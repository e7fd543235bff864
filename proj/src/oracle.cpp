#include "woodflow/oracle.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "woodflow/errors.hpp"

namespace woodflow {

namespace {

Shape batched(std::size_t b, const Shape& s) {
  Shape out{b};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

BatchMap layer_map(FlowLayer& layer) {
  return [&layer](const Tensor& x) { return layer.evaluate(x).y; };
}

}  // namespace

Tensor dense_jacobian_linear(const BatchMap& f, const Shape& sample_shape) {
  const std::size_t d = shape_numel(sample_shape);
  if (d > kMaxOracleDim) {
    throw ContractError("dense_jacobian_linear: dimension " + std::to_string(d) + " exceeds the oracle limit " +
                        std::to_string(kMaxOracleDim));
  }
  Tensor basis(batched(d + 1, sample_shape));
  for (std::size_t j = 0; j < d; ++j) basis[(j + 1) * d + j] = 1;
  const Tensor y = f(basis);
  if (y.numel() % (d + 1)) throw DimensionError("dense_jacobian_linear: output batch size mismatch");
  const std::size_t m = y.numel() / (d + 1);
  Tensor jac(Shape{m, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < m; ++i) jac(i, j) = y[(j + 1) * m + i] - y[i];
  return jac;
}

Tensor dense_jacobian_linear(FlowLayer& layer, const Shape& sample_shape) {
  return dense_jacobian_linear(layer_map(layer), sample_shape);
}

Tensor fd_jacobian(const BatchMap& f, const Tensor& x, real step) {
  if (!(step > 0)) throw ContractError("fd_jacobian: step must be positive");
  if (x.ndim() < 1 || x.dim(0) != 1) throw DimensionError("fd_jacobian: expected a single sample (1, ...)");
  const std::size_t d = x.numel();
  if (d > kMaxOracleDim) throw ContractError("fd_jacobian: dimension exceeds the oracle limit");
  Shape s = x.shape();
  s[0] = 2 * d;
  Tensor probes(s);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      probes[2 * j * d + k] = x[k];
      probes[(2 * j + 1) * d + k] = x[k];
    }
    probes[2 * j * d + j] += step;
    probes[(2 * j + 1) * d + j] -= step;
  }
  const Tensor y = f(probes);
  if (!all_finite(y)) throw NumericalError("fd_jacobian: non-finite output near the evaluation point");
  const std::size_t m = y.numel() / (2 * d);
  Tensor jac(Shape{m, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < m; ++i) jac(i, j) = (y[2 * j * m + i] - y[(2 * j + 1) * m + i]) / (2 * step);
  return jac;
}

Tensor fd_jacobian(FlowLayer& layer, const Tensor& x, real step) { return fd_jacobian(layer_map(layer), x, step); }

SLogDet brute_logdet(const Tensor& jacobian) {
  if (jacobian.ndim() != 2 || jacobian.rows() != jacobian.cols()) {
    throw DimensionError("brute_logdet: expected a square matrix, got " + shape_str(jacobian.shape()));
  }
  const std::size_t n = jacobian.rows();
  Tensor a = jacobian;
  SLogDet out;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pr = k, pc = k;
    real best = -1;
    for (std::size_t i = k; i < n; ++i)
      for (std::size_t j = k; j < n; ++j)
        if (std::abs(a(i, j)) > best) {
          best = std::abs(a(i, j));
          pr = i;
          pc = j;
        }
    if (best == 0) return {0, -std::numeric_limits<real>::infinity()};
    if (pr != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(pr, j));
      out.sign = -out.sign;
    }
    if (pc != k) {
      for (std::size_t i = 0; i < n; ++i) std::swap(a(i, k), a(i, pc));
      out.sign = -out.sign;
    }
    const real piv = a(k, k);
    if (piv < 0) out.sign = -out.sign;
    out.logabs += std::log(std::abs(piv));
    for (std::size_t i = k + 1; i < n; ++i) {
      const real f = a(i, k) / piv;
      for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= f * a(k, j);
    }
  }
  return out;
}

}  // namespace woodflow
