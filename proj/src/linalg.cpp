#include "woodflow/linalg.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "woodflow/errors.hpp"

namespace woodflow {

LuFactors lu_factor(const Tensor& a) {
  if (a.ndim() != 2 || a.rows() != a.cols()) {
    throw DimensionError("LU factorization needs a square matrix, got " + shape_str(a.shape()));
  }
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n), 1, false};
  std::iota(f.perm.begin(), f.perm.end(), std::size_t{0});
  Tensor& lu = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    real best = std::abs(lu(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      const real v = std::abs(lu(i, k));
      if (v > best) {
        best = v;
        piv = i;
      }
    }
    if (best == real(0)) {
      f.singular = true;
      continue;
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      std::swap(f.perm[k], f.perm[piv]);
      f.parity = -f.parity;
    }
    const real inv = real(1) / lu(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const real l = lu(i, k) * inv;
      lu(i, k) = l;
      if (l == real(0)) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= l * lu(k, j);
    }
  }
  return f;
}

SLogDet slogdet_from_lu(const LuFactors& f) {
  if (f.singular) return {0, -std::numeric_limits<real>::infinity()};
  SLogDet d{f.parity, 0};
  for (std::size_t i = 0; i < f.size(); ++i) {
    const real u = f.lu(i, i);
    if (u < 0) d.sign = -d.sign;
    d.logabs += std::log(std::abs(u));
  }
  return d;
}

SLogDet slogdet_lu(const Tensor& a) { return slogdet_from_lu(lu_factor(a)); }

Tensor lu_solve(const LuFactors& f, const Tensor& b) {
  const std::size_t n = f.size();
  if (b.ndim() != 2 || b.rows() != n) throw DimensionError("lu_solve: right-hand side has wrong shape");
  if (f.singular) throw SingularMatrixError("lu_solve");
  const std::size_t m = b.cols();
  Tensor x(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x(i, j) = b(f.perm[i], j);
  // Forward substitution with unit-lower L.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) {
      const real l = f.lu(i, k);
      if (l == real(0)) continue;
      for (std::size_t j = 0; j < m; ++j) x(i, j) -= l * x(k, j);
    }
  // Back substitution with U.
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) {
      const real u = f.lu(i, k);
      if (u == real(0)) continue;
      for (std::size_t j = 0; j < m; ++j) x(i, j) -= u * x(k, j);
    }
    const real inv = real(1) / f.lu(i, i);
    for (std::size_t j = 0; j < m; ++j) x(i, j) *= inv;
  }
  return x;
}

Tensor lu_inverse(const LuFactors& f) { return lu_solve(f, Tensor::identity(f.size())); }

Tensor inverse_small(const Tensor& a, const std::string& where) {
  const auto f = lu_factor(a);
  if (f.singular) throw SingularMatrixError(where);
  return lu_inverse(f);
}

real require_nonsingular(const SLogDet& d, const std::string& where) {
  if (d.singular()) throw SingularMatrixError(where);
  return d.logabs;
}

}  // namespace woodflow
