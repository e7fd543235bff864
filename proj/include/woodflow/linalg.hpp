#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "woodflow/tensor.hpp"

namespace woodflow {

// Sign and natural log of |det|. sign == 0 marks a singular matrix; callers
// that consume logabs must check it (see require_nonsingular).
struct SLogDet {
  int sign = 1;
  real logabs = 0;

  bool singular() const noexcept { return sign == 0; }
};

// Packed LU factorization with partial pivoting: P A = L U, unit-lower L and
// U stored together in `lu`; perm[i] is the source row of row i.
struct LuFactors {
  Tensor lu;
  std::vector<std::size_t> perm;
  int parity = 1;
  bool singular = false;

  std::size_t size() const { return perm.size(); }
};

LuFactors lu_factor(const Tensor& a);
SLogDet slogdet_from_lu(const LuFactors& f);
SLogDet slogdet_lu(const Tensor& a);

// Solves A X = B for X using the factorization of A.
Tensor lu_solve(const LuFactors& f, const Tensor& b);
Tensor lu_inverse(const LuFactors& f);

// Inverse of a (small) square matrix. `where` names the requester in the
// SingularMatrixError raised on an exact zero pivot.
Tensor inverse_small(const Tensor& a, const std::string& where = "inverse_small");

// Throws SingularMatrixError(where) if d.sign == 0, otherwise returns d.logabs.
real require_nonsingular(const SLogDet& d, const std::string& where);

}  // namespace woodflow
