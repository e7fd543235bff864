#pragma once

#include <functional>

#include "woodflow/layers.hpp"
#include "woodflow/linalg.hpp"
#include "woodflow/tensor.hpp"

namespace woodflow {

// Brute-force references for the test suite. Everything here is O(D^3) or
// worse on purpose.

// Maps a (B, ...) batch to a (B, ...) batch, samples independent.
using BatchMap = std::function<Tensor(const Tensor&)>;

constexpr std::size_t kMaxOracleDim = 4096;

// Column j = f(e_j) - f(0), evaluated as one batch of D + 1 inputs. Exact for
// maps that are linear up to a constant offset. `sample_shape` excludes the
// batch axis. Refuses D > kMaxOracleDim.
Tensor dense_jacobian_linear(const BatchMap& f, const Shape& sample_shape);
Tensor dense_jacobian_linear(FlowLayer& layer, const Shape& sample_shape);

// Central differences at the single sample x (shape (1, ...)).
Tensor fd_jacobian(const BatchMap& f, const Tensor& x, real step);
Tensor fd_jacobian(FlowLayer& layer, const Tensor& x, real step);

// slogdet by LU with full pivoting; shares no code with slogdet_lu.
SLogDet brute_logdet(const Tensor& jacobian);

}  // namespace woodflow
