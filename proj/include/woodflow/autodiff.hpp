#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "woodflow/linalg.hpp"
#include "woodflow/tensor.hpp"

namespace woodflow {

// A named learnable tensor. Layers own their parameters; the tape refers to
// them by address for the duration of one forward/backward pass.
struct Parameter {
  std::string name;
  Tensor value;
};

// Parameter name -> gradient with the parameter's shape. Every parameter
// registered on the tape appears, with zeros if the loss does not reach it.
using GradMap = std::map<std::string, Tensor>;

class Tape;

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// the node list is already topologically sorted.
class Tape {
 public:
  // Accumulates gradients during backward(); indexed by node id.
  class Grads {
   public:
    explicit Grads(std::size_t n) : slots_(n) {}
    void add(std::size_t id, const Tensor& g);
    void add(std::size_t id, Tensor&& g);
    bool has(std::size_t id) const { return slots_[id].present; }
    const Tensor& get(std::size_t id) const { return slots_[id].value; }

   private:
    struct Slot {
      bool present = false;
      Tensor value;
    };
    std::vector<Slot> slots_;
  };

  using BackwardFn = std::function<void(const Tensor& grad_out, Grads& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Registers a parameter as a leaf; registering the same parameter twice
  // returns the existing node.
  Var param(Parameter& p);

  // Records a derived node. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Parameter*>& parameters() const noexcept { return params_; }

  // Reverse pass from a scalar loss. Does not mutate the tape, so repeated
  // calls give bitwise-identical results.
  GradMap backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Parameter*> params_;
  std::vector<std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// ---- Primitives ------------------------------------------------------------
namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var a, real s);
Var mul_scalar(Var a, real s);
Var exp(Var a);
Var log(Var a);
// log|a|, derivative 1/a.
Var log_abs(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var square(Var a);

// Sum of all elements to a scalar, and the mean.
Var sum(Var a);
Var mean(Var a);
// Reduce one axis away.
Var sum_axis(Var a, std::size_t axis);
// Repeat size-1 axes to match `shape` (ranks must agree).
Var broadcast_to(Var a, const Shape& shape);

Var reshape(Var a, const Shape& shape);
Var permute(Var a, const std::vector<std::size_t>& axes);
Var reshape_permute(Var a, const std::vector<std::size_t>& axes, const Shape& shape);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len);
Var concat(Var a, Var b, std::size_t axis);

Var matmul(Var a, Var b);
// Batched channel mixing, see woodflow::channel_mix.
Var channel_mix(Var x, Var m);
Var conv2d(Var x, Var weight, Var bias);

// Scalar log|det a|. Raises SingularMatrixError(where) for a singular input.
Var slogdet(Var a, const std::string& where);
Var inverse(Var a, const std::string& where);

}  // namespace ad

inline Var operator+(Var a, Var b) { return ad::add(a, b); }
inline Var operator-(Var a, Var b) { return ad::sub(a, b); }
inline Var operator*(Var a, Var b) { return ad::mul(a, b); }

// ---- Gradient checking ------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  real max_abs_err = 0;
  // max_abs_err / max(|analytic|_inf, |numeric|_inf, 1e-6)
  real max_rel_err = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass() const;
  real worst_rel() const;
};

// Compares backward() against central differences for every element of every
// parameter. `f` must build a scalar loss on the given tape and be
// deterministic. Non-finite values raise NumericalError naming the parameter.
GradCheckReport check_gradients(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                real step, real tol);

}  // namespace woodflow
