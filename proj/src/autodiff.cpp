#include "woodflow/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "woodflow/errors.hpp"

namespace woodflow {

void Tape::Grads::add(std::size_t id, const Tensor& g) {
  Slot& s = slots_[id];
  if (!s.present) {
    s.value = g;
    s.present = true;
    return;
  }
  auto dst = s.value.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::Grads::add(std::size_t id, Tensor&& g) {
  Slot& s = slots_[id];
  if (!s.present) {
    s.value = std::move(g);
    s.present = true;
    return;
  }
  auto dst = s.value.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i] == &p) return Var(this, param_nodes_[i]);
  }
  nodes_.push_back(Node{p.value, true, {}});
  params_.push_back(&p);
  param_nodes_.push_back(nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError("operation mixes nodes from different tapes");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

GradMap Tape::backward(Var loss) const {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  Grads grads(nodes_.size());
  grads.add(loss.id(), Tensor(loss.shape(), real(1)));
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || !grads.has(id)) continue;
    n.backward(grads.get(id), grads);
  }
  GradMap out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::size_t id = param_nodes_[i];
    out[params_[i]->name] = grads.has(id) ? grads.get(id) : Tensor(nodes_[id].value.shape());
  }
  return out;
}

namespace ad {
namespace {

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}

void require_same(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Maps each flat index of `big` onto the flat index of the broadcast source.
template <class F>
void for_each_broadcast(const Shape& small, const Shape& big, F f) {
  const std::size_t nd = big.size();
  std::vector<std::size_t> sstride(nd, 0);
  std::size_t acc = 1;
  for (std::size_t i = nd; i-- > 0;) {
    sstride[i] = small[i] == 1 ? 0 : acc;
    acc *= small[i];
  }
  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  const std::size_t total = shape_numel(big);
  for (std::size_t o = 0; o < total; ++o) {
    f(o, src);
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < big[d]) {
        src += sstride[d];
        break;
      }
      src -= sstride[d] * (big[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {a, b}, [tp = &t, ia, ib](const Tensor& g, Tape::Grads& gr) {
    if (tp->requires_grad(ia)) gr.add(ia, g);
    if (tp->requires_grad(ib)) gr.add(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {a, b}, [tp = &t, ia, ib](const Tensor& g, Tape::Grads& gr) {
    if (tp->requires_grad(ia)) gr.add(ia, g);
    if (tp->requires_grad(ib)) gr.add(ib, scaled(g, real(-1)));
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.record(hadamard(a.value(), b.value()), {a, b}, [tp = &t, ia, ib](const Tensor& g, Tape::Grads& gr) {
    if (tp->requires_grad(ia)) gr.add(ia, hadamard(g, tp->value(ib)));
    if (tp->requires_grad(ib)) gr.add(ib, hadamard(g, tp->value(ia)));
  });
}

Var div(Var a, Var b) {
  require_same(a, b, "div");
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  return t.record(std::move(out), {a, b}, [tp = &t, ia, ib](const Tensor& g, Tape::Grads& gr) {
    const Tensor& av = tp->value(ia);
    const Tensor& bv = tp->value(ib);
    if (tp->requires_grad(ia)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] /= bv[i];
      gr.add(ia, std::move(ga));
    }
    if (tp->requires_grad(ib)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= -av[i] / (bv[i] * bv[i]);
      gr.add(ib, std::move(gb));
    }
  });
}

Var add_scalar(Var a, real s) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(map_unary(a.value(), [s](real v) { return v + s; }), {a},
                  [ia](const Tensor& g, Tape::Grads& gr) { gr.add(ia, g); });
}

Var mul_scalar(Var a, real s) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(scaled(a.value(), s), {a},
                  [ia, s](const Tensor& g, Tape::Grads& gr) { gr.add(ia, scaled(g, s)); });
}

Var exp(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id(), io = t.size();
  return t.record(map_unary(a.value(), [](real v) { return std::exp(v); }), {a},
                  [tp = &t, ia, io](const Tensor& g, Tape::Grads& gr) { gr.add(ia, hadamard(g, tp->value(io))); });
}

Var log(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(map_unary(a.value(), [](real v) { return std::log(v); }), {a},
                  [tp = &t, ia](const Tensor& g, Tape::Grads& gr) {
                    Tensor ga = g;
                    const Tensor& av = tp->value(ia);
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] /= av[i];
                    gr.add(ia, std::move(ga));
                  });
}

Var log_abs(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(map_unary(a.value(), [](real v) { return std::log(std::abs(v)); }), {a},
                  [tp = &t, ia](const Tensor& g, Tape::Grads& gr) {
                    Tensor ga = g;
                    const Tensor& av = tp->value(ia);
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] /= av[i];
                    gr.add(ia, std::move(ga));
                  });
}

Var sigmoid(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id(), io = t.size();
  return t.record(map_unary(a.value(), [](real v) { return real(1) / (real(1) + std::exp(-v)); }), {a},
                  [tp = &t, ia, io](const Tensor& g, Tape::Grads& gr) {
                    Tensor ga = g;
                    const Tensor& s = tp->value(io);
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= s[i] * (real(1) - s[i]);
                    gr.add(ia, std::move(ga));
                  });
}

Var relu(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(map_unary(a.value(), [](real v) { return v > 0 ? v : real(0); }), {a},
                  [tp = &t, ia](const Tensor& g, Tape::Grads& gr) {
                    Tensor ga = g;
                    const Tensor& av = tp->value(ia);
                    for (std::size_t i = 0; i < ga.numel(); ++i)
                      if (!(av[i] > 0)) ga[i] = 0;
                    gr.add(ia, std::move(ga));
                  });
}

Var square(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(map_unary(a.value(), [](real v) { return v * v; }), {a},
                  [tp = &t, ia](const Tensor& g, Tape::Grads& gr) {
                    Tensor ga = g;
                    const Tensor& av = tp->value(ia);
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= 2 * av[i];
                    gr.add(ia, std::move(ga));
                  });
}

Var sum(Var a) {
  Tape& t = a.tape();
  const auto ia = a.id();
  real acc = 0;
  for (real v : a.value().data()) acc += v;
  return t.record(Tensor::scalar(acc), {a}, [tp = &t, ia](const Tensor& g, Tape::Grads& gr) {
    gr.add(ia, Tensor(tp->value(ia).shape(), g.item()));
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return mul_scalar(sum(a), real(1) / static_cast<real>(n));
}

Var sum_axis(Var a, std::size_t axis) {
  const Shape s = a.shape();
  if (axis >= s.size()) throw DimensionError("sum_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor out(out_shape);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(std::move(out), {a}, [s, outer, inner, n, ia](const Tensor& g, Tape::Grads& gr) {
    Tensor ga(s);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * n + k) * inner + i] = g[o * inner + i];
    gr.add(ia, std::move(ga));
  });
}

Var broadcast_to(Var a, const Shape& shape) {
  const Shape s = a.shape();
  if (s.size() != shape.size()) {
    throw DimensionError("broadcast_to: rank mismatch " + shape_str(s) + " -> " + shape_str(shape));
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != shape[i] && s[i] != 1) {
      throw DimensionError("broadcast_to: cannot broadcast " + shape_str(s) + " to " + shape_str(shape));
    }
  }
  if (s == shape) return a;
  Tensor out(shape);
  const Tensor& x = a.value();
  for_each_broadcast(s, shape, [&](std::size_t o, std::size_t src) { out[o] = x[src]; });
  Tape& t = a.tape();
  const auto ia = a.id();
  return t.record(std::move(out), {a}, [s, shape, ia](const Tensor& g, Tape::Grads& gr) {
    Tensor ga(s);
    for_each_broadcast(s, shape, [&](std::size_t o, std::size_t src) { ga[src] += g[o]; });
    gr.add(ia, std::move(ga));
  });
}

Var reshape(Var a, const Shape& shape) {
  Tape& t = a.tape();
  const auto ia = a.id();
  const Shape old = a.shape();
  return t.record(a.value().reshaped(shape), {a},
                  [ia, old](const Tensor& g, Tape::Grads& gr) { gr.add(ia, g.reshaped(old)); });
}

Var permute(Var a, const std::vector<std::size_t>& axes) {
  Tape& t = a.tape();
  const auto ia = a.id();
  auto inv = inverse_permutation(axes);
  return t.record(woodflow::permute(a.value(), axes), {a},
                  [ia, inv](const Tensor& g, Tape::Grads& gr) { gr.add(ia, woodflow::permute(g, inv)); });
}

Var reshape_permute(Var a, const std::vector<std::size_t>& axes, const Shape& shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw DimensionError("reshape_permute: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return reshape(permute(a, axes), shape);
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  Tape& t = a.tape();
  const auto ia = a.id();
  const Shape s = a.shape();
  return t.record(slice_axis(a.value(), axis, start, len), {a},
                  [ia, s, axis, start, len](const Tensor& g, Tape::Grads& gr) {
                    std::size_t outer = 1, inner = 1;
                    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
                    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
                    Tensor ga(s);
                    for (std::size_t o = 0; o < outer; ++o) {
                      std::copy_n(g.raw() + o * len * inner, len * inner,
                                  ga.raw() + (o * s[axis] + start) * inner);
                    }
                    gr.add(ia, std::move(ga));
                  });
}

Var concat(Var a, Var b, std::size_t axis) {
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  const std::size_t na = a.shape().at(axis), nb = b.shape().at(axis);
  return t.record(concat_axis(a.value(), b.value(), axis), {a, b},
                  [tp = &t, ia, ib, axis, na, nb](const Tensor& g, Tape::Grads& gr) {
                    if (tp->requires_grad(ia)) gr.add(ia, slice_axis(g, axis, 0, na));
                    if (tp->requires_grad(ib)) gr.add(ib, slice_axis(g, axis, na, nb));
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t.record(woodflow::matmul(a.value(), b.value()), {a, b},
                  [tp = &t, ia, ib](const Tensor& g, Tape::Grads& gr) {
                    if (tp->requires_grad(ia)) gr.add(ia, matmul_nt(g, tp->value(ib)));
                    if (tp->requires_grad(ib)) gr.add(ib, matmul_tn(tp->value(ia), g));
                  });
}

Var channel_mix(Var x, Var m) {
  Tape& t = x.tape();
  const auto ix = x.id(), im = m.id();
  return t.record(woodflow::channel_mix(x.value(), m.value()), {x, m},
                  [tp = &t, ix, im](const Tensor& g, Tape::Grads& gr) {
                    const Tensor& xv = tp->value(ix);
                    const Tensor& mv = tp->value(im);
                    if (tp->requires_grad(ix)) gr.add(ix, woodflow::channel_mix(g, transpose(mv)));
                    if (tp->requires_grad(im)) {
                      const std::size_t batch = xv.dim(0), cin = xv.dim(1), cout = mv.rows();
                      const std::size_t n = xv.numel() / std::max<std::size_t>(1, batch * cin);
                      Tensor gm(mv.shape());
                      for (std::size_t b = 0; b < batch; ++b) {
                        const real* gb = g.raw() + b * cout * n;
                        const real* xb = xv.raw() + b * cin * n;
                        for (std::size_t i = 0; i < cout; ++i)
                          for (std::size_t j = 0; j < cin; ++j) {
                            real acc = 0;
                            for (std::size_t p = 0; p < n; ++p) acc += gb[i * n + p] * xb[j * n + p];
                            gm(i, j) += acc;
                          }
                      }
                      gr.add(im, std::move(gm));
                    }
                  });
}

Var conv2d(Var x, Var weight, Var bias) {
  Tape& t = x.tape();
  const auto ix = x.id(), iw = weight.id(), ib = bias.id();
  return t.record(woodflow::conv2d(x.value(), weight.value(), bias.value()), {x, weight, bias},
                  [tp = &t, ix, iw, ib](const Tensor& g, Tape::Grads& gr) {
                    const Tensor& xv = tp->value(ix);
                    const Tensor& wv = tp->value(iw);
                    if (tp->requires_grad(ix)) gr.add(ix, conv2d_grad_input(g, wv, xv.shape()));
                    if (tp->requires_grad(iw)) gr.add(iw, conv2d_grad_weight(g, xv, wv.shape()));
                    if (tp->requires_grad(ib)) {
                      const std::size_t batch = g.dim(0), cout = g.dim(1), plane = g.dim(2) * g.dim(3);
                      Tensor gb(Shape{cout});
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t c = 0; c < cout; ++c) {
                          const real* p = g.raw() + (b * cout + c) * plane;
                          real acc = 0;
                          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                          gb[c] += acc;
                        }
                      gr.add(ib, std::move(gb));
                    }
                  });
}

Var slogdet(Var a, const std::string& where) {
  LuFactors f = lu_factor(a.value());
  const real logabs = require_nonsingular(slogdet_from_lu(f), where);
  Tape& t = a.tape();
  const auto ia = a.id();
  // d log|det A| / dA = A^{-T}, taken from the saved factors.
  return t.record(Tensor::scalar(logabs), {a}, [ia, f = std::move(f)](const Tensor& g, Tape::Grads& gr) {
    gr.add(ia, scaled(transpose(lu_inverse(f)), g.item()));
  });
}

Var inverse(Var a, const std::string& where) {
  Tape& t = a.tape();
  const auto ia = a.id(), io = t.size();
  return t.record(inverse_small(a.value(), where), {a}, [tp = &t, ia, io](const Tensor& g, Tape::Grads& gr) {
    // dA^{-1} = -A^{-1} dA A^{-1}  =>  grad_A = -A^{-T} G A^{-T}
    const Tensor& inv = tp->value(io);
    gr.add(ia, scaled(matmul_tn(inv, matmul_nt(g, inv)), real(-1)));
  });
}

}  // namespace ad

bool GradCheckReport::pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.pass; });
}

real GradCheckReport::worst_rel() const {
  real w = 0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_err);
  return w;
}

GradCheckReport check_gradients(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                real step, real tol) {
  if (!(step > 0)) throw ContractError("check_gradients: step must be positive");
  GradMap analytic;
  {
    Tape tape;
    Var loss = f(tape);
    if (!all_finite(loss.value())) {
      // Blame non-finite parameters if any, otherwise list everything checked.
      std::string names;
      for (Parameter* p : params)
        if (!all_finite(p->value)) names += (names.empty() ? "'" : ", '") + p->name + "'";
      if (names.empty())
        for (Parameter* p : params) names += (names.empty() ? "'" : ", '") + p->name + "'";
      throw NumericalError("check_gradients: non-finite loss at the base point (parameters " + names + ")");
    }
    analytic = tape.backward(loss);
  }
  auto eval = [&f]() {
    Tape tape;
    return f(tape).value().item();
  };

  GradCheckReport report;
  for (Parameter* p : params) {
    Tensor numeric(p->value.shape());
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const real orig = p->value[i];
      p->value[i] = orig + step;
      const real up = eval();
      p->value[i] = orig - step;
      const real down = eval();
      p->value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("check_gradients: non-finite loss while perturbing parameter '" + p->name + "'");
      }
      numeric[i] = (up - down) / (2 * step);
    }
    auto it = analytic.find(p->name);
    const Tensor grad = it != analytic.end() ? it->second : Tensor(p->value.shape());
    if (!all_finite(grad)) throw NumericalError("check_gradients: non-finite gradient for '" + p->name + "'");
    GradCheckEntry e;
    e.name = p->name;
    e.max_abs_err = max_abs_diff(grad, numeric);
    const real scale = std::max({max_abs(grad), max_abs(numeric), real(1e-6)});
    e.max_rel_err = e.max_abs_err / scale;
    e.pass = e.max_rel_err < tol;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace woodflow
