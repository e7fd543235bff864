#include "woodflow/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "woodflow/errors.hpp"
#include "woodflow/linalg.hpp"

namespace woodflow {

namespace {

void require_4d(const Shape& s, const std::string& who) {
  if (s.size() != 4) throw DimensionError(who + ": expected a (B, C, H, W) batch, got " + shape_str(s));
}

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, real stddev, Rng& rng) {
  Tensor t(Shape{rows, cols});
  for (auto& v : t.data()) v = static_cast<real>(stddev * rng.normal());
  return t;
}

// Modified Gram-Schmidt on the columns of a Gaussian matrix.
Tensor random_orthogonal(std::size_t n, Rng& rng) {
  for (;;) {
    Tensor q = gaussian_matrix(n, n, 1, rng);
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      for (std::size_t k = 0; k < j; ++k) {
        real dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, k);
        for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, k);
      }
      real norm = 0;
      for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
      norm = std::sqrt(norm);
      if (norm < real(1e-6)) ok = false;
      for (std::size_t i = 0; i < n && ok; ++i) q(i, j) /= norm;
    }
    if (ok) return q;
  }
}

// I + a * b for square results.
Tensor identity_plus(const Tensor& a, const Tensor& b) {
  Tensor m = matmul(a, b);
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += 1;
  return m;
}

Var identity_plus(Tape& tape, Var a, Var b) {
  Var prod = ad::matmul(a, b);
  return ad::add(tape.constant(Tensor::identity(prod.shape()[0])), prod);
}

// Right-multiplication of the rows of a (R x N) matrix by (I + U V), taking the
// low-rank route: x + (x U) V.
Var low_rank_right(Var rows, Var u, Var v) { return ad::add(rows, ad::matmul(ad::matmul(rows, u), v)); }

// rows (I + U V)^-1 = rows - ((rows U) (I + V U)^-1) V.
Tensor low_rank_right_inverse(const Tensor& rows, const Tensor& u, const Tensor& v, const std::string& where) {
  const Tensor inner_inv = inverse_small(identity_plus(v, u), where);
  return rows - matmul(matmul(matmul(rows, u), inner_inv), v);
}

// (I + U V)^-1 x on the channel axis of a (B, C, ...) batch.
Tensor channel_low_rank_inverse(const Tensor& x, const Tensor& u, const Tensor& v, const std::string& where) {
  const Tensor inner_inv = inverse_small(identity_plus(v, u), where);
  return x - channel_mix(channel_mix(channel_mix(x, v), inner_inv), u);
}

Var channel_low_rank(Var x, Var u, Var v) { return ad::add(x, ad::channel_mix(ad::channel_mix(x, v), u)); }

}  // namespace

LayerResult FlowLayer::evaluate(const Tensor& x) {
  Tape tape;
  auto out = forward(tape, tape.constant(x));
  return {out.y.value(), out.logdet.value()};
}

Var broadcast_logdet(Var scalar, std::size_t batch) {
  return ad::broadcast_to(ad::reshape(scalar, Shape{1}), Shape{batch});
}

// ---- ActNorm ------------------------------------------------------------------

ActNorm::ActNorm(std::string name, std::size_t channels)
    : FlowLayer(name),
      scale_{name + ".scale", Tensor(Shape{channels}, real(1))},
      bias_{name + ".bias", Tensor(Shape{channels})} {}

void ActNorm::data_init(const Tensor& x) {
  require_4d(x.shape(), name());
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (c != scale_.value.numel()) throw DimensionError(name() + ": channel count mismatch");
  const real count = static_cast<real>(batch * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    real mean = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) mean += x[(b * c + ch) * plane + p];
    mean /= count;
    real var = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const real d = x[(b * c + ch) * plane + p] - mean;
        var += d * d;
      }
    var /= count;
    const real sd = std::sqrt(var);
    if (!(sd > 0) || !std::isfinite(sd)) {
      throw ContractError(name() + ": channel " + std::to_string(ch) +
                          " has zero variance in the initialization batch; use a larger or noisier batch");
    }
    scale_.value[ch] = 1 / sd;
    bias_.value[ch] = -mean / sd;
  }
  initialized_ = true;
}

void ActNorm::set(const Tensor& scale, const Tensor& bias) {
  if (scale.shape() != scale_.value.shape() || bias.shape() != bias_.value.shape()) {
    throw DimensionError(name() + ": parameter shape mismatch");
  }
  scale_.value = scale;
  bias_.value = bias;
  initialized_ = true;
}

LayerOutput ActNorm::forward(Tape& tape, Var x) {
  if (!initialized_) throw ContractError(name() + ": forward before data-dependent initialization");
  const Shape s = x.shape();
  require_4d(s, name());
  const std::size_t c = s[1];
  Var sv = tape.param(scale_);
  Var bv = tape.param(bias_);
  Var s4 = ad::broadcast_to(ad::reshape(sv, Shape{1, c, 1, 1}), s);
  Var b4 = ad::broadcast_to(ad::reshape(bv, Shape{1, c, 1, 1}), s);
  Var y = ad::add(ad::mul(x, s4), b4);
  Var ld = ad::mul_scalar(ad::sum(ad::log_abs(sv)), static_cast<real>(s[2] * s[3]));
  return {y, broadcast_logdet(ld, s[0])};
}

Tensor ActNorm::inverse(const Tensor& y) const {
  if (!initialized_) throw ContractError(name() + ": inverse before data-dependent initialization");
  require_4d(y.shape(), name());
  const std::size_t batch = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (scale_.value[ch] == 0) throw SingularMatrixError(name() + " (zero scale in channel " + std::to_string(ch) + ")");
  }
  Tensor x = y;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      real* p = x.raw() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - bias_.value[ch]) / scale_.value[ch];
    }
  return x;
}

// ---- AffineCoupling -------------------------------------------------------------

AffineCoupling::AffineCoupling(std::string name, std::size_t channels, std::size_t hidden, Rng& rng)
    : FlowLayer(name), ca_((channels + 1) / 2), cb_(channels / 2) {
  if (channels < 2) throw ContractError(name + ": affine coupling needs at least 2 channels");
  if (hidden == 0) throw ContractError(name + ": coupling width must be positive");
  auto conv_weight = [&rng](std::size_t co, std::size_t ci, std::size_t k) {
    Tensor w(Shape{co, ci, k, k});
    const real sd = real(1) / std::sqrt(static_cast<real>(ci * k * k));
    for (auto& v : w.data()) v = static_cast<real>(sd * rng.normal());
    return w;
  };
  w1_ = {name + ".w1", conv_weight(hidden, ca_, 3)};
  b1_ = {name + ".b1", Tensor(Shape{hidden})};
  w2_ = {name + ".w2", conv_weight(hidden, hidden, 1)};
  b2_ = {name + ".b2", Tensor(Shape{hidden})};
  w3_ = {name + ".w3", Tensor(Shape{2 * cb_, hidden, 3, 3})};
  b3_ = {name + ".b3", Tensor(Shape{2 * cb_})};
}

AffineCoupling::ScaleShift AffineCoupling::conditioner(Var xa, const std::array<Var, 6>& p) const {
  Var h1 = ad::relu(ad::conv2d(xa, p[0], p[1]));
  Var h2 = ad::relu(ad::conv2d(h1, p[2], p[3]));
  Var out = ad::conv2d(h2, p[4], p[5]);
  Var shift = ad::slice(out, 1, 0, cb_);
  Var raw = ad::slice(out, 1, cb_, cb_);
  return {ad::sigmoid(ad::add_scalar(raw, kScaleOffset)), shift};
}

LayerOutput AffineCoupling::forward(Tape& tape, Var x) {
  const Shape s = x.shape();
  require_4d(s, name());
  if (s[1] != ca_ + cb_) throw DimensionError(name() + ": channel count mismatch");
  Var xa = ad::slice(x, 1, 0, ca_);
  Var xb = ad::slice(x, 1, ca_, cb_);
  auto [scale, shift] = conditioner(xa, {tape.param(w1_), tape.param(b1_), tape.param(w2_), tape.param(b2_),
                                         tape.param(w3_), tape.param(b3_)});
  Var yb = ad::add(ad::mul(scale, xb), shift);
  Var y = ad::concat(xa, yb, 1);
  Var ld = ad::sum_axis(ad::reshape(ad::log(scale), Shape{s[0], cb_ * s[2] * s[3]}), 1);
  return {y, ld};
}

Tensor AffineCoupling::inverse(const Tensor& y) const {
  require_4d(y.shape(), name());
  Tape tape;
  const Tensor ya = slice_axis(y, 1, 0, ca_);
  const Tensor yb = slice_axis(y, 1, ca_, cb_);
  auto [scale, shift] = conditioner(tape.constant(ya), {tape.constant(w1_.value), tape.constant(b1_.value),
                                                        tape.constant(w2_.value), tape.constant(b2_.value),
                                                        tape.constant(w3_.value), tape.constant(b3_.value)});
  Tensor xb = yb - shift.value();
  for (std::size_t i = 0; i < xb.numel(); ++i) xb[i] /= scale.value()[i];
  return concat_axis(ya, xb, 1);
}

// ---- Conv1x1 --------------------------------------------------------------------

Conv1x1::Conv1x1(std::string name, std::size_t channels, Rng& rng)
    : FlowLayer(name), m_{name + ".M", random_orthogonal(channels, rng)} {}

LayerOutput Conv1x1::forward(Tape& tape, Var x) {
  const Shape s = x.shape();
  require_4d(s, name());
  Var m = tape.param(m_);
  Var y = ad::channel_mix(x, m);
  Var ld = ad::mul_scalar(ad::slogdet(m, name()), static_cast<real>(s[2] * s[3]));
  return {y, broadcast_logdet(ld, s[0])};
}

Tensor Conv1x1::inverse(const Tensor& y) const {
  require_4d(y.shape(), name());
  return channel_mix(y, inverse_small(m_.value, name()));
}

// ---- Woodbury ---------------------------------------------------------------------

Woodbury::Woodbury(std::string name, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t d_c, std::size_t d_s, Rng& rng)
    : FlowLayer(name), c_(channels), h_(height), w_(width) {
  const std::size_t n = height * width;
  if (d_c == 0 || d_c > channels || d_s == 0 || d_s > n) {
    throw ContractError(name + ": latent dimensions must satisfy 1 <= d_c <= c and 1 <= d_s <= h*w");
  }
  u_c_ = {name + ".U_c", gaussian_matrix(channels, d_c, 0.05, rng)};
  v_c_ = {name + ".V_c", Tensor(Shape{d_c, channels})};
  u_s_ = {name + ".U_s", gaussian_matrix(n, d_s, 0.05, rng)};
  v_s_ = {name + ".V_s", Tensor(Shape{d_s, n})};
}

LayerOutput Woodbury::forward(Tape& tape, Var x) {
  const Shape s = x.shape();
  require_4d(s, name());
  if (s[1] != c_ || s[2] != h_ || s[3] != w_) {
    throw DimensionError(name() + ": built for " + shape_str({c_, h_, w_}) + ", got " + shape_str(s));
  }
  const std::size_t batch = s[0], n = h_ * w_;
  Var uc = tape.param(u_c_), vc = tape.param(v_c_), us = tape.param(u_s_), vs = tape.param(v_s_);

  Var xc = channel_low_rank(x, uc, vc);
  Var rows = ad::reshape(xc, Shape{batch * c_, n});
  Var y = ad::reshape(low_rank_right(rows, us, vs), s);

  Var ld_c = ad::slogdet(identity_plus(tape, vc, uc), name() + " (channel transform)");
  Var ld_s = ad::slogdet(identity_plus(tape, vs, us), name() + " (spatial transform)");
  Var ld = ad::add(ad::mul_scalar(ld_c, static_cast<real>(n)), ad::mul_scalar(ld_s, static_cast<real>(c_)));
  return {y, broadcast_logdet(ld, batch)};
}

Tensor Woodbury::inverse(const Tensor& y) const {
  require_4d(y.shape(), name());
  const std::size_t batch = y.dim(0), n = h_ * w_;
  const Tensor rows = y.reshaped(Shape{batch * c_, n});
  const Tensor xc =
      low_rank_right_inverse(rows, u_s_.value, v_s_.value, name() + " (spatial transform)").reshaped(y.shape());
  return channel_low_rank_inverse(xc, u_c_.value, v_c_.value, name() + " (channel transform)");
}

Tensor Woodbury::dense_channel_matrix() const { return identity_plus(u_c_.value, v_c_.value); }
Tensor Woodbury::dense_spatial_matrix() const { return identity_plus(u_s_.value, v_s_.value); }

// ---- MEWoodbury -------------------------------------------------------------------

MEWoodbury::MEWoodbury(std::string name, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t d_c, std::size_t d_h, std::size_t d_w, Rng& rng)
    : FlowLayer(name), c_(channels), h_(height), w_(width) {
  if (d_c == 0 || d_c > channels || d_h == 0 || d_h > height || d_w == 0 || d_w > width) {
    throw ContractError(name + ": latent dimensions must satisfy 1 <= d_c <= c, 1 <= d_h <= h, 1 <= d_w <= w");
  }
  u_c_ = {name + ".U_c", gaussian_matrix(channels, d_c, 0.05, rng)};
  v_c_ = {name + ".V_c", Tensor(Shape{d_c, channels})};
  u_w_ = {name + ".U_w", gaussian_matrix(width, d_w, 0.05, rng)};
  v_w_ = {name + ".V_w", Tensor(Shape{d_w, width})};
  u_h_ = {name + ".U_h", gaussian_matrix(height, d_h, 0.05, rng)};
  v_h_ = {name + ".V_h", Tensor(Shape{d_h, height})};
}

LayerOutput MEWoodbury::forward(Tape& tape, Var x) {
  const Shape s = x.shape();
  require_4d(s, name());
  if (s[1] != c_ || s[2] != h_ || s[3] != w_) {
    throw DimensionError(name() + ": built for " + shape_str({c_, h_, w_}) + ", got " + shape_str(s));
  }
  const std::size_t batch = s[0];
  Var uc = tape.param(u_c_), vc = tape.param(v_c_);
  Var uw = tape.param(u_w_), vw = tape.param(v_w_);
  Var uh = tape.param(u_h_), vh = tape.param(v_h_);

  Var xc = channel_low_rank(x, uc, vc);
  // (C*H, W) view: merge the leading axes.
  Var xw = low_rank_right(ad::reshape(xc, Shape{batch * c_ * h_, w_}), uw, vw);
  // (C*W, H) view: permute (C, H, W) -> (C, W, H), then merge.
  Var cols = ad::reshape_permute(ad::reshape(xw, s), {0, 1, 3, 2}, Shape{batch * c_ * w_, h_});
  Var xh = low_rank_right(cols, uh, vh);
  Var y = ad::permute(ad::reshape(xh, Shape{batch, c_, w_, h_}), {0, 1, 3, 2});

  Var ld_c = ad::slogdet(identity_plus(tape, vc, uc), name() + " (channel axis)");
  Var ld_w = ad::slogdet(identity_plus(tape, vw, uw), name() + " (width axis)");
  Var ld_h = ad::slogdet(identity_plus(tape, vh, uh), name() + " (height axis)");
  Var ld = ad::add(ad::add(ad::mul_scalar(ld_c, static_cast<real>(h_ * w_)),
                           ad::mul_scalar(ld_w, static_cast<real>(c_ * h_))),
                   ad::mul_scalar(ld_h, static_cast<real>(c_ * w_)));
  return {y, broadcast_logdet(ld, batch)};
}

Tensor MEWoodbury::inverse(const Tensor& y) const {
  require_4d(y.shape(), name());
  const std::size_t batch = y.dim(0);
  const Tensor cols = reshape_permute(y, {0, 1, 3, 2}, Shape{batch * c_ * w_, h_});
  const Tensor xh = low_rank_right_inverse(cols, u_h_.value, v_h_.value, name() + " (height axis)");
  const Tensor xw_rows =
      reshape_permute(xh.reshaped(Shape{batch, c_, w_, h_}), {0, 1, 3, 2}, Shape{batch * c_ * h_, w_});
  const Tensor xw = low_rank_right_inverse(xw_rows, u_w_.value, v_w_.value, name() + " (width axis)");
  return channel_low_rank_inverse(xw.reshaped(y.shape()), u_c_.value, v_c_.value, name() + " (channel axis)");
}

// ---- Squeeze ----------------------------------------------------------------------

Shape Squeeze::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[1] % 2 || in[2] % 2) {
    throw DimensionError(name() + ": squeeze needs even height and width, got " + shape_str(in));
  }
  return {in[0] * 4, in[1] / 2, in[2] / 2};
}

LayerOutput Squeeze::forward(Tape& tape, Var x) {
  const Shape s = x.shape();
  require_4d(s, name());
  const Shape out = output_shape({s[1], s[2], s[3]});
  const std::size_t b = s[0], c = s[1], h2 = out[1], w2 = out[2];
  Var split = ad::reshape(x, Shape{b, c, h2, 2, w2, 2});
  Var y = ad::reshape_permute(split, {0, 1, 3, 5, 2, 4}, Shape{b, 4 * c, h2, w2});
  return {y, tape.constant(Tensor(Shape{b}))};
}

Tensor Squeeze::inverse(const Tensor& y) const {
  require_4d(y.shape(), name());
  const std::size_t b = y.dim(0), c4 = y.dim(1), h2 = y.dim(2), w2 = y.dim(3);
  if (c4 % 4) throw DimensionError(name() + ": channel count " + std::to_string(c4) + " is not divisible by 4");
  const std::size_t c = c4 / 4;
  return reshape_permute(y.reshaped(Shape{b, c, 2, 2, h2, w2}), {0, 1, 4, 2, 5, 3}, Shape{b, c, 2 * h2, 2 * w2});
}

// ---- SplitPrior -------------------------------------------------------------------

SplitPrior::SplitPrior(std::string name, std::size_t channels)
    : name_(std::move(name)),
      channels_(channels),
      weight_{name_ + ".prior_w", Tensor(Shape{channels, channels / 2, 3, 3})},
      bias_{name_ + ".prior_b", Tensor(Shape{channels})} {
  if (channels < 2 || channels % 2) {
    throw DimensionError(name_ + ": split needs an even channel count, got " + std::to_string(channels));
  }
}

SplitPrior::Output SplitPrior::forward(Tape& tape, Var z) {
  const Shape s = z.shape();
  require_4d(s, name_);
  if (s[1] != channels_) throw DimensionError(name_ + ": channel count mismatch");
  const std::size_t half = channels_ / 2;
  Var za = ad::slice(z, 1, 0, half);
  Var zb = ad::slice(z, 1, half, half);
  Var h = ad::conv2d(za, tape.param(weight_), tape.param(bias_));
  Var mu = ad::slice(h, 1, 0, half);
  Var logs = ad::slice(h, 1, half, half);
  // log N(zb; mu, exp(logs)^2) = -0.5 log(2 pi) - logs - 0.5 ((zb - mu) / exp(logs))^2
  Var standardized = ad::mul(ad::sub(zb, mu), ad::exp(ad::mul_scalar(logs, -1)));
  Var terms = ad::sub(ad::mul_scalar(ad::square(standardized), real(-0.5)), logs);
  const std::size_t per_sample = half * s[2] * s[3];
  Var logp = ad::add_scalar(ad::sum_axis(ad::reshape(terms, Shape{s[0], per_sample}), 1),
                            -real(0.5) * std::log(2 * std::numbers::pi_v<real>) * static_cast<real>(per_sample));
  return {za, zb, logp};
}

std::pair<Tensor, Tensor> SplitPrior::mean_logscale(const Tensor& retained) const {
  const Tensor h = conv2d(retained, weight_.value, bias_.value);
  const std::size_t half = channels_ / 2;
  return {slice_axis(h, 1, 0, half), slice_axis(h, 1, half, half)};
}

Tensor SplitPrior::inverse(const Tensor& retained, real temperature, std::span<Rng> rngs) const {
  if (!(temperature >= 0)) throw ContractError(name_ + ": temperature must be non-negative");
  require_4d(retained.shape(), name_);
  auto [mu, logs] = mean_logscale(retained);
  Tensor eps = draw_normal(mu.shape(), rngs);
  Tensor zb = mu;
  for (std::size_t i = 0; i < zb.numel(); ++i) zb[i] += temperature * std::exp(logs[i]) * eps[i];
  return concat_axis(retained, zb, 1);
}

Tensor SplitPrior::inverse_given(const Tensor& retained, const Tensor& factored) const {
  return concat_axis(retained, factored, 1);
}

Tensor draw_normal(const Shape& shape, std::span<Rng> rngs) {
  Tensor t(shape);
  if (shape.empty()) throw DimensionError("draw_normal: need a batch axis");
  if (rngs.size() != shape[0]) throw ContractError("draw_normal: one generator per sample required");
  const std::size_t per = shape[0] ? t.numel() / shape[0] : 0;
  for (std::size_t b = 0; b < shape[0]; ++b)
    for (std::size_t i = 0; i < per; ++i) t[b * per + i] = static_cast<real>(rngs[b].normal());
  return t;
}

void perturb_parameters(const std::vector<Parameter*>& params, Rng& rng, real scale) {
  for (Parameter* p : params)
    for (auto& v : p->value.data()) v += static_cast<real>(scale * rng.normal());
}

// ---- Identity checks --------------------------------------------------------------

real inf_norm(const Tensor& m) {
  if (m.ndim() != 2) throw DimensionError("inf_norm: expected a matrix");
  real best = 0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    real row = 0;
    for (std::size_t j = 0; j < m.cols(); ++j) row += std::abs(m(i, j));
    best = std::max(best, row);
  }
  return best;
}

IdentityResiduals woodbury_identity_check(const Tensor& u, const Tensor& v) {
  if (u.ndim() != 2 || v.ndim() != 2 || u.cols() != v.rows() || u.rows() != v.cols()) {
    throw DimensionError("woodbury_identity_check: U " + shape_str(u.shape()) + " and V " + shape_str(v.shape()) +
                         " are not n x k and k x n");
  }
  IdentityResiduals r;
  const Tensor big = identity_plus(u, v);
  const Tensor small = identity_plus(v, u);
  const auto small_lu = lu_factor(small);
  if (small_lu.singular) {
    r.singular = true;
    r.inverse_residual = r.logdet_residual = std::numeric_limits<real>::quiet_NaN();
    r.sign_match = false;
    return r;
  }
  Tensor woodbury_inv = scaled(matmul(matmul(u, lu_inverse(small_lu)), v), real(-1));
  for (std::size_t i = 0; i < woodbury_inv.rows(); ++i) woodbury_inv(i, i) += 1;
  r.inverse_residual = inf_norm(matmul(big, woodbury_inv) - Tensor::identity(u.rows()));
  const SLogDet d_big = slogdet_lu(big);
  const SLogDet d_small = slogdet_from_lu(small_lu);
  r.sign_match = d_big.sign == d_small.sign;
  r.logdet_residual = std::abs(d_big.logabs - d_small.logabs);
  return r;
}

}  // namespace woodflow
