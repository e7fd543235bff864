#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "woodflow/autodiff.hpp"
#include "woodflow/rng.hpp"
#include "woodflow/tensor.hpp"

namespace woodflow {

// Output of a bijective layer on a (B, C, H, W) batch: the transformed batch
// and the per-sample log|det J| as a (B) vector.
struct LayerOutput {
  Var y;
  Var logdet;
};

// Plain-tensor counterpart of LayerOutput.
struct LayerResult {
  Tensor y;
  Tensor logdet;
};

class FlowLayer {
 public:
  explicit FlowLayer(std::string name) : name_(std::move(name)) {}
  virtual ~FlowLayer() = default;

  const std::string& name() const noexcept { return name_; }
  virtual std::string kind() const = 0;

  virtual LayerOutput forward(Tape& tape, Var x) = 0;
  virtual Tensor inverse(const Tensor& y) const = 0;

  // Per-sample (C, H, W) output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const { return in; }
  virtual std::vector<Parameter*> parameters() { return {}; }

  // Data-dependent initialization hook; only actnorm uses it.
  virtual void data_init(const Tensor&) {}
  virtual bool needs_data_init() const { return false; }

  // Forward pass on a throwaway tape.
  LayerResult evaluate(const Tensor& x);

 private:
  std::string name_;
};

// Per-sample constant broadcast to a (B) logdet vector.
Var broadcast_logdet(Var scalar, std::size_t batch);

// y = s * x + b per channel.
class ActNorm final : public FlowLayer {
 public:
  ActNorm(std::string name, std::size_t channels);

  std::string kind() const override { return "actnorm"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  std::vector<Parameter*> parameters() override { return {&scale_, &bias_}; }

  // Sets s = 1/std, b = -mean/std per channel over batch and spatial axes.
  void data_init(const Tensor& x) override;
  bool needs_data_init() const override { return !initialized_; }

  // Direct assignment, marks the layer initialized.
  void set(const Tensor& scale, const Tensor& bias);
  void set_initialized(bool v) noexcept { initialized_ = v; }
  bool initialized() const noexcept { return initialized_; }
  const Tensor& scale() const noexcept { return scale_.value; }
  const Tensor& bias() const noexcept { return bias_.value; }

 private:
  Parameter scale_;
  Parameter bias_;
  bool initialized_ = false;
};

// Affine coupling: the first ceil(C/2) channels pass through and condition a
// positive scale and a shift for the remaining channels:
//   s = sigmoid(raw + 2), y_b = s * x_b + shift.
// The conditioner is conv3x3 -> relu -> conv1x1 -> relu -> conv3x3, with the
// last convolution zero-initialized.
class AffineCoupling final : public FlowLayer {
 public:
  static constexpr real kScaleOffset = 2.0;

  AffineCoupling(std::string name, std::size_t channels, std::size_t hidden, Rng& rng);

  std::string kind() const override { return "coupling"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  std::vector<Parameter*> parameters() override { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

  std::size_t passthrough_channels() const noexcept { return ca_; }

 private:
  struct ScaleShift {
    Var scale;
    Var shift;
  };
  // `p` holds w1, b1, w2, b2, w3, b3 bound on the tape of `xa`.
  ScaleShift conditioner(Var xa, const std::array<Var, 6>& p) const;

  std::size_t ca_, cb_;
  Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

// y[:, :, i, j] = M x[:, :, i, j].
class Conv1x1 final : public FlowLayer {
 public:
  // M starts as a random orthogonal matrix.
  Conv1x1(std::string name, std::size_t channels, Rng& rng);

  std::string kind() const override { return "conv1x1"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  std::vector<Parameter*> parameters() override { return {&m_}; }

  Tensor& matrix() noexcept { return m_.value; }

 private:
  Parameter m_;
};

// Channel transform (I + U_c V_c) x followed by spatial transform
// x_c (I + U_s V_s) on the (C x HW) view of every sample. Inverse and
// log-determinant only touch the d x d matrices I + V U.
class Woodbury final : public FlowLayer {
 public:
  // U ~ N(0, 0.05^2), V = 0: the layer starts as the identity.
  Woodbury(std::string name, std::size_t channels, std::size_t height, std::size_t width, std::size_t d_c,
           std::size_t d_s, Rng& rng);

  std::string kind() const override { return "woodbury"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  std::vector<Parameter*> parameters() override { return {&u_c_, &v_c_, &u_s_, &v_s_}; }

  Tensor& u_c() noexcept { return u_c_.value; }
  Tensor& v_c() noexcept { return v_c_.value; }
  Tensor& u_s() noexcept { return u_s_.value; }
  Tensor& v_s() noexcept { return v_s_.value; }

  // Materialized I + U V matrices (c x c and n x n); used by equivalence checks.
  Tensor dense_channel_matrix() const;
  Tensor dense_spatial_matrix() const;

 private:
  std::size_t c_, h_, w_;
  Parameter u_c_, v_c_, u_s_, v_s_;
};

// Memory-efficient variant: channel transform, then a width transform on the
// (C*H, W) view, then a height transform on the (C*W, H) view obtained by
// permuting (C, H, W) -> (C, W, H).
class MEWoodbury final : public FlowLayer {
 public:
  MEWoodbury(std::string name, std::size_t channels, std::size_t height, std::size_t width, std::size_t d_c,
             std::size_t d_h, std::size_t d_w, Rng& rng);

  std::string kind() const override { return "me_woodbury"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  std::vector<Parameter*> parameters() override { return {&u_c_, &v_c_, &u_w_, &v_w_, &u_h_, &v_h_}; }

  Tensor& u_c() noexcept { return u_c_.value; }
  Tensor& v_c() noexcept { return v_c_.value; }
  Tensor& u_w() noexcept { return u_w_.value; }
  Tensor& v_w() noexcept { return v_w_.value; }
  Tensor& u_h() noexcept { return u_h_.value; }
  Tensor& v_h() noexcept { return v_h_.value; }

 private:
  std::size_t c_, h_, w_;
  Parameter u_c_, v_c_, u_w_, v_w_, u_h_, v_h_;
};

// Space-to-channel 2x2 rearrangement: output channel 4k + 2dy + dx at (i, j)
// holds input x[k, 2i + dy, 2j + dx].
class Squeeze final : public FlowLayer {
 public:
  explicit Squeeze(std::string name) : FlowLayer(std::move(name)) {}

  std::string kind() const override { return "squeeze"; }
  LayerOutput forward(Tape& tape, Var x) override;
  Tensor inverse(const Tensor& y) const override;
  Shape output_shape(const Shape& in) const override;
};

// Factors out the second half of the channels under a Gaussian whose mean and
// log-scale come from a zero-initialized 3x3 convolution of the first half.
class SplitPrior {
 public:
  struct Output {
    Var retained;
    Var factored;
    Var logp;  // (B)
  };

  SplitPrior(std::string name, std::size_t channels);

  const std::string& name() const noexcept { return name_; }
  Output forward(Tape& tape, Var z);
  // z_b ~ N(mu(z_a), (T * sigma(z_a))^2), one stream per sample.
  Tensor inverse(const Tensor& retained, real temperature, std::span<Rng> rngs) const;
  // Inverse with the factored half given explicitly.
  Tensor inverse_given(const Tensor& retained, const Tensor& factored) const;
  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }

 private:
  std::pair<Tensor, Tensor> mean_logscale(const Tensor& retained) const;

  std::string name_;
  std::size_t channels_;
  Parameter weight_, bias_;
};

// Standard-normal draws for a batch whose leading axis indexes samples; sample
// b reads rngs[b] in row-major order.
Tensor draw_normal(const Shape& shape, std::span<Rng> rngs);

// Dense verification of the Woodbury and Sylvester identities for U (n x k)
// and V (k x n).
struct IdentityResiduals {
  real inverse_residual = 0;  // ||(I + UV)(I - U (I + VU)^-1 V) - I||_inf
  real logdet_residual = 0;   // |log|det(I + UV)| - log|det(I + VU)||
  bool sign_match = true;
  bool singular = false;
};
IdentityResiduals woodbury_identity_check(const Tensor& u, const Tensor& v);

// Adds scale * N(0, 1) noise to every element, e.g. to move a freshly built
// layer away from its identity initialization.
void perturb_parameters(const std::vector<Parameter*>& params, Rng& rng, real scale);

// Induced infinity norm (max absolute row sum).
real inf_norm(const Tensor& m);

}  // namespace woodflow
