#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "woodflow/layers.hpp"
#include "woodflow/rng.hpp"

namespace woodflow {

enum class PermutationKind { conv1x1, woodbury, me_woodbury };

std::string to_string(PermutationKind kind);
// Accepts "conv1x1", "woodbury" and "me_woodbury"; throws ConfigError otherwise.
PermutationKind parse_permutation(const std::string& text);

struct FlowConfig {
  std::size_t levels = 1;
  std::size_t steps = 1;
  std::size_t coupling_channels = 64;
  PermutationKind permutation = PermutationKind::woodbury;
  // Per-level latent dimensions. Empty lists select the default schedule for
  // the number of levels. d_s is used by woodbury, d_h/d_w by me_woodbury.
  std::vector<std::size_t> d_c, d_s, d_h, d_w;
  std::size_t channels = 1, height = 8, width = 8;
  unsigned bits = 8;
  // Without squeeze the model is a single level on the raw input (used for
  // the two-dimensional density models).
  bool squeeze = true;

  std::size_t dimension() const noexcept { return channels * height * width; }
  // Throws ConfigError describing the first violated constraint.
  void validate() const;
};

// Default per-level schedules for 3 to 6 levels; fewer levels use a prefix
// of the 3-level schedule. Entries above the level size are clamped.
std::vector<std::size_t> default_channel_schedule(std::size_t levels);
std::vector<std::size_t> default_spatial_schedule(std::size_t levels);

struct Likelihood {
  Tensor nll;  // nats per sample, -log p(x)
  Tensor bpd;  // bits per dimension per sample
};

// Per-layer log-determinants from one forward pass, in stack order.
struct LayerTrace {
  std::vector<std::string> names;
  std::vector<Tensor> logdets;  // each (B)
  std::vector<Tensor> split_logp;  // one per split, each (B)
  Tensor base_logp;  // (B)
};

// Multi-scale flow: per level [squeeze, K x (actnorm, permutation, coupling)],
// followed by a split with a learned Gaussian prior on every level but the last.
class FlowModel {
 public:
  struct Level {
    Shape input_shape;   // per-sample (C, H, W) entering the level
    Shape output_shape;  // per-sample shape before the split
    std::vector<std::unique_ptr<FlowLayer>> layers;
    std::unique_ptr<SplitPrior> split;
  };

  // Deterministic in (cfg, seed). Actnorm layers start uninitialized.
  FlowModel(const FlowConfig& cfg, std::uint64_t seed);
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) noexcept = default;
  FlowModel& operator=(FlowModel&&) noexcept = default;

  const FlowConfig& config() const noexcept { return cfg_; }
  const std::vector<Level>& levels() const noexcept { return levels_; }
  std::vector<Level>& levels() noexcept { return levels_; }
  std::size_t layer_count() const;
  std::vector<FlowLayer*> layers();
  std::vector<Parameter*> parameters();

  bool initialized() const;
  // Data-dependent actnorm initialization on one batch, propagating through
  // the stack so every actnorm sees its own input statistics.
  void data_init(const Tensor& x);
  // Marks every actnorm initialized with its current parameters.
  void mark_initialized();

  // log p(x) per sample as a (B) node on `tape`.
  Var log_prob(Tape& tape, Var x);
  Tensor log_prob(const Tensor& x);
  Likelihood log_likelihood(const Tensor& x);
  LayerTrace trace(const Tensor& x);

  // Bijection x -> all latents concatenated per sample into (B, D): the
  // factored halves in level order followed by the final latent.
  Tensor encode(const Tensor& x);
  Tensor decode(const Tensor& z) const;

  // Latents ~ N(0, T^2) at the base and split priors, then a full inverse.
  // Sample b reads only rng.stream(b).
  Tensor sample(std::size_t count, real temperature, const Rng& rng) const;

 private:
  struct Pass {
    Var logdet;  // (B)
    Var prior;   // (B), split priors plus base density
    std::vector<Var> latents;
  };
  Pass run(Tape& tape, Var x, bool init, LayerTrace* trace);

  FlowConfig cfg_;
  std::vector<Level> levels_;
};

// Mass of exp(log p) over a square grid for a model on R^2, by the trapezoid
// rule. The grid spans mean +- 8 std of the model's samples on each axis.
struct NormalizationReport {
  real mass = 0;
  real refined_mass = 0;  // same box at double resolution
  bool stable = true;     // |mass - refined_mass| < 1e-4
  real lo[2] = {0, 0};
  real hi[2] = {0, 0};
};
NormalizationReport density_normalization_check(FlowModel& model, std::size_t grid, std::uint64_t seed = 0);

}  // namespace woodflow
