#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "woodflow/autodiff.hpp"
#include "woodflow/config.hpp"
#include "woodflow/data.hpp"
#include "woodflow/model.hpp"

namespace woodflow {

struct AdamHyper {
  real lr = real(0.001);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
};

struct AdamState {
  AdamHyper hyper;
  std::uint64_t t = 0;
  std::map<std::string, Tensor> m, v;
};

// One bias-corrected Adam update of every parameter. Parameters missing from
// `grads` are treated as having zero gradient. A non-finite gradient raises
// NumericalError naming the parameter before anything is modified.
void adam_step(std::span<Parameter* const> params, const GradMap& grads, AdamState& st);

real grad_norm(const GradMap& grads);

struct IterationMetrics {
  std::size_t iteration = 0;
  real nll = 0;  // mean nats per sample over the minibatch
  real bpd = 0;
  real grad_norm = 0;
};

// Mean NLL of `x` under `model` and its gradient, sharded over `threads`
// workers. Shard results are summed in shard order.
struct LossAndGrad {
  real nll = 0;
  real bpd = 0;
  GradMap grads;
};
LossAndGrad loss_and_grad(FlowModel& model, const Tensor& x, std::size_t threads = 1);

struct EvalResult {
  real nll = 0;  // mean nats per sample
  real bpd = 0;
  std::size_t samples = 0;
};
// Whole-dataset evaluation in chunks. Chunk k is dequantized with
// Rng(seed).stream(k).
EvalResult evaluate(FlowModel& model, const BatchSource& data, std::uint64_t seed, std::size_t threads = 1,
                    std::size_t chunk = 256);

// Training state: model, optimizer and position in the deterministic batch
// sequence. Iteration i draws its minibatch from Rng(seed).stream(i); the
// actnorm initialization batch uses stream 0.
class Trainer {
 public:
  // Builds a fresh model and runs the data-dependent initialization.
  Trainer(const RunConfig& cfg, std::uint64_t seed, const BatchSource& data);
  // Restores a checkpoint directory written by save().
  static std::unique_ptr<Trainer> resume(const std::string& dir, const BatchSource& data);

  IterationMetrics step();
  // Runs until `iteration() == last`. Writes a checkpoint to `out_dir` every
  // checkpoint_every iterations and at the end when out_dir is non-empty; a
  // numerical failure writes the last good state before rethrowing.
  std::vector<IterationMetrics> run_until(std::size_t last, const std::string& out_dir = "");

  void save(const std::string& dir) const;

  FlowModel& model() noexcept { return *model_; }
  const AdamState& adam() const noexcept { return adam_; }
  std::size_t iteration() const noexcept { return iteration_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const RunConfig& config() const noexcept { return cfg_; }
  void set_threads(std::size_t n) noexcept { threads_ = n ? n : 1; }
  // Receives every metrics line as it is produced.
  void set_observer(std::function<void(const IterationMetrics&)> f) { observer_ = std::move(f); }

 private:
  Trainer(const RunConfig& cfg, std::uint64_t seed, const BatchSource& data, bool init);

  RunConfig cfg_;
  std::uint64_t seed_;
  const BatchSource* data_;
  std::unique_ptr<FlowModel> model_;
  AdamState adam_;
  std::size_t iteration_ = 0;
  std::size_t threads_ = 1;
  std::function<void(const IterationMetrics&)> observer_;
};

// Checkpoint directory contents: manifest.txt (key=value) and params.ntfb
// (named tensors: parameters, Adam moments).
struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  std::unique_ptr<FlowModel> model;
  AdamState adam;
};
void save_checkpoint(const std::string& dir, const RunConfig& cfg, std::uint64_t seed, std::size_t iteration,
                     FlowModel& model, const AdamState& adam);
Checkpoint load_checkpoint(const std::string& dir);

std::string format_metrics(const IterationMetrics& m);

}  // namespace woodflow
