#include "woodflow/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>

#include "woodflow/layers.hpp"
#include "woodflow/model.hpp"
#include "woodflow/oracle.hpp"

namespace woodflow {

namespace {

std::string fmt(const char* label, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s %.3e", label, v);
  return buf;
}

Tensor normal_batch(const Shape& s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<real>(rng.normal());
  return t;
}

using LayerFactory = std::function<std::unique_ptr<FlowLayer>(Rng&)>;

struct LayerSpec {
  std::string label;
  Shape shape;  // per sample
  LayerFactory make;
  bool linear;
};

std::vector<LayerSpec> layer_specs() {
  return {
      {"actnorm", {3, 2, 2}, [](Rng&) {
         auto l = std::make_unique<ActNorm>("check.actnorm", 3);
         l->set_initialized(true);
         return std::unique_ptr<FlowLayer>(std::move(l));
       }, true},
      {"conv1x1", {3, 2, 2}, [](Rng& r) { return std::unique_ptr<FlowLayer>(std::make_unique<Conv1x1>("check.conv1x1", 3, r)); }, true},
      {"woodbury", {3, 2, 3}, [](Rng& r) {
         return std::unique_ptr<FlowLayer>(std::make_unique<Woodbury>("check.woodbury", 3, 2, 3, 2, 3, r));
       }, true},
      {"me_woodbury", {3, 4, 5}, [](Rng& r) {
         return std::unique_ptr<FlowLayer>(std::make_unique<MEWoodbury>("check.me_woodbury", 3, 4, 5, 2, 2, 2, r));
       }, true},
      {"squeeze", {2, 2, 4}, [](Rng&) { return std::unique_ptr<FlowLayer>(std::make_unique<Squeeze>("check.squeeze")); }, true},
      {"coupling", {3, 2, 2}, [](Rng& r) {
         return std::unique_ptr<FlowLayer>(std::make_unique<AffineCoupling>("check.coupling", 3, 4, r));
       }, false},
  };
}

Shape batched(std::size_t b, const Shape& s) {
  Shape out{b};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

CheckResult identity_check(Rng& rng) {
  real worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(32), k = 1 + rng.below(8);
    Tensor u = normal_batch({n, k}, rng), v = normal_batch({k, n}, rng);
    u = scaled(u, real(0.3));
    v = scaled(v, real(0.3));
    const auto r = woodbury_identity_check(u, v);
    if (r.singular || !r.sign_match) return {"woodbury/sylvester identities", false, "singular or sign mismatch"};
    worst = std::max({worst, r.inverse_residual, r.logdet_residual});
  }
  return {"woodbury/sylvester identities", worst < real(1e-9), fmt("worst residual", worst)};
}

CheckResult round_trip_check(Rng& rng) {
  real worst = 0;
  for (const auto& spec : layer_specs()) {
    auto layer = spec.make(rng);
    perturb_parameters(layer->parameters(), rng, real(0.1));
    const Tensor x = normal_batch(batched(8, spec.shape), rng);
    worst = std::max(worst, max_abs_diff(layer->inverse(layer->evaluate(x).y), x));
  }
  for (auto kind : {PermutationKind::conv1x1, PermutationKind::woodbury, PermutationKind::me_woodbury}) {
    FlowConfig cfg;
    cfg.levels = 2;
    cfg.steps = 2;
    cfg.coupling_channels = 8;
    cfg.permutation = kind;
    cfg.channels = 3;
    cfg.height = cfg.width = 4;
    FlowModel model(cfg, rng.next_u64());
    const Tensor x = normal_batch({8, 3, 4, 4}, rng);
    model.data_init(x);
    perturb_parameters(model.parameters(), rng, real(0.05));
    worst = std::max(worst, max_abs_diff(model.decode(model.encode(x)), x));
  }
  return {"round trips", worst < real(1e-7), fmt("worst error", worst)};
}

CheckResult logdet_check(Rng& rng) {
  real worst_linear = 0, worst_fd = 0;
  for (const auto& spec : layer_specs()) {
    auto layer = spec.make(rng);
    perturb_parameters(layer->parameters(), rng, real(0.2));
    const Tensor x = normal_batch(batched(1, spec.shape), rng);
    const real analytic = layer->evaluate(x).logdet[0];
    if (spec.linear) {
      const auto ref = brute_logdet(dense_jacobian_linear(*layer, spec.shape));
      worst_linear = std::max(worst_linear, std::abs(ref.logabs - analytic));
    } else {
      const auto ref = brute_logdet(fd_jacobian(*layer, x, real(1e-5)));
      worst_fd = std::max(worst_fd, std::abs(ref.logabs - analytic));
    }
  }
  const bool pass = worst_linear < real(1e-8) && worst_fd < real(1e-4);
  return {"log-determinants vs dense Jacobian", pass, fmt("linear", worst_linear) + ", " + fmt("finite-difference", worst_fd)};
}

CheckResult gradient_check(Rng& rng) {
  real worst = 0;
  bool pass = true;
  for (const auto& spec : layer_specs()) {
    auto layer = spec.make(rng);
    perturb_parameters(layer->parameters(), rng, real(0.2));
    const Tensor x = normal_batch(batched(2, spec.shape), rng);
    auto loss = [&](Tape& t) {
      auto out = layer->forward(t, t.constant(x));
      return ad::sub(ad::mul_scalar(ad::sum(ad::square(out.y)), real(0.5)), ad::sum(out.logdet));
    };
    const auto params = layer->parameters();
    if (params.empty()) continue;
    const auto report = check_gradients(loss, params, real(1e-5), real(1e-4));
    pass = pass && report.pass();
    worst = std::max(worst, report.worst_rel());
  }
  return {"parameter gradients vs central differences", pass, fmt("worst relative error", worst)};
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  out.push_back(identity_check(rng));
  out.push_back(round_trip_check(rng));
  out.push_back(logdet_check(rng));
  out.push_back(gradient_check(rng));
  return out;
}

}  // namespace woodflow
