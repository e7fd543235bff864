#include "woodflow/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "woodflow/errors.hpp"

namespace woodflow {

namespace {

const real kHalfLog2Pi = real(0.5) * std::log(2 * std::numbers::pi_v<real>);

Shape with_batch(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

// Sum over all non-batch axes: (B, ...) -> (B).
Var per_sample_sum(Var v) {
  const Shape s = v.shape();
  return ad::sum_axis(ad::reshape(v, Shape{s[0], shape_numel(s) / s[0]}), 1);
}

void check_list(const std::vector<std::size_t>& list, const std::string& key, std::size_t levels) {
  if (list.empty()) return;
  if (list.size() != levels) {
    throw ConfigError(key + " lists " + std::to_string(list.size()) + " entries but levels = " +
                      std::to_string(levels));
  }
  for (auto d : list) {
    if (d == 0) throw ConfigError(key + " entries must be positive");
  }
}

std::vector<std::size_t> resolve(const std::vector<std::size_t>& list, std::vector<std::size_t> (*fallback)(std::size_t),
                                  std::size_t levels) {
  return list.empty() ? fallback(levels) : list;
}

}  // namespace

std::string to_string(PermutationKind kind) {
  switch (kind) {
    case PermutationKind::conv1x1: return "conv1x1";
    case PermutationKind::woodbury: return "woodbury";
    case PermutationKind::me_woodbury: return "me_woodbury";
  }
  return "?";
}

PermutationKind parse_permutation(const std::string& text) {
  if (text == "conv1x1") return PermutationKind::conv1x1;
  if (text == "woodbury") return PermutationKind::woodbury;
  if (text == "me_woodbury") return PermutationKind::me_woodbury;
  throw ConfigError("unknown permutation '" + text + "' (expected conv1x1, woodbury or me_woodbury)");
}

std::vector<std::size_t> default_channel_schedule(std::size_t levels) {
  switch (levels) {
    case 1: return {8};
    case 2: return {8, 8};
    case 3: return {8, 8, 16};
    case 4: return {8, 8, 16, 16};
    case 5: return {8, 8, 16, 16, 16};
    case 6: return {8, 8, 16, 16, 16, 16};
    default: throw ConfigError("no default d_c schedule for " + std::to_string(levels) + " levels; set d_c explicitly");
  }
}

std::vector<std::size_t> default_spatial_schedule(std::size_t levels) {
  switch (levels) {
    case 1: return {16};
    case 2: return {16, 16};
    case 3: return {16, 16, 8};
    case 4: return {16, 16, 8, 8};
    case 5: return {16, 16, 16, 8, 8};
    case 6: return {16, 16, 16, 16, 8, 8};
    default: throw ConfigError("no default spatial schedule for " + std::to_string(levels) + " levels; set it explicitly");
  }
}

void FlowConfig::validate() const {
  if (levels < 1) throw ConfigError("levels must be >= 1");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (coupling_channels < 1) throw ConfigError("coupling_channels must be >= 1");
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("input shape must be positive");
  if (bits > 8) throw ConfigError("bits must be in [0, 8]");
  if (squeeze) {
    const std::size_t div = std::size_t{1} << levels;
    if (height % div || width % div) {
      throw ConfigError("height and width must be divisible by 2^levels = " + std::to_string(div) + ", got " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
  } else {
    if (levels != 1) throw ConfigError("squeeze = 0 requires levels = 1");
    if (channels < 2) throw ConfigError("squeeze = 0 requires at least 2 input channels for the coupling layers");
  }
  check_list(d_c, "d_c", levels);
  check_list(d_s, "d_s", levels);
  check_list(d_h, "d_h", levels);
  check_list(d_w, "d_w", levels);
  if (permutation != PermutationKind::conv1x1) {
    if (d_c.empty()) default_channel_schedule(levels);
    if (permutation == PermutationKind::woodbury && d_s.empty()) default_spatial_schedule(levels);
    if (permutation == PermutationKind::me_woodbury && (d_h.empty() || d_w.empty())) default_spatial_schedule(levels);
  }
}

// ---- construction ------------------------------------------------------------

FlowModel::FlowModel(const FlowConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t nl = cfg_.levels;
  std::vector<std::size_t> dc, ds, dh, dw;
  if (cfg_.permutation != PermutationKind::conv1x1) {
    dc = resolve(cfg_.d_c, default_channel_schedule, nl);
    ds = resolve(cfg_.d_s, default_spatial_schedule, nl);
    dh = resolve(cfg_.d_h, default_spatial_schedule, nl);
    dw = resolve(cfg_.d_w, default_spatial_schedule, nl);
  }

  Shape shape{cfg_.channels, cfg_.height, cfg_.width};
  for (std::size_t l = 0; l < nl; ++l) {
    Level level;
    level.input_shape = shape;
    const std::string prefix = "level" + std::to_string(l);
    if (cfg_.squeeze) {
      auto sq = std::make_unique<Squeeze>(prefix + ".squeeze");
      shape = sq->output_shape(shape);
      level.layers.push_back(std::move(sq));
    }
    const std::size_t c = shape[0], h = shape[1], w = shape[2];
    for (std::size_t k = 0; k < cfg_.steps; ++k) {
      const std::string step = prefix + ".step" + std::to_string(k);
      level.layers.push_back(std::make_unique<ActNorm>(step + ".actnorm", c));
      switch (cfg_.permutation) {
        case PermutationKind::conv1x1:
          level.layers.push_back(std::make_unique<Conv1x1>(step + ".conv1x1", c, rng));
          break;
        case PermutationKind::woodbury:
          level.layers.push_back(std::make_unique<Woodbury>(step + ".woodbury", c, h, w, std::min(dc[l], c),
                                                            std::min(ds[l], h * w), rng));
          break;
        case PermutationKind::me_woodbury:
          level.layers.push_back(std::make_unique<MEWoodbury>(step + ".me_woodbury", c, h, w, std::min(dc[l], c),
                                                              std::min(dh[l], h), std::min(dw[l], w), rng));
          break;
      }
      level.layers.push_back(std::make_unique<AffineCoupling>(step + ".coupling", c, cfg_.coupling_channels, rng));
    }
    level.output_shape = shape;
    if (l + 1 < nl) {
      level.split = std::make_unique<SplitPrior>(prefix + ".split", c);
      shape = {c / 2, h, w};
    }
    levels_.push_back(std::move(level));
  }
}

std::size_t FlowModel::layer_count() const {
  std::size_t n = 0;
  for (const auto& level : levels_) n += level.layers.size() + (level.split ? 1 : 0);
  return n;
}

std::vector<FlowLayer*> FlowModel::layers() {
  std::vector<FlowLayer*> out;
  for (auto& level : levels_)
    for (auto& layer : level.layers) out.push_back(layer.get());
  return out;
}

std::vector<Parameter*> FlowModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& level : levels_) {
    for (auto& layer : level.layers)
      for (auto* p : layer->parameters()) out.push_back(p);
    if (level.split)
      for (auto* p : level.split->parameters()) out.push_back(p);
  }
  return out;
}

bool FlowModel::initialized() const {
  for (const auto& level : levels_)
    for (const auto& layer : level.layers)
      if (layer->needs_data_init()) return false;
  return true;
}

void FlowModel::mark_initialized() {
  for (auto* layer : layers())
    if (auto* an = dynamic_cast<ActNorm*>(layer)) an->set_initialized(true);
}

void FlowModel::data_init(const Tensor& x) {
  Tape tape;
  run(tape, tape.constant(x), true, nullptr);
}

// ---- forward -----------------------------------------------------------------

FlowModel::Pass FlowModel::run(Tape& tape, Var x, bool init, LayerTrace* trace) {
  const Shape in = x.shape();
  const Shape expected = with_batch(in.empty() ? 0 : in[0], {cfg_.channels, cfg_.height, cfg_.width});
  if (in != expected) {
    throw DimensionError("model expects a batch of shape " + shape_str(expected) + ", got " + shape_str(in));
  }
  const std::size_t batch = in[0];
  Pass pass;
  pass.logdet = tape.constant(Tensor(Shape{batch}));
  pass.prior = tape.constant(Tensor(Shape{batch}));
  Var h = x;
  std::size_t index = 0;
  for (auto& level : levels_) {
    for (auto& layer : level.layers) {
      if (init && layer->needs_data_init()) layer->data_init(h.value());
      LayerOutput out = layer->forward(tape, h);
      if (!all_finite(out.y.value()) || !all_finite(out.logdet.value())) {
        throw NumericalError("non-finite output in layer " + std::to_string(index) + " (" + layer->name() + ")");
      }
      if (trace) {
        trace->names.push_back(layer->name());
        trace->logdets.push_back(out.logdet.value());
      }
      pass.logdet = ad::add(pass.logdet, out.logdet);
      h = out.y;
      ++index;
    }
    if (level.split) {
      auto so = level.split->forward(tape, h);
      if (!all_finite(so.logp.value())) {
        throw NumericalError("non-finite prior in layer " + std::to_string(index) + " (" + level.split->name() + ")");
      }
      if (trace) trace->split_logp.push_back(so.logp.value());
      pass.prior = ad::add(pass.prior, so.logp);
      pass.latents.push_back(so.factored);
      h = so.retained;
      ++index;
    }
  }
  pass.latents.push_back(h);
  const real dims = static_cast<real>(shape_numel(h.shape()) / batch);
  Var base = ad::add_scalar(ad::mul_scalar(per_sample_sum(ad::square(h)), real(-0.5)), -kHalfLog2Pi * dims);
  if (trace) trace->base_logp = base.value();
  pass.prior = ad::add(pass.prior, base);
  return pass;
}

Var FlowModel::log_prob(Tape& tape, Var x) {
  Pass pass = run(tape, x, false, nullptr);
  return ad::add(pass.prior, pass.logdet);
}

Tensor FlowModel::log_prob(const Tensor& x) {
  Tape tape;
  return log_prob(tape, tape.constant(x)).value();
}

Likelihood FlowModel::log_likelihood(const Tensor& x) {
  const Tensor lp = log_prob(x);
  Likelihood out{Tensor(lp.shape()), Tensor(lp.shape())};
  const real denom = static_cast<real>(cfg_.dimension()) * std::numbers::ln2_v<real>;
  for (std::size_t i = 0; i < lp.numel(); ++i) {
    out.nll[i] = -lp[i];
    out.bpd[i] = out.nll[i] / denom + static_cast<real>(cfg_.bits);
  }
  return out;
}

LayerTrace FlowModel::trace(const Tensor& x) {
  LayerTrace t;
  Tape tape;
  run(tape, tape.constant(x), false, &t);
  return t;
}

// ---- latents -----------------------------------------------------------------

Tensor FlowModel::encode(const Tensor& x) {
  Tape tape;
  Pass pass = run(tape, tape.constant(x), false, nullptr);
  const std::size_t batch = x.dim(0);
  Tensor out(Shape{batch, cfg_.dimension()});
  std::size_t offset = 0;
  for (const Var& z : pass.latents) {
    const std::size_t per = z.value().numel() / batch;
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(z.value().raw() + b * per, per, out.raw() + b * cfg_.dimension() + offset);
    offset += per;
  }
  return out;
}

Tensor FlowModel::decode(const Tensor& z) const {
  if (z.ndim() != 2 || z.dim(1) != cfg_.dimension()) {
    throw DimensionError("decode expects (B, " + std::to_string(cfg_.dimension()) + "), got " + shape_str(z.shape()));
  }
  const std::size_t batch = z.dim(0), total = cfg_.dimension();
  // Offsets of each factored block, then the final latent.
  std::vector<Shape> shapes;
  for (const auto& level : levels_) {
    if (level.split) shapes.push_back({level.output_shape[0] / 2, level.output_shape[1], level.output_shape[2]});
  }
  shapes.push_back(levels_.back().output_shape);
  std::vector<Tensor> blocks;
  std::size_t offset = 0;
  for (const auto& s : shapes) {
    const std::size_t per = shape_numel(s);
    Tensor block(with_batch(batch, s));
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(z.raw() + b * total + offset, per, block.raw() + b * per);
    blocks.push_back(std::move(block));
    offset += per;
  }
  Tensor h = blocks.back();
  std::size_t next_factored = blocks.size() - 1;
  for (auto level = levels_.rbegin(); level != levels_.rend(); ++level) {
    if (level->split) h = level->split->inverse_given(h, blocks[--next_factored]);
    for (auto layer = level->layers.rbegin(); layer != level->layers.rend(); ++layer) h = (*layer)->inverse(h);
  }
  return h;
}

Tensor FlowModel::sample(std::size_t count, real temperature, const Rng& rng) const {
  if (!(temperature >= 0)) throw ContractError("sample: temperature must be non-negative");
  for (const auto& level : levels_)
    for (const auto& layer : level.layers)
      if (layer->needs_data_init()) throw ContractError("sample: " + layer->name() + " is not initialized");
  std::vector<Rng> rngs;
  rngs.reserve(count);
  for (std::size_t b = 0; b < count; ++b) rngs.push_back(rng.stream(b));
  Tensor h = scaled(draw_normal(with_batch(count, levels_.back().output_shape), rngs), temperature);
  for (auto level = levels_.rbegin(); level != levels_.rend(); ++level) {
    if (level->split) h = level->split->inverse(h, temperature, rngs);
    for (auto layer = level->layers.rbegin(); layer != level->layers.rend(); ++layer) h = (*layer)->inverse(h);
  }
  return h;
}

// ---- normalization -----------------------------------------------------------

namespace {

real trapezoid_mass(FlowModel& model, std::size_t grid, const real lo[2], const real hi[2]) {
  const real dx = (hi[0] - lo[0]) / static_cast<real>(grid - 1);
  const real dy = (hi[1] - lo[1]) / static_cast<real>(grid - 1);
  const Shape point_shape{model.config().channels, model.config().height, model.config().width};
  real mass = 0;
  // One grid row per batch.
  for (std::size_t i = 0; i < grid; ++i) {
    Tensor batch(with_batch(grid, point_shape));
    for (std::size_t j = 0; j < grid; ++j) {
      batch[2 * j] = lo[0] + dx * static_cast<real>(i);
      batch[2 * j + 1] = lo[1] + dy * static_cast<real>(j);
    }
    const Tensor lp = model.log_prob(batch);
    const real wi = (i == 0 || i + 1 == grid) ? real(0.5) : real(1);
    for (std::size_t j = 0; j < grid; ++j) {
      const real wj = (j == 0 || j + 1 == grid) ? real(0.5) : real(1);
      mass += wi * wj * std::exp(lp[j]);
    }
  }
  return mass * dx * dy;
}

}  // namespace

NormalizationReport density_normalization_check(FlowModel& model, std::size_t grid, std::uint64_t seed) {
  if (model.config().dimension() != 2) {
    throw ContractError("density_normalization_check needs a model on R^2, got dimension " +
                        std::to_string(model.config().dimension()));
  }
  if (grid < 3) throw ContractError("density_normalization_check: grid must have at least 3 points per axis");
  constexpr std::size_t kSamples = 4096;
  const Tensor s = model.sample(kSamples, 1, Rng(seed));
  NormalizationReport r;
  for (int a = 0; a < 2; ++a) {
    real mean = 0, sq = 0;
    for (std::size_t b = 0; b < kSamples; ++b) mean += s[2 * b + a];
    mean /= kSamples;
    for (std::size_t b = 0; b < kSamples; ++b) sq += (s[2 * b + a] - mean) * (s[2 * b + a] - mean);
    const real sd = std::sqrt(sq / kSamples);
    r.lo[a] = mean - 8 * sd;
    r.hi[a] = mean + 8 * sd;
  }
  r.mass = trapezoid_mass(model, grid, r.lo, r.hi);
  r.refined_mass = trapezoid_mass(model, 2 * grid - 1, r.lo, r.hi);
  r.stable = std::abs(r.mass - r.refined_mass) < real(1e-4);
  return r;
}

}  // namespace woodflow
