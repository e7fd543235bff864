#include "woodflow/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "woodflow/errors.hpp"

namespace woodflow {

namespace fs = std::filesystem;

// ---- Adam --------------------------------------------------------------------

void adam_step(std::span<Parameter* const> params, const GradMap& grads, AdamState& st) {
  for (const Parameter* p : params) {
    auto it = grads.find(p->name);
    if (it == grads.end()) continue;
    if (it->second.shape() != p->value.shape()) {
      throw DimensionError("gradient for " + p->name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                           shape_str(p->value.shape()));
    }
    if (!all_finite(it->second)) throw NumericalError("non-finite gradient for parameter " + p->name);
  }
  ++st.t;
  const AdamHyper& h = st.hyper;
  const real c1 = 1 - std::pow(h.beta1, static_cast<real>(st.t));
  const real c2 = 1 - std::pow(h.beta2, static_cast<real>(st.t));
  for (Parameter* p : params) {
    auto git = grads.find(p->name);
    const std::size_t n = p->value.numel();
    auto [mit, m_new] = st.m.try_emplace(p->name, p->value.shape());
    auto [vit, v_new] = st.v.try_emplace(p->name, p->value.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < n; ++i) {
      const real g = git == grads.end() ? real(0) : git->second[i];
      m[i] = h.beta1 * m[i] + (1 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1 - h.beta2) * g * g;
      const real mhat = m[i] / c1;
      const real vhat = v[i] / c2;
      p->value[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

real grad_norm(const GradMap& grads) {
  real sq = 0;
  for (const auto& [name, g] : grads)
    for (std::size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  return std::sqrt(sq);
}

// ---- loss --------------------------------------------------------------------

namespace {

Tensor batch_rows(const Tensor& x, std::size_t first, std::size_t count) { return slice_axis(x, 0, first, count); }

struct ShardResult {
  real nll_sum = 0;
  GradMap grads;
  std::exception_ptr error;
};

void run_shard(FlowModel& model, const Tensor& x, real inv_batch, ShardResult& out) {
  try {
    Tape tape;
    Var lp = model.log_prob(tape, tape.constant(x));
    Var loss = ad::mul_scalar(ad::sum(lp), -inv_batch);
    for (std::size_t i = 0; i < lp.value().numel(); ++i) out.nll_sum -= lp.value()[i];
    out.grads = tape.backward(loss);
  } catch (...) {
    out.error = std::current_exception();
  }
}

}  // namespace

LossAndGrad loss_and_grad(FlowModel& model, const Tensor& x, std::size_t threads) {
  const std::size_t batch = x.dim(0);
  if (batch == 0) throw ContractError("loss_and_grad: empty batch");
  const std::size_t shards = std::max<std::size_t>(1, std::min(threads, batch));
  const real inv_batch = real(1) / static_cast<real>(batch);
  std::vector<ShardResult> results(shards);
  if (shards == 1) {
    run_shard(model, x, inv_batch, results[0]);
  } else {
    std::vector<std::thread> workers;
    std::size_t first = 0;
    for (std::size_t s = 0; s < shards; ++s) {
      const std::size_t count = batch / shards + (s < batch % shards ? 1 : 0);
      workers.emplace_back([&, s, first, count] { run_shard(model, batch_rows(x, first, count), inv_batch, results[s]); });
      first += count;
    }
    for (auto& w : workers) w.join();
  }
  LossAndGrad out;
  for (auto& r : results) {
    if (r.error) std::rethrow_exception(r.error);
    out.nll += r.nll_sum;
    if (out.grads.empty()) {
      out.grads = std::move(r.grads);
    } else {
      for (auto& [name, g] : r.grads) out.grads[name] = out.grads[name] + g;
    }
  }
  out.nll *= inv_batch;
  const FlowConfig& cfg = model.config();
  out.bpd = out.nll / (static_cast<real>(cfg.dimension()) * std::numbers::ln2_v<real>) + static_cast<real>(cfg.bits);
  return out;
}

EvalResult evaluate(FlowModel& model, const BatchSource& data, std::uint64_t seed, std::size_t threads,
                    std::size_t chunk) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  if (chunk == 0) chunk = 1;
  const Rng root(seed);
  EvalResult r;
  real nll_sum = 0;
  for (std::size_t first = 0, k = 0; first < data.size(); first += chunk, ++k) {
    const std::size_t count = std::min(chunk, data.size() - first);
    Rng rng = root.stream(k);
    const Tensor x = data.rows(first, count, rng);
    const std::size_t shards = std::max<std::size_t>(1, std::min(threads, count));
    std::vector<Tensor> parts(shards);
    std::vector<std::exception_ptr> errors(shards);
    auto work = [&](std::size_t s, std::size_t a, std::size_t n) {
      try {
        parts[s] = model.log_prob(batch_rows(x, a, n));
      } catch (...) {
        errors[s] = std::current_exception();
      }
    };
    if (shards == 1) {
      work(0, 0, count);
    } else {
      std::vector<std::thread> workers;
      std::size_t a = 0;
      for (std::size_t s = 0; s < shards; ++s) {
        const std::size_t n = count / shards + (s < count % shards ? 1 : 0);
        workers.emplace_back(work, s, a, n);
        a += n;
      }
      for (auto& w : workers) w.join();
    }
    for (std::size_t s = 0; s < shards; ++s) {
      if (errors[s]) std::rethrow_exception(errors[s]);
      for (std::size_t i = 0; i < parts[s].numel(); ++i) nll_sum -= parts[s][i];
    }
  }
  r.samples = data.size();
  r.nll = nll_sum / static_cast<real>(data.size());
  const FlowConfig& cfg = model.config();
  r.bpd = r.nll / (static_cast<real>(cfg.dimension()) * std::numbers::ln2_v<real>) + static_cast<real>(cfg.bits);
  return r;
}

// ---- Trainer -----------------------------------------------------------------

namespace {

RunConfig bind_to_data(RunConfig cfg, const BatchSource& data) {
  const Shape s = data.sample_shape();
  cfg.flow.channels = s[0];
  cfg.flow.height = s[1];
  cfg.flow.width = s[2];
  cfg.flow.bits = data.bits();
  return cfg;
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg, std::uint64_t seed, const BatchSource& data, bool init)
    : cfg_(bind_to_data(cfg, data)), seed_(seed), data_(&data) {
  model_ = std::make_unique<FlowModel>(cfg_.flow, seed_);
  if (init) {
    Rng rng = Rng(seed_).stream(0);
    model_->data_init(data.draw(cfg_.batch_size, rng));
  }
}

Trainer::Trainer(const RunConfig& cfg, std::uint64_t seed, const BatchSource& data) : Trainer(cfg, seed, data, true) {}

std::unique_ptr<Trainer> Trainer::resume(const std::string& dir, const BatchSource& data) {
  Checkpoint ck = load_checkpoint(dir);
  const Shape s = data.sample_shape();
  const FlowConfig& f = ck.config.flow;
  if (s != Shape{f.channels, f.height, f.width} || data.bits() != f.bits) {
    throw DataError("dataset shape " + shape_str(s) + " / bits " + std::to_string(data.bits()) +
                    " does not match the checkpoint");
  }
  std::unique_ptr<Trainer> t(new Trainer(ck.config, ck.seed, data, false));
  t->model_ = std::move(ck.model);
  t->adam_ = std::move(ck.adam);
  t->iteration_ = ck.iteration;
  return t;
}

IterationMetrics Trainer::step() {
  const std::size_t next = iteration_ + 1;
  Rng rng = Rng(seed_).stream(next);
  const Tensor x = data_->draw(cfg_.batch_size, rng);
  LossAndGrad lg = loss_and_grad(*model_, x, threads_);
  IterationMetrics m{next, lg.nll, lg.bpd, grad_norm(lg.grads)};
  if (!std::isfinite(m.nll)) throw NumericalError("non-finite loss at iteration " + std::to_string(next));
  const auto params = model_->parameters();
  adam_step(params, lg.grads, adam_);
  iteration_ = next;
  if (observer_) observer_(m);
  return m;
}

std::vector<IterationMetrics> Trainer::run_until(std::size_t last, const std::string& out_dir) {
  std::vector<IterationMetrics> out;
  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(fs::path(out_dir) / "metrics.log", iteration_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open metrics log in " + out_dir);
  }
  while (iteration_ < last) {
    IterationMetrics m;
    try {
      m = step();
    } catch (const NumericalError&) {
      if (!out_dir.empty()) save(out_dir);
      throw;
    }
    out.push_back(m);
    if (log) log << format_metrics(m) << "\n" << std::flush;
    if (!out_dir.empty() && cfg_.checkpoint_every && iteration_ % cfg_.checkpoint_every == 0 && iteration_ < last) {
      save(out_dir);
    }
  }
  if (!out_dir.empty()) save(out_dir);
  return out;
}

void Trainer::save(const std::string& dir) const { save_checkpoint(dir, cfg_, seed_, iteration_, *model_, adam_); }

std::string format_metrics(const IterationMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu %.10g %.10g %.10g", m.iteration, static_cast<double>(m.nll),
                static_cast<double>(m.bpd), static_cast<double>(m.grad_norm));
  return buf;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr const char* kManifest = "manifest.txt";
constexpr const char* kTensors = "params.ntfb";
constexpr const char* kConfigPrefix = "config.";

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw FormatError("checkpoint manifest: bad value for " + key + ": '" + v + "'", 0);
  }
}

}  // namespace

void save_checkpoint(const std::string& dir, const RunConfig& cfg, std::uint64_t seed, std::size_t iteration,
                     FlowModel& model, const AdamState& adam) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  TensorBundle bundle;
  for (const Parameter* p : model.parameters()) bundle.emplace("param/" + p->name, p->value);
  for (const auto& [name, t] : adam.m) bundle.emplace("adam_m/" + name, t);
  for (const auto& [name, t] : adam.v) bundle.emplace("adam_v/" + name, t);
  bundle_write((fs::path(dir) / kTensors).string(), bundle);

  std::ostringstream man;
  man << "format=woodflow-checkpoint-1\n"
      << "iteration=" << iteration << "\n"
      << "seed=" << seed << "\n"
      << "adam_t=" << adam.t << "\n"
      << "actnorm_initialized=" << (model.initialized() ? 1 : 0) << "\n";
  std::istringstream lines(format_run_config(cfg));
  for (std::string line; std::getline(lines, line);) man << kConfigPrefix << line << "\n";
  const std::string text = man.str();
  write_file((fs::path(dir) / kManifest).string(),
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Checkpoint load_checkpoint(const std::string& dir) {
  const auto raw = read_file((fs::path(dir) / kManifest).string());
  std::istringstream in(std::string(raw.begin(), raw.end()));
  std::string config_text;
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint manifest: malformed line '" + line + "'", 0);
    const std::string key = line.substr(0, eq);
    if (key.rfind(kConfigPrefix, 0) == 0) {
      config_text += line.substr(std::string(kConfigPrefix).size()) + "\n";
    } else {
      kv[key] = line.substr(eq + 1);
    }
  }
  if (kv["format"] != "woodflow-checkpoint-1") throw FormatError("not a woodflow checkpoint: " + dir, 0);
  for (const char* key : {"iteration", "seed", "adam_t", "actnorm_initialized"}) {
    if (!kv.count(key)) throw FormatError(std::string("checkpoint manifest lacks ") + key, 0);
  }
  Checkpoint ck;
  ck.config = parse_run_config(config_text);
  ck.seed = parse_u64("seed", kv["seed"]);
  ck.iteration = parse_u64("iteration", kv["iteration"]);
  ck.adam.t = parse_u64("adam_t", kv["adam_t"]);
  ck.model = std::make_unique<FlowModel>(ck.config.flow, ck.seed);

  TensorBundle bundle = bundle_read((fs::path(dir) / kTensors).string());
  for (Parameter* p : ck.model->parameters()) {
    auto it = bundle.find("param/" + p->name);
    if (it == bundle.end()) throw FormatError("checkpoint lacks parameter " + p->name, 0);
    if (it->second.shape() != p->value.shape()) {
      throw FormatError("checkpoint parameter " + p->name + " has shape " + shape_str(it->second.shape()), 0);
    }
    p->value = it->second;
  }
  for (auto& [name, t] : bundle) {
    if (name.rfind("adam_m/", 0) == 0) ck.adam.m.emplace(name.substr(7), t);
    if (name.rfind("adam_v/", 0) == 0) ck.adam.v.emplace(name.substr(7), t);
  }
  if (parse_u64("actnorm_initialized", kv["actnorm_initialized"]) != 0) ck.model->mark_initialized();
  return ck;
}

}  // namespace woodflow
