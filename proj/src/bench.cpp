#include "woodflow/bench.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <new>
#include <ostream>
#include <sstream>

#include "woodflow/errors.hpp"
#include "woodflow/layers.hpp"

namespace woodflow {

std::string to_string(BenchLayer layer) {
  switch (layer) {
    case BenchLayer::woodbury: return "woodbury";
    case BenchLayer::me_woodbury: return "me_woodbury";
    case BenchLayer::conv1x1: return "conv1x1";
    case BenchLayer::dense: return "dense";
  }
  return "?";
}

std::string to_string(BenchPhase phase) {
  switch (phase) {
    case BenchPhase::forward: return "forward";
    case BenchPhase::backward: return "backward";
    case BenchPhase::inverse: return "inverse";
  }
  return "?";
}

BenchLayer parse_bench_layer(const std::string& text) {
  for (auto l : {BenchLayer::woodbury, BenchLayer::me_woodbury, BenchLayer::conv1x1, BenchLayer::dense}) {
    if (to_string(l) == text) return l;
  }
  throw ConfigError("unknown bench layer '" + text + "' (expected woodbury, me_woodbury, conv1x1 or dense)");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope needs at least two matching points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

namespace {

using Clock = std::chrono::steady_clock;

// Per-phase workload; prepare() runs untimed before every repetition.
struct Workload {
  std::function<void()> prepare;
  std::function<void()> run;
};

PhaseTiming time_phase(BenchPhase phase, const Workload& w, std::size_t warmup, std::size_t reps) {
  for (std::size_t i = 0; i < warmup; ++i) {
    if (w.prepare) w.prepare();
    w.run();
  }
  std::vector<double> samples;
  samples.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    if (w.prepare) w.prepare();
    const auto t0 = Clock::now();
    w.run();
    samples.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }
  PhaseTiming t;
  t.phase = phase;
  t.skipped = false;
  t.median_s = percentile(samples, 0.5);
  t.p10_s = percentile(samples, 0.1);
  t.p90_s = percentile(samples, 0.9);
  return t;
}

Tensor random_tensor(const Shape& s, real scale, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<real>(scale * rng.normal());
  return t;
}

// Tape-based layers share one harness.
struct LayerBench {
  std::unique_ptr<FlowLayer> layer;
  Tensor x;
  Tensor y;
  std::unique_ptr<Tape> tape;
  Var loss;
  volatile real sink = 0;

  Workload forward() {
    return {nullptr, [this] {
              Tape t;
              auto out = layer->forward(t, t.constant(x));
              sink = out.logdet.value()[0];
            }};
  }
  Workload backward() {
    tape = std::make_unique<Tape>();
    auto out = layer->forward(*tape, tape->constant(x));
    loss = ad::add(ad::sum(out.y), ad::sum(out.logdet));
    return {nullptr, [this] {
              GradMap g = tape->backward(loss);
              sink = g.begin()->second[0];
            }};
  }
  Workload inverse() {
    y = layer->evaluate(x).y;
    return {nullptr, [this] { sink = layer->inverse(y)[0]; }};
  }
};

std::unique_ptr<FlowLayer> make_layer(const BenchCase& bc, Rng& rng) {
  const std::size_t n = bc.h * bc.w;
  switch (bc.layer) {
    case BenchLayer::woodbury: {
      auto l = std::make_unique<Woodbury>("bench.woodbury", bc.c, bc.h, bc.w, std::min(bc.d, bc.c), std::min(bc.d, n), rng);
      l->v_c() = random_tensor(l->v_c().shape(), 0.05, rng);
      l->v_s() = random_tensor(l->v_s().shape(), 0.05, rng);
      return l;
    }
    case BenchLayer::me_woodbury: {
      auto l = std::make_unique<MEWoodbury>("bench.me_woodbury", bc.c, bc.h, bc.w, std::min(bc.d, bc.c),
                                            std::min(bc.d, bc.h), std::min(bc.d, bc.w), rng);
      l->v_c() = random_tensor(l->v_c().shape(), 0.05, rng);
      l->v_w() = random_tensor(l->v_w().shape(), 0.05, rng);
      l->v_h() = random_tensor(l->v_h().shape(), 0.05, rng);
      return l;
    }
    case BenchLayer::conv1x1: return std::make_unique<Conv1x1>("bench.conv1x1", bc.c, rng);
    case BenchLayer::dense: break;
  }
  return nullptr;
}

// Dense baseline: materializes W_c = I + U_c V_c and W_s = I + U_s V_s, applies
// y = W_c x W_s and takes log-determinants and inverses with dense LU.
struct DenseBench {
  using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic>;
  Mat uc, vc, us, vs, x, y;
  // Saved forward state for the backward phase.
  Mat wc, ws, xws, wcx;
  std::unique_ptr<Eigen::PartialPivLU<Mat>> lu_c, lu_s;
  volatile real sink = 0;

  DenseBench(std::size_t c, std::size_t n, std::size_t d, Rng& rng) {
    auto fill = [&rng](Mat& m, Eigen::Index r, Eigen::Index k) {
      m.resize(r, k);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < k; ++j) m(i, j) = static_cast<real>(0.05 * rng.normal());
    };
    const auto ci = static_cast<Eigen::Index>(c), ni = static_cast<Eigen::Index>(n);
    const auto dc = static_cast<Eigen::Index>(std::min(d, c)), ds = static_cast<Eigen::Index>(std::min(d, n));
    fill(uc, ci, dc);
    fill(vc, dc, ci);
    fill(us, ni, ds);
    fill(vs, ds, ni);
    x.resize(ci, ni);
    for (Eigen::Index i = 0; i < ci; ++i)
      for (Eigen::Index j = 0; j < ni; ++j) x(i, j) = static_cast<real>(rng.normal());
  }

  static real logabsdet(const Eigen::PartialPivLU<Mat>& lu) {
    return lu.matrixLU().diagonal().cwiseAbs().array().log().sum();
  }

  void materialize() {
    wc = Mat::Identity(uc.rows(), uc.rows()) + uc * vc;
    ws = Mat::Identity(us.rows(), us.rows()) + us * vs;
  }

  Workload forward() {
    return {nullptr, [this] {
              materialize();
              y.noalias() = wc * x * ws;
              lu_c = std::make_unique<Eigen::PartialPivLU<Mat>>(wc);
              lu_s = std::make_unique<Eigen::PartialPivLU<Mat>>(ws);
              const real ld = static_cast<real>(x.cols()) * logabsdet(*lu_c) + static_cast<real>(x.rows()) * logabsdet(*lu_s);
              sink = y(0, 0) + ld;
            }};
  }

  Workload backward() {
    materialize();
    xws = x * ws;
    wcx = wc * x;
    lu_c = std::make_unique<Eigen::PartialPivLU<Mat>>(wc);
    lu_s = std::make_unique<Eigen::PartialPivLU<Mat>>(ws);
    return {nullptr, [this] {
              // loss = sum(y) + logdet, dL/dy = 1.
              const Mat g = Mat::Ones(x.rows(), x.cols());
              const Mat dwc = g * xws.transpose() + static_cast<real>(x.cols()) * lu_c->inverse().transpose();
              const Mat dws = wcx.transpose() * g + static_cast<real>(x.rows()) * lu_s->inverse().transpose();
              const Mat duc = dwc * vc.transpose(), dvc = uc.transpose() * dwc;
              const Mat dus = dws * vs.transpose(), dvs = us.transpose() * dws;
              sink = duc(0, 0) + dvc(0, 0) + dus(0, 0) + dvs(0, 0);
            }};
  }

  Workload inverse() {
    materialize();
    y = wc * x * ws;
    return {nullptr, [this] {
              materialize();
              Eigen::PartialPivLU<Mat> lc(wc), lst(ws.transpose());
              const Mat z = lst.solve(y.transpose()).transpose();  // y W_s^-1
              const Mat xr = lc.solve(z);
              sink = xr(0, 0);
            }};
  }
};

}  // namespace

BenchRecord run_case(const BenchCase& bc, std::uint64_t seed) {
  if (bc.reps < 10) throw ContractError("bench: repetitions must be >= 10");
  if (bc.warmup < 3) throw ContractError("bench: warmup must be >= 3");
  if (bc.c == 0 || bc.h == 0 || bc.w == 0 || bc.d == 0) throw ContractError("bench: sizes must be positive");
  BenchRecord rec;
  rec.bench_case = bc;
  for (auto p : {BenchPhase::forward, BenchPhase::backward, BenchPhase::inverse}) rec.timings.push_back({p, true, 0, 0, 0});
  auto wanted = [&](BenchPhase p) { return std::find(bc.phases.begin(), bc.phases.end(), p) != bc.phases.end(); };

  Rng rng = Rng(seed).stream(static_cast<std::uint64_t>(bc.layer));
  const std::size_t n = bc.h * bc.w;
  try {
    if (bc.layer == BenchLayer::dense) {
      const double bytes = 6.0 * static_cast<double>(n) * static_cast<double>(n) * sizeof(real);
      if (bytes > static_cast<double>(bc.memory_limit_bytes)) {
        rec.note = "dense working set exceeds the memory limit";
        return rec;
      }
      DenseBench db(bc.c, n, bc.d, rng);
      if (wanted(BenchPhase::forward)) rec.timings[0] = time_phase(BenchPhase::forward, db.forward(), bc.warmup, bc.reps);
      if (wanted(BenchPhase::backward)) rec.timings[1] = time_phase(BenchPhase::backward, db.backward(), bc.warmup, bc.reps);
      if (wanted(BenchPhase::inverse)) rec.timings[2] = time_phase(BenchPhase::inverse, db.inverse(), bc.warmup, bc.reps);
    } else {
      LayerBench lb;
      lb.layer = make_layer(bc, rng);
      lb.x = random_tensor({1, bc.c, bc.h, bc.w}, 1, rng);
      if (wanted(BenchPhase::forward)) rec.timings[0] = time_phase(BenchPhase::forward, lb.forward(), bc.warmup, bc.reps);
      if (wanted(BenchPhase::backward)) rec.timings[1] = time_phase(BenchPhase::backward, lb.backward(), bc.warmup, bc.reps);
      if (wanted(BenchPhase::inverse)) rec.timings[2] = time_phase(BenchPhase::inverse, lb.inverse(), bc.warmup, bc.reps);
    }
  } catch (const std::bad_alloc&) {
    for (auto& t : rec.timings) t.skipped = true;
    rec.note = "out of memory";
  }
  return rec;
}

std::vector<BenchRecord> run_bench(const std::vector<BenchCase>& cases, std::uint64_t seed) {
  std::vector<BenchRecord> out;
  out.reserve(cases.size());
  for (const auto& bc : cases) out.push_back(run_case(bc, seed));
  return out;
}

void emit_csv(const std::vector<BenchRecord>& records, std::ostream& out) {
  out << "layer,c,h,w,d,phase,median_s,p10_s,p90_s\n";
  for (const auto& r : records) {
    const BenchCase& bc = r.bench_case;
    for (const auto& t : r.timings) {
      out << to_string(bc.layer) << ',' << bc.c << ',' << bc.h << ',' << bc.w << ',' << bc.d << ',' << to_string(t.phase);
      if (t.skipped) {
        out << ",nan,nan,nan\n";
      } else {
        std::ostringstream v;
        v << std::setprecision(9) << ',' << t.median_s << ',' << t.p10_s << ',' << t.p90_s;
        out << v.str() << '\n';
      }
    }
  }
}

void emit_csv(const std::vector<BenchRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  emit_csv(records, f);
  if (!f) throw IoError("error while writing " + path);
}

}  // namespace woodflow
