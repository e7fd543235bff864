#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "woodflow/bench.hpp"
#include "woodflow/config.hpp"
#include "woodflow/data.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/selfcheck.hpp"
#include "woodflow/train.hpp"

namespace woodflow::cli {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> parse_dims(const std::string& s, std::size_t expected) {
  std::vector<std::size_t> out;
  for (const auto& part : split(s, 'x')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(part, &used));
      if (used != part.size() || out.back() == 0) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("bad size '" + s + "'");
    }
  }
  if (out.size() != expected) throw ConfigError("bad size '" + s + "': expected " + std::to_string(expected) + " factors");
  return out;
}

std::unique_ptr<BatchSource> load_source(const std::string& path, unsigned bits) {
  return make_source(ntf_read(path), bits);
}

struct TrainArgs {
  std::string config, data, out;
  std::size_t iters = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool resume = false;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  std::unique_ptr<Trainer> trainer;
  std::unique_ptr<BatchSource> source;
  if (a.resume) {
    const Checkpoint probe = load_checkpoint(a.out);
    source = load_source(a.data, probe.config.flow.bits == 0 ? 8 : probe.config.flow.bits);
    trainer = Trainer::resume(a.out, *source);
  } else {
    const RunConfig cfg = read_run_config(a.config);
    source = load_source(a.data, cfg.flow.bits);
    trainer = std::make_unique<Trainer>(cfg, a.seed, *source);
  }
  trainer->set_threads(a.threads);
  if (trainer->iteration() > a.iters) {
    throw ConfigError("checkpoint is already at iteration " + std::to_string(trainer->iteration()) +
                      ", beyond --iters " + std::to_string(a.iters));
  }
  const auto metrics = trainer->run_until(a.iters, a.out);
  out << "iterations " << trainer->iteration() << "\n";
  if (!metrics.empty()) out << "last " << format_metrics(metrics.back()) << "\n";
  out << "checkpoint " << a.out << "\n";
  return kOk;
}

int run_eval(const std::string& ckpt, const std::string& data, std::uint64_t seed, std::size_t threads,
             std::ostream& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  const FlowConfig& f = ck.config.flow;
  auto source = load_source(data, f.bits == 0 ? 8 : f.bits);
  if (source->sample_shape() != Shape{f.channels, f.height, f.width} || source->bits() != f.bits) {
    throw DataError("dataset " + shape_str(source->sample_shape()) + " does not match the checkpoint input " +
                    shape_str({f.channels, f.height, f.width}));
  }
  const EvalResult r = evaluate(*ck.model, *source, seed, threads);
  out << std::fixed << std::setprecision(4) << "samples " << r.samples << "\n"
      << "mean_nll_nats " << r.nll << "\n"
      << "mean_bpd " << r.bpd << "\n";
  return kOk;
}

int run_sample(const std::string& ckpt, std::size_t num, double temperature, std::uint64_t seed,
               const std::string& path, std::ostream& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  const Tensor x = ck.model->sample(num, static_cast<real>(temperature), Rng(seed));
  if (!all_finite(x)) throw NumericalError("sampling produced non-finite values");
  ntf_write(path, x);
  out << "wrote " << num << " samples of shape " << shape_str(ck.model->levels().front().input_shape) << " to "
      << path << "\n";
  return kOk;
}

struct BenchArgs {
  std::string layers = "woodbury,me_woodbury,conv1x1,dense";
  std::string sizes = "16x16,32x32,64x64";
  std::size_t c = 16, d = 16, reps = 50, warmup = 3, threads = 1;
  std::string out = "bench.csv";
  std::uint64_t seed = 0;
};

int run_bench_cmd(const BenchArgs& a, std::ostream& out) {
  std::vector<BenchCase> cases;
  for (const auto& layer : split(a.layers, ',')) {
    const BenchLayer kind = parse_bench_layer(layer);
    for (const auto& size : split(a.sizes, ',')) {
      const auto hw = parse_dims(size, 2);
      BenchCase bc;
      bc.layer = kind;
      bc.c = a.c;
      bc.h = hw[0];
      bc.w = hw[1];
      bc.d = a.d;
      bc.reps = a.reps;
      bc.warmup = a.warmup;
      bc.threads = a.threads;
      cases.push_back(bc);
    }
  }
  if (cases.empty()) throw ConfigError("no bench cases selected");
  std::vector<BenchRecord> records;
  for (const auto& bc : cases) {
    records.push_back(run_case(bc, a.seed));
    const auto& r = records.back();
    out << to_string(bc.layer) << " c=" << bc.c << " " << bc.h << "x" << bc.w << " d=" << bc.d;
    for (const auto& t : r.timings) {
      out << "  " << to_string(t.phase) << "=";
      if (t.skipped) {
        out << "skipped";
      } else {
        out << std::scientific << std::setprecision(3) << t.median_s << "s" << std::defaultfloat;
      }
    }
    if (!r.note.empty()) out << "  (" << r.note << ")";
    out << "\n" << std::flush;
  }
  emit_csv(records, a.out);
  out << "wrote " << a.out << "\n";
  return kOk;
}

int run_selfcheck_cmd(std::uint64_t seed, std::ostream& out) {
  bool all = true;
  for (const auto& r : run_selfcheck(seed)) {
    out << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
    all = all && r.pass;
  }
  out << (all ? "selfcheck passed" : "selfcheck failed") << "\n";
  return all ? kOk : kNumerical;
}

struct SynthArgs {
  std::string kind = "images";
  std::size_t n = 1024;
  std::string shape = "1x8x8";
  std::size_t modes = 2;
  std::uint64_t seed = 0;
  std::string out;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  if (a.kind == "images") {
    const auto chw = parse_dims(a.shape, 3);
    ntf_write(a.out, synth_gaussian_mixture(a.n, {chw[0], chw[1], chw[2]}, a.modes, a.seed));
  } else if (a.kind == "2d") {
    ntf_write(a.out, synth_gaussian_2d(a.n, a.seed));
  } else {
    throw ConfigError("unknown synth kind '" + a.kind + "' (expected images or 2d)");
  }
  out << "wrote " << a.n << " samples to " << a.out << "\n";
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Woodbury normalizing flows: train, evaluate, sample, benchmark"};
  app.name("woodflow");
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a flow and write a checkpoint directory");
  train->add_option("--config", ta.config, "key=value model config");
  train->add_option("--data", ta.data, "NTF dataset (N, C, H, W)")->required();
  train->add_option("--iters", ta.iters, "train until this iteration")->required();
  train->add_option("--seed", ta.seed, "seed for initialization and minibatches");
  train->add_option("--out", ta.out, "checkpoint directory")->required();
  train->add_option("--threads", ta.threads, "data-parallel workers")->check(CLI::PositiveNumber);
  train->add_flag("--resume", ta.resume, "continue from the checkpoint in --out");

  std::string ckpt, data_path, out_path;
  std::uint64_t seed = 0;
  std::size_t threads = 1, num = 16;
  double temperature = 0.7;
  auto* eval = app.add_subcommand("eval", "mean bits per dimension of a dataset");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data_path, "NTF dataset")->required();
  eval->add_option("--seed", seed, "dequantization noise seed");
  eval->add_option("--threads", threads, "data-parallel workers")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "draw samples by inverting the flow");
  sample->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  sample->add_option("--num", num, "number of samples");
  sample->add_option("--temperature", temperature, "latent standard deviation")->check(CLI::NonNegativeNumber);
  sample->add_option("--seed", seed, "sampling seed");
  sample->add_option("--out", out_path, "output NTF file")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time forward, backward and inverse passes");
  bench->add_option("--layers", ba.layers, "comma list of woodbury, me_woodbury, conv1x1, dense");
  bench->add_option("--sizes", ba.sizes, "comma list of HxW");
  bench->add_option("--c", ba.c, "channels");
  bench->add_option("--d", ba.d, "latent dimension");
  bench->add_option("--reps", ba.reps, "timed repetitions (>= 10)");
  bench->add_option("--warmup", ba.warmup, "untimed repetitions (>= 3)");
  bench->add_option("--threads", ba.threads, "recorded thread count");
  bench->add_option("--seed", ba.seed, "parameter seed");
  bench->add_option("--out", ba.out, "CSV output path");

  std::uint64_t check_seed = 1;
  auto* selfcheck = app.add_subcommand("selfcheck", "run the identity, round-trip, log-det and gradient checks");
  selfcheck->add_option("--seed", check_seed, "seed");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic NTF dataset");
  synth->add_option("--kind", sa.kind, "images or 2d");
  synth->add_option("--n", sa.n, "number of samples");
  synth->add_option("--shape", sa.shape, "CxHxW for images");
  synth->add_option("--modes", sa.modes, "mixture components for images");
  synth->add_option("--seed", sa.seed, "seed");
  synth->add_option("--out", sa.out, "output NTF file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (train->parsed()) {
      if (!ta.resume && ta.config.empty()) throw ConfigError("train needs --config unless --resume is given");
      return run_train(ta, out);
    }
    if (eval->parsed()) return run_eval(ckpt, data_path, seed, threads, out);
    if (sample->parsed()) return run_sample(ckpt, num, temperature, seed, out_path, out);
    if (bench->parsed()) return run_bench_cmd(ba, out);
    if (selfcheck->parsed()) return run_selfcheck_cmd(check_seed, out);
    if (synth->parsed()) return run_synth(sa, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace woodflow::cli
