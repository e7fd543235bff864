#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <string>

#include "woodflow/config.hpp"
#include "woodflow/data.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/layers.hpp"
#include "woodflow/model.hpp"
#include "woodflow/selfcheck.hpp"
#include "woodflow/train.hpp"

namespace py = pybind11;
using namespace woodflow;

namespace {

using RealArray = py::array_t<real, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const RealArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<real>(a.data(), a.data() + a.size()));
}

RealArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  RealArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ByteTensor to_bytes(const ByteArray& a) {
  ByteTensor t(Shape(a.shape(), a.shape() + a.ndim()));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

ByteArray to_array(const ByteTensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  ByteArray out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

py::object ntf_to_python(const NtfData& d) {
  if (d.dtype == DType::u8) return to_array(d.bytes);
  return to_array(d.values);
}

// A trainer together with the dataset it reads from.
struct PyTrainer {
  std::unique_ptr<BatchSource> data;
  std::unique_ptr<Trainer> trainer;
};

std::unique_ptr<BatchSource> make_py_source(const py::array& data, unsigned bits) {
  if (py::isinstance<py::array_t<std::uint8_t>>(data)) {
    return std::make_unique<ImageSource>(to_bytes(data.cast<ByteArray>()), bits);
  }
  return std::make_unique<ContinuousSource>(to_tensor(data.cast<RealArray>()));
}

py::dict metrics_dict(const IterationMetrics& m) {
  py::dict d;
  d["iteration"] = m.iteration;
  d["nll"] = m.nll;
  d["bpd"] = m.bpd;
  d["grad_norm"] = m.grad_norm;
  return d;
}

}  // namespace

PYBIND11_MODULE(_woodflow, m) {
  m.doc() = "Woodbury and ME-Woodbury normalizing flows";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  auto numerical = py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<SingularMatrixError>(m, "SingularMatrixError", numerical.ptr());

  py::class_<FlowConfig>(m, "FlowConfig")
      .def(py::init<>())
      .def_readwrite("levels", &FlowConfig::levels)
      .def_readwrite("steps", &FlowConfig::steps)
      .def_readwrite("coupling_channels", &FlowConfig::coupling_channels)
      .def_property(
          "permutation", [](const FlowConfig& c) { return to_string(c.permutation); },
          [](FlowConfig& c, const std::string& s) { c.permutation = parse_permutation(s); })
      .def_readwrite("d_c", &FlowConfig::d_c)
      .def_readwrite("d_s", &FlowConfig::d_s)
      .def_readwrite("d_h", &FlowConfig::d_h)
      .def_readwrite("d_w", &FlowConfig::d_w)
      .def_readwrite("channels", &FlowConfig::channels)
      .def_readwrite("height", &FlowConfig::height)
      .def_readwrite("width", &FlowConfig::width)
      .def_readwrite("bits", &FlowConfig::bits)
      .def_readwrite("squeeze", &FlowConfig::squeeze)
      .def_property_readonly("dimension", &FlowConfig::dimension)
      .def("validate", &FlowConfig::validate);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("flow", &RunConfig::flow)
      .def_readwrite("batch_size", &RunConfig::batch_size)
      .def_readwrite("checkpoint_every", &RunConfig::checkpoint_every)
      .def("__str__", &format_run_config);
  m.def("parse_run_config", &parse_run_config, py::arg("text"));

  py::class_<FlowModel>(m, "FlowModel")
      .def(py::init<const FlowConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &FlowModel::config)
      .def_property_readonly("layer_count", &FlowModel::layer_count)
      .def_property_readonly("initialized", &FlowModel::initialized)
      .def("layer_names",
           [](FlowModel& self) {
             std::vector<std::string> out;
             for (auto* l : self.layers()) out.push_back(l->name());
             return out;
           })
      .def("parameters",
           [](FlowModel& self) {
             py::dict out;
             for (auto* p : self.parameters()) out[py::str(p->name)] = to_array(p->value);
             return out;
           })
      .def("data_init", [](FlowModel& self, const RealArray& x) { self.data_init(to_tensor(x)); })
      .def("mark_initialized", &FlowModel::mark_initialized)
      .def("log_prob", [](FlowModel& self, const RealArray& x) { return to_array(self.log_prob(to_tensor(x))); })
      .def("log_likelihood",
           [](FlowModel& self, const RealArray& x) {
             const Likelihood l = self.log_likelihood(to_tensor(x));
             return py::make_tuple(to_array(l.nll), to_array(l.bpd));
           })
      .def("encode", [](FlowModel& self, const RealArray& x) { return to_array(self.encode(to_tensor(x))); })
      .def("decode", [](const FlowModel& self, const RealArray& z) { return to_array(self.decode(to_tensor(z))); })
      .def(
          "sample",
          [](const FlowModel& self, std::size_t count, real temperature, std::uint64_t seed) {
            return to_array(self.sample(count, temperature, Rng(seed)));
          },
          py::arg("count"), py::arg("temperature") = real(0.7), py::arg("seed") = 0)
      .def(
          "normalization_mass",
          [](FlowModel& self, std::size_t grid, std::uint64_t seed) {
            const auto r = density_normalization_check(self, grid, seed);
            return py::make_tuple(r.mass, r.refined_mass, r.stable);
          },
          py::arg("grid") = 201, py::arg("seed") = 0);

  py::class_<PyTrainer>(m, "Trainer")
      .def(py::init([](const RunConfig& cfg, const py::array& data, std::uint64_t seed) {
             auto t = std::make_unique<PyTrainer>();
             t->data = make_py_source(data, cfg.flow.bits);
             t->trainer = std::make_unique<Trainer>(cfg, seed, *t->data);
             return t;
           }),
           py::arg("config"), py::arg("data"), py::arg("seed") = 0)
      .def_static(
          "resume",
          [](const std::string& dir, const py::array& data) {
            const Checkpoint probe = load_checkpoint(dir);
            auto t = std::make_unique<PyTrainer>();
            t->data = make_py_source(data, probe.config.flow.bits);
            t->trainer = Trainer::resume(dir, *t->data);
            return t;
          },
          py::arg("dir"), py::arg("data"))
      .def_property_readonly("iteration", [](const PyTrainer& t) { return t.trainer->iteration(); })
      .def_property_readonly("model", py::cpp_function([](PyTrainer& t) -> FlowModel& { return t.trainer->model(); },
                                                       py::return_value_policy::reference_internal))
      .def("step", [](PyTrainer& t) { return metrics_dict(t.trainer->step()); })
      .def(
          "run_until",
          [](PyTrainer& t, std::size_t last, const std::string& out_dir) {
            py::list out;
            for (const auto& m : t.trainer->run_until(last, out_dir)) out.append(metrics_dict(m));
            return out;
          },
          py::arg("last"), py::arg("out_dir") = "")
      .def("save", [](const PyTrainer& t, const std::string& dir) { t.trainer->save(dir); })
      .def("evaluate", [](PyTrainer& t, std::uint64_t seed) {
        const EvalResult r = evaluate(t.trainer->model(), *t.data, seed);
        return py::make_tuple(r.nll, r.bpd);
      });

  m.def(
      "ntf_write",
      [](const std::string& path, const py::array& a) {
        if (py::isinstance<py::array_t<std::uint8_t>>(a))
          ntf_write(path, to_bytes(a.cast<ByteArray>()));
        else
          ntf_write(path, to_tensor(a.cast<RealArray>()));
      },
      py::arg("path"), py::arg("array"));
  m.def("ntf_read", [](const std::string& path) { return ntf_to_python(ntf_read(path)); }, py::arg("path"));
  m.def(
      "synth_gaussian_mixture",
      [](std::size_t n, const std::vector<std::size_t>& chw, std::size_t modes, std::uint64_t seed) {
        return to_array(synth_gaussian_mixture(n, Shape(chw.begin(), chw.end()), modes, seed));
      },
      py::arg("n"), py::arg("shape"), py::arg("modes") = 2, py::arg("seed") = 0);
  m.def(
      "synth_gaussian_2d", [](std::size_t n, std::uint64_t seed) { return to_array(synth_gaussian_2d(n, seed)); },
      py::arg("n"), py::arg("seed") = 0);
  m.def(
      "woodbury_identity_check",
      [](const RealArray& u, const RealArray& v) {
        const auto r = woodbury_identity_check(to_tensor(u), to_tensor(v));
        py::dict d;
        d["inverse_residual"] = r.inverse_residual;
        d["logdet_residual"] = r.logdet_residual;
        d["sign_match"] = r.sign_match;
        d["singular"] = r.singular;
        return d;
      },
      py::arg("u"), py::arg("v"));
  m.def(
      "selfcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_selfcheck(seed)) out.append(py::make_tuple(r.name, r.pass, r.detail));
        return out;
      },
      py::arg("seed") = 1);
}
