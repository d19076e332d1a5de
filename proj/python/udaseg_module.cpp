// Python bindings: geometry, latent fusion, deformation, metrics, config and
// the command-line entry point. Arrays cross the boundary as float64 numpy.
#include <cstring>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "udaseg/cli.hpp"
#include "udaseg/config.hpp"
#include "udaseg/deformation.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/evaluation.hpp"
#include "udaseg/latent.hpp"
#include "udaseg/simplex.hpp"

namespace py = pybind11;
using namespace udaseg;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const F64Array& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

F64Array to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  F64Array out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * c.numel());
  return out;
}

LabelMap label_map(const U8Array& a) {
  if (a.ndim() != 2) throw DimensionError("label maps must be 2-D");
  LabelMap m{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), {}};
  m.data.assign(a.data(), a.data() + a.size());
  return m;
}

}  // namespace

PYBIND11_MODULE(udaseg, m) {
  m.doc() = "Bindings for the udaseg C++ core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  m.def("fisher_rao_distance",
        [](std::vector<double> a, std::vector<double> b) {
          return fisher_rao_distance(CompositionWeights(std::move(a)), CompositionWeights(std::move(b)));
        },
        py::arg("a"), py::arg("b"));
  m.def("geodesic_interpolate",
        [](std::vector<double> a, std::vector<double> b, double alpha) {
          return geodesic_interpolate(CompositionWeights(std::move(a)), CompositionWeights(std::move(b)), alpha)
              .vector();
        },
        py::arg("a"), py::arg("b"), py::arg("alpha"));

  m.def("fuse_gaussians",
        [](const F64Array& means, const F64Array& variances, std::vector<double> weights) {
          auto w = torch::tensor(CompositionWeights(std::move(weights)).vector(), torch::kFloat64).unsqueeze(0);
          auto g = fuse_gaussians(to_tensor(means), to_tensor(variances), w);
          return py::make_tuple(to_numpy(g.mean[0]), to_numpy(g.variance[0]));
        },
        py::arg("means"), py::arg("variances"), py::arg("weights"),
        "Precision-weighted fusion of [M, ...] Gaussians; returns (mean, variance).");
  m.def("kl_diag_gaussian",
        [](const F64Array& qm, const F64Array& qv, const F64Array& pm, const F64Array& pv) {
          return kl_diag_gaussian({to_tensor(qm), to_tensor(qv)}, {to_tensor(pm), to_tensor(pv)}).item<double>();
        },
        py::arg("q_mean"), py::arg("q_var"), py::arg("p_mean"), py::arg("p_var"));

  m.def("exponentiate",
        [](const F64Array& velocity, int steps) {
          auto v = to_tensor(velocity);
          if (v.dim() != 3 || v.size(0) != 2) throw DimensionError("velocity must be [2, H, W]");
          return to_numpy(exponentiate(v.unsqueeze(0), steps).displacement[0]);
        },
        py::arg("velocity"), py::arg("steps") = kDefaultSquaringSteps,
        "Displacement [2, H, W] in pixels (channel 0 = x) of exp(v).");

  m.def("dsc", [](const U8Array& pred, const U8Array& truth, int k) {
    return dsc(label_map(pred), label_map(truth), k);
  }, py::arg("pred"), py::arg("truth"), py::arg("k"));
  m.def("assd",
        [](const U8Array& pred, const U8Array& truth, int k, std::array<double, 2> spacing) {
          return assd(label_map(pred), label_map(truth), k, spacing).mm;
        },
        py::arg("pred"), py::arg("truth"), py::arg("k"), py::arg("spacing") = std::array<double, 2>{1.0, 1.0});

  m.def("canonical_config",
        [](const std::string& text) { return dump_config(parse_config(text, {.check_paths = false})); },
        py::arg("text"), "Validates config text and returns it with every key spelled out.");
  m.def("run", [](const std::vector<std::string>& args) { return udaseg::run(args); }, py::arg("args"),
        "Runs the command-line tool in-process and returns its exit code.");
}
