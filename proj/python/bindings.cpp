#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "dybnn/bitkernel.hpp"
#include "dybnn/cli.hpp"
#include "dybnn/config.hpp"
#include "dybnn/costmodel.hpp"
#include "dybnn/error.hpp"

namespace py = pybind11;
using namespace dybnn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

bitkernel::PackedBitMatrix pack_matrix(const FloatArray& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  return bitkernel::pack_signs(to_tensor(a));
}

py::dict report_dict(const cost::CostReport& r) {
  py::list layers;
  for (const auto& l : r.layers) {
    py::dict d;
    d["name"] = l.name;
    d["kind"] = l.kind;
    d["bops"] = l.bops;
    d["flops"] = l.flops;
    d["params"] = l.params;
    layers.append(d);
  }
  py::dict d;
  d["convention"] = cost::to_string(r.convention);
  d["bops"] = r.bops;
  d["flops"] = r.flops;
  d["params"] = r.params;
  d["ops"] = r.ops;
  d["layers"] = layers;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bit-packed binary kernels, cost model and command-line entry point";

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "binary_gemm",
      [](const FloatArray& a, const FloatArray& b) {
        const auto r = bitkernel::binary_gemm(pack_matrix(a), pack_matrix(b));
        py::array_t<std::int32_t> out({r.rows, r.cols});
        std::copy(r.data.begin(), r.data.end(), out.mutable_data());
        return out;
      },
      py::arg("a"), py::arg("b"), "sign(a) @ sign(b).T over +-1 values, a: [M, K], b: [N, K]");

  m.def(
      "xnor_popcount_dot",
      [](const FloatArray& a, const FloatArray& b) {
        if (a.ndim() != 1 || b.ndim() != 1) throw DimensionError("expected 1-D arrays");
        const auto pa = bitkernel::pack_signs(to_tensor(a).reshaped(Shape{1, static_cast<std::size_t>(a.size())}));
        const auto pb = bitkernel::pack_signs(to_tensor(b).reshaped(Shape{1, static_cast<std::size_t>(b.size())}));
        if (pa.cols() != pb.cols()) throw DimensionError("vector lengths differ");
        return bitkernel::xnor_popcount_dot(pa.row(0), pb.row(0), pa.cols());
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "binary_conv2d",
      [](const FloatArray& x, const FloatArray& w, std::size_t stride, std::size_t padding) {
        const auto y = bitkernel::binary_conv2d(to_tensor(x), to_tensor(w), stride, padding);
        py::array_t<float> out(std::vector<py::ssize_t>(y.shape().begin(), y.shape().end()));
        std::copy(y.vec().begin(), y.vec().end(), out.mutable_data());
        return out;
      },
      py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("padding") = 0);

  m.def("dysign_overhead", &cost::dysign_overhead, py::arg("channels"), py::arg("gamma") = 16);
  m.def("combine_ops", &cost::combine_ops, py::arg("bops"), py::arg("flops"));
  m.def("preset_names", &config::preset_names);

  m.def(
      "count_ops",
      [](const std::string& preset, std::optional<std::string> binarizer) {
        config::Overrides o;
        o.preset = preset;
        o.binarizer = std::move(binarizer);
        return report_dict(cost::count_ops(config::resolve("{}", o).model.build()));
      },
      py::arg("preset"), py::arg("binarizer") = py::none());

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "bnn");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the bnn command line in-process; returns (exit code, stdout, stderr).");
}
