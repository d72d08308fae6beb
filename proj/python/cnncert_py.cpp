#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cnncert/certifier.hpp"
#include "cnncert/reference.hpp"
#include "cnncert/relaxation.hpp"

namespace py = pybind11;
using namespace cnncert;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::tuple to_pair(const IntervalBounds& b) { return py::make_tuple(to_array(b.lower), to_array(b.upper)); }

CertifyOptions make_options(const std::string& relax, const std::string& margin, double rel_tol, int max_iters) {
  CertifyOptions o;
  o.relu = parse_relu_relaxation(relax);
  o.margin = parse_margin_form(margin);
  o.rel_tol = rel_tol;
  o.max_iters = max_iters;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Certified robustness radii for convolutional networks";
  py::register_exception<Error>(m, "CertError", PyExc_ValueError);

  py::class_<NetworkSpec>(m, "Network")
      .def_property_readonly("input_shape",
                             [](const NetworkSpec& n) { return py::make_tuple(n.input_shape.h, n.input_shape.w, n.input_shape.c); })
      .def_property_readonly("num_classes", &NetworkSpec::num_classes)
      .def_property_readonly("num_blocks", [](const NetworkSpec& n) { return n.blocks.size(); })
      .def_property_readonly("has_maxpool", &NetworkSpec::has_maxpool)
      .def("to_json", &save_model);

  m.def("load_model", &load_model_file, py::arg("path"));
  m.def("load_model_string", &load_model_string, py::arg("text"));
  m.def("load_inputs", [](const std::string& path) {
    py::list out;
    for (const InputRecord& r : load_inputs_file(path)) out.append(to_array(r.x));
    return out;
  }, py::arg("path"));

  m.def("forward", [](const NetworkSpec& net, const Array& x) { return to_array(forward(net, to_tensor(x))); },
        py::arg("net"), py::arg("x"));
  m.def("predict", [](const NetworkSpec& net, const Array& x) { return predicted_class(forward(net, to_tensor(x))); },
        py::arg("net"), py::arg("x"));

  m.def("output_bounds",
        [](const NetworkSpec& net, const Array& x, double eps, const std::string& norm, const std::string& relax) {
          return to_pair(output_bounds(net, to_tensor(x), eps, parse_norm(norm), parse_relu_relaxation(relax)));
        },
        py::arg("net"), py::arg("x"), py::arg("eps"), py::arg("norm") = "inf", py::arg("relax") = "relu-adaptive");

  m.def("dense_output_bounds",
        [](const NetworkSpec& net, const Array& x, double eps, const std::string& norm, const std::string& relax) {
          const Tensor x0 = to_tensor(x);
          IntervalBounds b = dense_bounds(to_dense(net), x0, eps, parse_norm(norm), parse_relu_relaxation(relax));
          const Shape shape = forward(net, x0).shape();
          b.lower = Tensor(shape, b.lower.values());
          b.upper = Tensor(shape, b.upper.values());
          return to_pair(b);
        },
        py::arg("net"), py::arg("x"), py::arg("eps"), py::arg("norm") = "inf", py::arg("relax") = "relu-adaptive");

  m.def("certify_margin",
        [](const NetworkSpec& net, const Array& x, double eps, const std::string& norm, std::size_t c, std::size_t t,
           const std::string& relax, const std::string& margin) {
          const MarginResult r =
              certify_margin(net, to_tensor(x), eps, parse_norm(norm), c, t, make_options(relax, margin, 1e-3, 30));
          return py::make_tuple(r.certified, r.margin);
        },
        py::arg("net"), py::arg("x"), py::arg("eps"), py::arg("norm"), py::arg("c"), py::arg("t"),
        py::arg("relax") = "relu-adaptive", py::arg("margin") = "difference");

  m.def("certify",
        [](const NetworkSpec& net, const Array& x, const std::string& norm, std::optional<std::size_t> target,
           const std::string& relax, const std::string& margin, double rel_tol, int max_iters) {
          const CertificationResult r = certified_radius(net, to_tensor(x), parse_norm(norm), target,
                                                         make_options(relax, margin, rel_tol, max_iters));
          py::dict d;
          d["radius"] = r.radius;
          d["predicted"] = r.predicted;
          d["target"] = target ? py::object(py::int_(*target)) : py::object(py::none());
          d["binding_target"] = r.binding_target;
          d["iterations"] = r.iterations;
          d["bound_evaluations"] = r.bound_evaluations;
          d["cache_hits"] = r.cache_hits;
          d["never_certified"] = r.never_certified;
          d["reached_max_eps"] = r.reached_max_eps;
          return d;
        },
        py::arg("net"), py::arg("x"), py::arg("norm") = "inf", py::arg("target") = py::none(),
        py::arg("relax") = "relu-adaptive", py::arg("margin") = "difference", py::arg("rel_tol") = 1e-3,
        py::arg("max_iters") = 30);

  m.def("sample_attack",
        [](const NetworkSpec& net, const Array& x, const std::string& norm, double eps, std::size_t budget,
           std::uint64_t seed) {
          const AttackResult r = sample_attack(net, to_tensor(x), parse_norm(norm), eps, budget, seed);
          py::dict d;
          d["found"] = r.found();
          d["predicted"] = r.predicted;
          d["delta"] = r.found() ? py::object(to_array(*r.delta)) : py::object(py::none());
          d["adversarial_class"] = r.found() ? py::object(py::int_(r.adversarial_class)) : py::object(py::none());
          d["best_margin"] = r.best_margin;
          return d;
        },
        py::arg("net"), py::arg("x"), py::arg("norm"), py::arg("eps"), py::arg("budget") = 2000,
        py::arg("seed") = 0);

  m.def("relax",
        [](const std::string& activation, double l, double u, const std::string& relax) {
          const NeuronRelaxation r = relax_neuron(parse_activation(activation), parse_relu_relaxation(relax), l, u);
          return py::make_tuple(r.upper.slope, r.upper.offset, r.lower.slope, r.lower.offset);
        },
        py::arg("activation"), py::arg("l"), py::arg("u"), py::arg("relax") = "relu-adaptive");

  m.def("maxpool_planes",
        [](const std::vector<double>& l, const std::vector<double>& u) {
          const PoolPlanes p = maxpool_planes(l, u);
          py::dict d;
          d["coefficients"] = p.coefficients;
          d["upper_constant"] = p.upper_constant;
          d["lower_constant"] = p.lower_constant;
          d["gamma"] = p.gamma;
          return d;
        },
        py::arg("l"), py::arg("u"));
}
