// Python bindings: array-level primitives plus the spec-driven runners.
// JSON results cross the boundary as strings; the package shim decodes them.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "stylefed/errors.hpp"
#include "stylefed/experiment.hpp"
#include "stylefed/metrics.hpp"
#include "stylefed/numerics.hpp"

namespace py = pybind11;
using namespace stylefed;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) return Tensor::row(std::span<const double>(a.data(), static_cast<std::size_t>(a.shape(0))));
  if (a.ndim() != 2) throw ShapeError("expected a 1-d or 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<double> to_vec(const Array& a) { return {a.data(), a.data() + a.size()}; }

SpecFormat format_of(const std::string& f) {
  if (f == "toml") return SpecFormat::kToml;
  if (f == "json") return SpecFormat::kJson;
  throw ConfigError("format must be 'toml' or 'json'");
}

}  // namespace

PYBIND11_MODULE(_stylefed, m) {
  m.doc() = "Style-aware federated prototype learning simulator (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "proto_logits", [](const Array& h, const Array& p) { return to_array(proto_logits(to_tensor(h), to_tensor(p))); },
      py::arg("h"), py::arg("prototypes"));
  m.def(
      "softmax_scaled", [](const Array& s, double scale) { return softmax_scaled(to_vec(s), scale); }, py::arg("scores"),
      py::arg("scale") = 1.0);
  m.def(
      "layer_norm",
      [](const Array& x, const Array& g, const Array& b, double eps) {
        return layer_norm(to_vec(x), to_vec(g), to_vec(b), eps);
      },
      py::arg("x"), py::arg("gain"), py::arg("bias"), py::arg("eps") = ops::kDefaultEps);
  m.def(
      "cosine_sim", [](const Array& a, const Array& b) { return cosine_sim(to_vec(a), to_vec(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "decompose",
      [](const Array& u, const Array& p) {
        const Decomposition d = decompose(to_vec(u), to_vec(p));
        return py::make_tuple(d.content, d.style, d.coefficient);
      },
      py::arg("u"), py::arg("p_global"), "Returns (content, style, coefficient).");

  m.def(
      "macro_f1",
      [](const std::vector<std::size_t>& y, const std::vector<std::size_t>& p, std::size_t classes) {
        return macro_f1(confusion_matrix(y, p, classes));
      },
      py::arg("labels"), py::arg("predictions"), py::arg("classes"));
  m.def(
      "brier", [](const Array& probs, const std::vector<std::size_t>& y) { return brier(to_tensor(probs), y); },
      py::arg("probabilities"), py::arg("labels"));
  m.def(
      "wilcoxon_signed_rank", [](const Array& a, const Array& b) { return wilcoxon_signed_rank(to_vec(a), to_vec(b)); },
      py::arg("a"), py::arg("b"));
  m.def(
      "convergence_round",
      [](const std::vector<double>& acc, const std::vector<std::size_t>& rounds, double threshold) {
        if (acc.size() != rounds.size()) throw ShapeError("accuracies and rounds differ in length");
        std::vector<RoundRecord> recs(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) {
          recs[i].round = rounds[i];
          recs[i].evaluated = true;
          recs[i].mean_acc = acc[i];
        }
        return convergence_round(recs, threshold);
      },
      py::arg("accuracies"), py::arg("rounds"), py::arg("threshold") = 0.95);

  m.def(
      "gaussian_mixture",
      [](std::size_t classes, std::size_t dim, std::size_t per_class, double separation, std::uint64_t seed) {
        Dataset d = generate_gaussian_mixture(classes, dim, per_class, separation, seed);
        return py::make_tuple(to_array(d.features), d.labels);
      },
      py::arg("classes"), py::arg("dim"), py::arg("per_class"), py::arg("separation"), py::arg("seed"));

  m.def(
      "resolved_config",
      [](const std::string& text, const std::string& fmt) {
        return resolved_config(parse_spec(text, format_of(fmt))).dump();
      },
      py::arg("text"), py::arg("format") = "toml");
  m.def(
      "run_experiment",
      [](const std::string& text, const std::string& fmt, const std::string& out_dir) {
        const ExperimentSpec spec = parse_spec(text, format_of(fmt));
        py::gil_scoped_release release;
        return run_experiment(spec, out_dir).dump();
      },
      py::arg("text"), py::arg("format"), py::arg("out_dir"));
  m.def(
      "compare",
      [](const std::string& text, const std::string& fmt, const std::vector<std::string>& names,
         const std::string& out_dir) {
        const ExperimentSpec spec = parse_spec(text, format_of(fmt));
        std::vector<Method> methods;
        for (const auto& n : names) methods.push_back(parse_method(n));
        py::gil_scoped_release release;
        const Comparison c = compare_methods(spec, methods);
        return write_comparison(c, spec, out_dir).dump();
      },
      py::arg("text"), py::arg("format"), py::arg("methods"), py::arg("out_dir"));
}
