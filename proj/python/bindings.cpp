#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dpfl/error.hpp"
#include "dpfl/harness.hpp"
#include "dpfl/metrics.hpp"

namespace py = pybind11;

namespace {

dpfl::ExperimentConfig config_from(const std::string& text, std::optional<std::string> output_dir) {
  dpfl::ExperimentConfig cfg = dpfl::parse_config(text);
  if (output_dir) cfg.output_dir = *output_dir;
  return cfg;
}

py::dict simulate_seed(const std::string& config_text, std::uint64_t seed) {
  const dpfl::SeedOutcome out = dpfl::simulate(dpfl::parse_config(config_text), seed);
  py::list active;
  for (const auto& r : out.records) active.append(r.active_ids);
  py::dict d;
  d["seed"] = out.seed;
  d["psi"] = out.psi();
  d["active_ids"] = active;
  d["partition_counts"] = out.partition.counts;
  d["trace"] = out.trace.active;
  d["rounds_csv"] = dpfl::rounds_csv(out.records);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Federated learning simulator under dynamic client participation";

  auto error = py::register_exception<dpfl::Error>(m, "Error");
  py::register_exception<dpfl::ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<dpfl::ValidationError>(m, "ValidationError", error.ptr());
  py::register_exception<dpfl::ShapeError>(m, "ShapeError", error.ptr());
  py::register_exception<dpfl::NumericError>(m, "NumericError", error.ptr());
  py::register_exception<dpfl::ParseError>(m, "ParseError", error.ptr());

  m.def("resolve_config", [](const std::string& text) {
    return dpfl::config_to_json(dpfl::parse_config(text));
  }, py::arg("config_text"), "Parse a JSON config and return it with every default filled in.");

  m.def("run_experiment", [](const std::string& text, std::optional<std::string> output_dir) {
    const auto cfg = config_from(text, output_dir);
    py::gil_scoped_release release;
    return dpfl::run_experiment(cfg);
  }, py::arg("config_text"), py::arg("output_dir") = py::none(),
     "Run one cell for every seed; returns the artifact directory.");

  m.def("run_matrix", [](const std::string& text, std::optional<std::string> output_dir) {
    const auto cfg = config_from(text, output_dir);
    py::gil_scoped_release release;
    return dpfl::run_matrix(cfg);
  }, py::arg("config_text"), py::arg("output_dir") = py::none());

  m.def("simulate", &simulate_seed, py::arg("config_text"), py::arg("seed"),
        "Run one seed in memory and return psi, active sets and the partition.");

  m.def("report", [](const std::string& dir) { return dpfl::report(dir); }, py::arg("dir"));

  m.def("windowed_eval", [](const std::vector<double>& s, std::size_t window, std::size_t t,
                            const std::string& stat) {
    if (stat != "mean" && stat != "variance") throw py::value_error("stat must be 'mean' or 'variance'");
    return dpfl::windowed_eval(s, window, stat == "mean" ? dpfl::WindowStat::mean : dpfl::WindowStat::variance, t);
  }, py::arg("series"), py::arg("window"), py::arg("t"), py::arg("stat") = "mean");
  m.def("intransigence", [](const std::vector<double>& dyn, const std::vector<double>& ref) {
    return dpfl::intransigence(dyn, ref);
  }, py::arg("dynamic"), py::arg("static_ref"));
  m.def("instability", [](const std::vector<double>& s, std::size_t t1, std::size_t t2) {
    return dpfl::instability(s, t1, t2);
  }, py::arg("series"), py::arg("t_s1"), py::arg("t_s2"));

  m.def("stationary_distribution", [](const std::array<std::array<double, 2>, 2>& p) {
    const auto r = dpfl::stationary_distribution(p);
    py::dict d;
    d["inactive"] = r.inactive;
    d["active"] = r.active;
    d["degenerate"] = r.degenerate;
    d["periodic"] = r.periodic;
    return d;
  }, py::arg("transition"));

  m.def("heterogeneity_alpha", [](const std::string& level) { return dpfl::heterogeneity_preset(level); });

  m.def("softmax_kl", [](const dpfl::Tensor2& p, const dpfl::Tensor2& q, double temperature) {
    return dpfl::softmax_kl(p, q, temperature);
  }, py::arg("p_logits"), py::arg("q_logits"), py::arg("temperature") = 1.0);

  m.attr("__version__") = "0.1.0";
}
