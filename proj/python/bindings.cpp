// Thin pybind11 layer. Scenarios cross the boundary as JSON text; the Python
// package converts to and from dicts.

#include "wptsim/controller.hpp"
#include "wptsim/errors.hpp"
#include "wptsim/scenario.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace wptsim;

namespace {

ScenarioConfig load(const std::string& text, std::optional<double> dt, std::optional<bool> lossy,
                    std::optional<bool> parameter_free) {
    ScenarioConfig c = load_scenario_text(text);
    if (dt) c.simulation.dt = *dt;
    if (lossy) c.lossy = *lossy;
    if (parameter_free && c.interceptor) c.interceptor->controller.parameter_free = *parameter_free;
    c.finalize();
    return c;
}

py::dict run(const std::string& text, bool trace, std::optional<double> dt, std::optional<bool> lossy,
             std::optional<bool> parameter_free) {
    const auto cfg = load(text, dt, lossy, parameter_free);
    RunResult r;
    {
        py::gil_scoped_release release;
        r = run_scenario(cfg, RunOptions{trace});
    }
    py::dict out;
    out["metrics"] = metrics_to_json(r.report);
    out["scenario"] = scenario_to_json(cfg);

    const auto& tr = r.trace;
    const auto cols = tr.columns().size();
    py::array_t<double> data({tr.rows(), cols});
    auto m = data.mutable_unchecked<2>();
    for (std::size_t i = 0; i < tr.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = tr.value(i, j);
    }
    out["columns"] = tr.columns();
    out["time"] = py::array_t<double>(tr.times().size(), tr.times().data());
    out["data"] = data;

    py::list controller;
    for (const auto& c : r.controller) {
        controller.append(py::make_tuple(c.time, to_string(c.mode), c.f_est, c.t_on, c.delta_phi, c.stale));
    }
    out["controller"] = controller;
    out["crossings"] = r.crossings;
    return out;
}

}  // namespace

PYBIND11_MODULE(_wptsim, m) {
    m.doc() = "Transient simulator of a frequency-hopping wireless power link with an interceptor controller";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<SimulationError>(m, "SimulationError", PyExc_RuntimeError);

    m.attr("SCHEMA_VERSION") = kSchemaVersion;

    m.def(
        "resolve",
        [](const std::string& text, std::optional<double> dt, std::optional<bool> lossy,
           std::optional<bool> parameter_free) { return scenario_to_json(load(text, dt, lossy, parameter_free)); },
        py::arg("text"), py::kw_only(), py::arg("dt") = py::none(), py::arg("lossy") = py::none(),
        py::arg("parameter_free") = py::none(), "Validates scenario JSON text and returns the resolved JSON text.");

    m.def("run", &run, py::arg("text"), py::kw_only(), py::arg("trace") = true, py::arg("dt") = py::none(),
          py::arg("lossy") = py::none(), py::arg("parameter_free") = py::none());

    m.def(
        "write_outputs",
        [](const std::string& text, const std::string& dir, std::optional<double> dt, std::optional<bool> lossy,
           std::optional<bool> parameter_free) {
            const auto cfg = load(text, dt, lossy, parameter_free);
            py::gil_scoped_release release;
            emit_outputs(run_scenario(cfg), cfg, dir);
        },
        py::arg("text"), py::arg("dir"), py::kw_only(), py::arg("dt") = py::none(), py::arg("lossy") = py::none(),
        py::arg("parameter_free") = py::none());

    m.def(
        "sweep",
        [](const std::string& text, double f_from, double f_to, double step, std::optional<std::string> mode,
           std::optional<unsigned> threads, std::optional<bool> lossy) {
            const auto cfg = load(text, std::nullopt, lossy, std::nullopt);
            std::optional<SweepMode> m;
            if (mode == "persistent") m = SweepMode::persistent;
            else if (mode == "independent") m = SweepMode::independent;
            else if (mode) throw ValidationError("sweep mode must be 'persistent' or 'independent'");
            py::gil_scoped_release release;
            return sweep_to_json(sweep_frequencies(cfg, f_from, f_to, step, m, threads));
        },
        py::arg("text"), py::arg("f_from"), py::arg("f_to"), py::arg("step"), py::kw_only(),
        py::arg("mode") = py::none(), py::arg("threads") = py::none(), py::arg("lossy") = py::none());

    m.def(
        "tune_table",
        [](const std::string& text, std::size_t points) {
            std::vector<std::pair<double, double>> rows;
            for (const auto& r : tune_table(load(text, std::nullopt, std::nullopt, std::nullopt), points)) {
                rows.emplace_back(r.frequency, r.t_on);
            }
            return rows;
        },
        py::arg("text"), py::arg("points") = 21);

    m.def("init_t_on", &init_t_on, py::arg("f"), py::arg("inductance"), py::arg("c_h1"), py::arg("c_h2"),
          "Closed-form on-time of the switched capacitor for a target frequency.");

    m.def(
        "detect_frequency",
        [](const std::vector<double>& crossings, std::size_t window, double stability) -> py::object {
            const auto e = detect_frequency(crossings, window, stability);
            if (!e) return py::none();
            return py::make_tuple(e->f_est, e->stable);
        },
        py::arg("crossings"), py::arg("window") = 3, py::arg("stability") = 0.01,
        "Returns (f_est, stable) from upward crossing times, or None.");

    m.def(
        "phase_error",
        [](double vs, double vhr, double period) -> py::object {
            const auto e = phase_error(vs, vhr, period);
            if (e.stale) return py::none();
            return py::float_(e.delta_phi);
        },
        py::arg("vs"), py::arg("vhr"), py::arg("period"), "Wrapped phase error in radians, or None when stale.");
}
