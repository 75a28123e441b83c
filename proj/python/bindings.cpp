#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "threemt/experiments.hpp"
#include "threemt/ops.hpp"

namespace py = pybind11;
using namespace threemt;

namespace {

py::dict metrics_dict(const BinaryMetrics& m) {
  py::dict d;
  d["accuracy"] = m.accuracy;
  d["sensitivity"] = m.sensitivity;
  d["specificity"] = m.specificity;
  return d;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d = metrics_dict(r.metrics);
  d["auc"] = r.auc;
  d["n"] = r.n;
  d["scores"] = r.scores;
  d["predicted"] = r.predicted;
  return d;
}

Tensor<double> to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor<double>({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::array_t<double> to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::string& text, const std::filesystem::path& base_dir) {
  return parse_run_config_text(text, base_dir);
}

}  // namespace

PYBIND11_MODULE(_threemt, m) {
  m.doc() = "Multi-modal mixing transformer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("auc", [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc(scores, labels); },
        py::arg("scores"), py::arg("labels"));
  m.def(
      "roc_curve",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        std::vector<std::pair<double, double>> pts;
        for (const RocPoint& p : roc_curve(scores, labels)) pts.emplace_back(p.fpr, p.tpr);
        return pts;
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "confusion",
      [](const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
        const ConfusionCounts c = confusion(scores, labels, threshold);
        py::dict d;
        d["tp"] = c.tp;
        d["tn"] = c.tn;
        d["fp"] = c.fp;
        d["fn"] = c.fn;
        return d;
      },
      py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);
  m.def(
      "binary_metrics",
      [](std::size_t tp, std::size_t tn, std::size_t fp, std::size_t fn) {
        return metrics_dict(binary_metrics({tp, tn, fp, fn}));
      },
      py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"));

  m.def(
      "scaled_dot_attention",
      [](py::array_t<double> q, py::array_t<double> k, py::array_t<double> v, std::size_t scale_dim) {
        Tape<double> tape;
        Tensor<double> w;
        Var<double> out = ops::scaled_dot_attention(tape.constant(to_matrix(q)), tape.constant(to_matrix(k)),
                                                    tape.constant(to_matrix(v)), 1, scale_dim, &w);
        return py::make_tuple(to_array(out.value()), to_array(w));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("scale_dim"),
      "Returns (output, weights) for one query/key group.");

  m.def(
      "load_volume",
      [](const std::filesystem::path& path) {
        const Tensor<float> t = load_volume(path);
        py::array_t<float> out({t.dim(1), t.dim(2), t.dim(3)});
        std::copy(t.data().begin(), t.data().end(), out.mutable_data());
        return out;
      },
      py::arg("path"), "Z-scored (D, H, W) float32 volume.");
  m.def(
      "write_volume",
      [](const std::filesystem::path& path, py::array_t<float, py::array::c_style | py::array::forcecast> a) {
        if (a.ndim() != 3) throw ShapeError("write_volume: expected a 3-d array");
        const std::array<std::uint32_t, 3> dims{static_cast<std::uint32_t>(a.shape(0)),
                                                static_cast<std::uint32_t>(a.shape(1)),
                                                static_cast<std::uint32_t>(a.shape(2))};
        write_volume(path, dims, std::span<const float>(a.data(), static_cast<std::size_t>(a.size())));
      },
      py::arg("path"), py::arg("volume"));

  m.def("preset_names", &preset_names);
  m.def("config_keys", &accepted_config_keys);
  m.def(
      "synth", [](const std::string& config, const std::filesystem::path& base_dir) { return run_synth(config_from(config, base_dir)); },
      py::arg("config"), py::arg("base_dir") = ".", "Writes the configured synthetic dataset; returns the CSV path.");
  m.def(
      "train",
      [](const std::string& config, const std::filesystem::path& base_dir) {
        TrainRun run;
        {
          py::gil_scoped_release nogil;
          run = run_train(config_from(config, base_dir));
        }
        py::dict d;
        d["best_epoch"] = run.fit.best_epoch;
        d["best_val_auc"] = run.fit.best_val_auc;
        d["checkpoint"] = run.checkpoint;
        d["report"] = run.report;
        return d;
      },
      py::arg("config"), py::arg("base_dir") = ".", "Trains from config text; writes checkpoint and report.");
  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& csv, const std::set<std::string>& missing) {
        ScenarioResult r = run_eval(checkpoint, csv, missing);
        py::dict d = report_dict(r.report);
        d["scenario"] = r.scenario;
        return d;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("missing") = std::set<std::string>{});
  m.def(
      "sweep",
      [](const std::string& config, const std::vector<double>& p_values, const std::vector<std::set<std::string>>& scenarios,
         const std::filesystem::path& base_dir) {
        std::vector<SweepRow> rows;
        {
          py::gil_scoped_release nogil;
          rows = run_sweep(config_from(config, base_dir), p_values, scenarios);
        }
        py::list out;
        for (const SweepRow& row : rows) {
          py::dict d = report_dict(row.result.report);
          d["p_mdrop"] = row.p_mdrop;
          d["scenario"] = row.result.scenario;
          out.append(d);
        }
        return out;
      },
      py::arg("config"), py::arg("p_values"), py::arg("scenarios"), py::arg("base_dir") = ".");
  m.def(
      "gradcheck",
      [](std::size_t d, std::size_t heads, std::uint64_t seed) {
        py::list out;
        for (const GradCheckRow& row : run_gradcheck(default_gradcheck_cases(d, heads, seed), seed)) {
          py::dict r;
          r["op"] = row.name;
          r["rel_error"] = row.rel_error;
          r["tolerance"] = row.tolerance;
          r["passed"] = row.passed;
          out.append(r);
        }
        return out;
      },
      py::arg("d") = 8, py::arg("heads") = 2, py::arg("seed") = 0);
}
