#include "threemt/experiments.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "threemt/checkpoint.hpp"
#include "threemt/errors.hpp"

namespace threemt {

namespace fs = std::filesystem;

std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw FormatError("failed writing " + path.string());
}

std::string train_report_csv(const std::vector<ModalitySpec>& specs, const std::vector<LossReport>& reports) {
  std::string out = "epoch,loss_total,loss_final";
  for (const ModalitySpec& s : specs) out += ",loss_aux_" + s.name;
  out += ",val_auc,val_accuracy,val_sensitivity,val_specificity\n";
  for (const LossReport& r : reports) {
    out += std::to_string(r.epoch) + "," + format_metric(r.loss_total) + "," + format_metric(r.loss_final);
    for (double a : r.loss_aux) out += "," + format_metric(a);
    const BinaryMetrics& m = r.validation.metrics;
    out += "," + format_metric(r.validation.auc) + "," + format_metric(m.accuracy) + "," + format_metric(m.sensitivity) +
           "," + format_metric(m.specificity) + "\n";
  }
  return out;
}

std::string scenario_name(const std::set<std::string>& missing) {
  if (missing.empty()) return "full";
  std::string out;
  for (const std::string& m : missing) out += (out.empty() ? "" : "+") + m;
  return out;
}

namespace {

std::string metric_cells(const EvalReport& r) {
  return format_metric(r.metrics.accuracy) + "," + format_metric(r.metrics.sensitivity) + "," +
         format_metric(r.metrics.specificity) + "," + format_metric(r.auc) + "," + std::to_string(r.n);
}

ThreeMTModel<float> init_model(const RunConfig& config, const std::vector<ModalitySpec>& specs) {
  return ThreeMTModel<float>(specs, config.model);
}

}  // namespace

std::string eval_report_csv(const std::vector<ScenarioResult>& rows) {
  std::string out = "scenario,accuracy,sensitivity,specificity,auc,n\n";
  for (const ScenarioResult& r : rows) out += r.scenario + "," + metric_cells(r.report) + "\n";
  return out;
}

std::string sweep_report_csv(const std::vector<SweepRow>& rows) {
  std::string out = "p_mdrop,scenario,accuracy,sensitivity,specificity,auc,n\n";
  for (const SweepRow& r : rows) {
    out += format_metric(r.p_mdrop) + "," + r.result.scenario + "," + metric_cells(r.result.report) + "\n";
  }
  return out;
}

std::string gradcheck_report_csv(const std::vector<GradCheckRow>& rows) {
  std::string out = "op,rel_error,tolerance,coords,status\n";
  for (const GradCheckRow& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e,%.0e", r.rel_error, r.tolerance);
    out += r.name + "," + buf + "," + std::to_string(r.coords) + "," + (r.passed ? "pass" : "FAIL") + "\n";
  }
  return out;
}

TrainRun run_train(const RunConfig& config) {
  const std::vector<ModalitySpec> specs = resolve_specs(config);
  const Dataset data = load_run_dataset(config);
  TrainRun run{{}, patient_split(data, config.split), {}, {}};
  run.fit = fit(init_model(config, specs), run.split.train, run.split.val, config.train);
  fs::create_directories(config.output_dir);
  run.checkpoint = config.output_dir / kCheckpointFile;
  run.report = config.output_dir / kTrainReportFile;
  save_checkpoint(run.checkpoint, run.fit.model);
  write_text(run.report, train_report_csv(specs, run.fit.reports));
  return run;
}

ScenarioResult run_eval(const fs::path& checkpoint, const fs::path& dataset_csv, const std::set<std::string>& missing) {
  const ThreeMTModel<float> model = load_checkpoint(checkpoint);
  for (const std::string& name : missing) model.modality_index(name);
  const Dataset data = load_dataset(dataset_csv, model.specs());
  return {scenario_name(missing), evaluate(model, data, missing)};
}

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<double>& p_values,
                                const std::vector<std::set<std::string>>& scenarios) {
  if (p_values.empty()) throw InputError("sweep: no p_mdrop values given");
  if (scenarios.empty()) throw InputError("sweep: no scenarios given");
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) throw InputError("sweep: p_mdrop " + format_metric(p) + " outside [0, 1]");
  }
  const Dataset data = load_run_dataset(config);
  for (const auto& scenario : scenarios) {
    for (const std::string& name : scenario) {
      if (std::none_of(data.schema.begin(), data.schema.end(), [&](const ModalitySpec& s) { return s.name == name; })) {
        throw InputError("unknown modality '" + name + "' in missing list");
      }
    }
  }
  const DatasetSplit split = patient_split(data, config.split);
  fs::create_directories(config.output_dir);

  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < p_values.size(); ++i) {
    RunConfig run = config;
    run.p_mdrop = p_values[i];
    run.p_mdrop_overrides.clear();
    run.model.seed = config.seed ^ i;
    run.train.seed = config.seed ^ i;
    const std::vector<ModalitySpec> specs = resolve_specs(run);
    FitResult<float> fitted = fit(init_model(run, specs), split.train, split.val, run.train);
    const std::string tag = "sweep_" + std::to_string(i) + "_";
    save_checkpoint(config.output_dir / (tag + kCheckpointFile), fitted.model);
    write_text(config.output_dir / (tag + kTrainReportFile), train_report_csv(specs, fitted.reports));
    for (const auto& scenario : scenarios) {
      rows.push_back({p_values[i], {scenario_name(scenario), evaluate(fitted.model, split.test, scenario)}});
    }
  }
  write_text(config.output_dir / kSweepReportFile, sweep_report_csv(rows));
  return rows;
}

fs::path run_synth(const RunConfig& config) {
  if (config.data.kind != DataSource::Kind::Synthetic) throw ConfigError("synth needs data.source = synthetic");
  return materialize_synthetic(generate_synthetic(config.data.synthetic), config.output_dir);
}

}  // namespace threemt
