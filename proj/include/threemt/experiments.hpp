#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "threemt/config.hpp"
#include "threemt/gradcheck.hpp"
#include "threemt/training.hpp"

namespace threemt {

inline constexpr const char* kCheckpointFile = "checkpoint.3mt";
inline constexpr const char* kTrainReportFile = "train_report.csv";
inline constexpr const char* kSweepReportFile = "sweep_report.csv";

// %.17g, with "nan" for undefined metrics.
std::string format_metric(double v);

// Header: epoch,loss_total,loss_final,loss_aux_<modality>...,val_auc,val_accuracy,val_sensitivity,val_specificity
std::string train_report_csv(const std::vector<ModalitySpec>& specs, const std::vector<LossReport>& reports);

struct ScenarioResult {
  std::string scenario;  // "full" or forced-missing names joined by '+'
  EvalReport report;
};
std::string scenario_name(const std::set<std::string>& missing);
// Header: scenario,accuracy,sensitivity,specificity,auc,n
std::string eval_report_csv(const std::vector<ScenarioResult>& rows);

struct TrainRun {
  FitResult<float> fit;
  DatasetSplit split;
  std::filesystem::path checkpoint;
  std::filesystem::path report;
};

// Data load, patient split, fit; writes the best checkpoint and the per-epoch
// report into config.output_dir.
TrainRun run_train(const RunConfig& config);

// Loads the checkpoint and the CSV dataset (schema taken from the checkpoint)
// and evaluates with `missing` forced unavailable.
ScenarioResult run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_csv,
                        const std::set<std::string>& missing);

struct SweepRow {
  double p_mdrop = 0.0;
  ScenarioResult result;
};

// One model per p (p applied to every modality; model and training seed
// seed ^ index, data and split shared), each evaluated on the test split
// under every scenario. Writes sweep_report.csv plus per-run checkpoints and
// training reports.
std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<double>& p_values,
                                const std::vector<std::set<std::string>>& scenarios);
// Header: p_mdrop,scenario,accuracy,sensitivity,specificity,auc,n
std::string sweep_report_csv(const std::vector<SweepRow>& rows);

// Header: op,rel_error,tolerance,coords,status
std::string gradcheck_report_csv(const std::vector<GradCheckRow>& rows);

// Writes the configured synthetic dataset under config.output_dir; returns the CSV path.
std::filesystem::path run_synth(const RunConfig& config);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace threemt
