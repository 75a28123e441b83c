#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "threemt/errors.hpp"
#include "threemt/experiments.hpp"

using namespace threemt;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

std::set<std::string> parse_names(const std::string& list) {
  std::set<std::string> out;
  std::stringstream ss(list);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (!name.empty() && name != "full") out.insert(name);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal mixing transformer: train, evaluate under missing modalities, sweep, gradcheck"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, dataset, missing, out_path;
  auto* train = app.add_subcommand("train", "train from a key = value config");
  train->add_option("config", config_path, "config file")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a CSV dataset");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("dataset", dataset, "dataset CSV")->required();
  eval->add_option("--missing", missing, "comma-separated modalities forced unavailable");
  eval->add_option("--out", out_path, "also write the report to this file");

  std::vector<double> p_values;
  std::vector<std::string> scenarios;
  auto* sweep = app.add_subcommand("sweep", "train one model per p_mdrop and evaluate each scenario");
  sweep->add_option("config", config_path)->required();
  sweep->add_option("--p", p_values, "p_mdrop values")->delimiter(',')->required();
  sweep->add_option("--scenario", scenarios, "missing set, e.g. volume,ord0 (repeatable; 'full' = none)");

  std::size_t d = 8, h = 2;
  std::uint64_t seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gradcheck->set_help_flag("--help", "print this help message and exit");
  gradcheck->add_option("--d", d, "model width for attention and pipeline cases");
  gradcheck->add_option("--h", h, "attention heads");
  gradcheck->add_option("--seed", seed);

  auto* synth = app.add_subcommand("synth", "write the configured synthetic dataset as CSV + volumes");
  synth->add_option("config", config_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) {
      const RunConfig cfg = parse_run_config(config_path);
      const TrainRun run = run_train(cfg);
      std::printf("best epoch %zu, val auc %s\n", run.fit.best_epoch, format_metric(run.fit.best_val_auc).c_str());
      std::printf("checkpoint %s\nreport %s\n", run.checkpoint.c_str(), run.report.c_str());
    } else if (*eval) {
      const ScenarioResult r = run_eval(checkpoint, dataset, parse_names(missing));
      const std::string csv = eval_report_csv({r});
      std::cout << csv;
      if (!out_path.empty()) write_text(out_path, csv);
    } else if (*sweep) {
      std::vector<std::set<std::string>> sets;
      for (const std::string& s : scenarios) sets.push_back(parse_names(s));
      if (sets.empty()) sets.emplace_back();
      const RunConfig cfg = parse_run_config(config_path);
      std::cout << sweep_report_csv(run_sweep(cfg, p_values, sets));
    } else if (*gradcheck) {
      const std::vector<GradCheckRow> rows = run_gradcheck(default_gradcheck_cases(d, h, seed), seed);
      std::cout << gradcheck_report_csv(rows);
      for (const GradCheckRow& r : rows) {
        if (!r.passed) return kExitCheck;
      }
    } else if (*synth) {
      std::cout << run_synth(parse_run_config(config_path)).string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
