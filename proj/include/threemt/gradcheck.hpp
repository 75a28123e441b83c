#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "threemt/layers.hpp"
#include "threemt/tape.hpp"

namespace threemt {

// A scalar loss over a set of double-precision parameters. Raw op inputs are
// wrapped as parameters too, so one checker covers ops and whole modules.
struct GradCheckCase {
  std::string name;
  double tolerance = 1e-4;
  double step = 1e-5;
  // Coordinates checked per parameter; 0 checks every coordinate.
  std::size_t max_coords = 0;
  ParamRefs<double> params;
  std::function<Var<double>(Tape<double>&)> loss;
  std::shared_ptr<void> owner;  // keeps the parameters alive
};

struct GradCheckRow {
  std::string name;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double tolerance = 0.0;
  std::size_t coords = 0;
  bool passed = false;
};

GradCheckRow run_gradcheck_case(const GradCheckCase& c, std::uint64_t seed = 0);

// One case per differentiable op and module, plus the end-to-end model check.
// d and heads size the attention, cascade and pipeline cases.
std::vector<GradCheckCase> default_gradcheck_cases(std::size_t d = 8, std::size_t heads = 2, std::uint64_t seed = 0);

std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, std::uint64_t seed = 0);

}  // namespace threemt
