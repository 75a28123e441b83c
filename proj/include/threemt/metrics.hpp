#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace threemt {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Metrics with a zero denominator are reported as NaN, never as 0.
struct BinaryMetrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

using RocCurve = std::vector<RocPoint>;

inline constexpr double kUndefinedMetric = std::numeric_limits<double>::quiet_NaN();

inline bool is_undefined(double metric) { return std::isnan(metric); }

// Prediction is positive iff score >= threshold.
ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold);

BinaryMetrics binary_metrics(const ConfusionCounts& counts);

// ROC over every distinct score threshold, from (0,0) to (1,1). Samples that
// share a score move both rates in one step. Throws InputError unless both
// classes are present.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels);

// Trapezoidal area under roc_curve; tied positive/negative scores earn half
// credit. NaN unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace threemt
