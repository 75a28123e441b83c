#include "threemt/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "threemt/errors.hpp"

namespace threemt {
namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw InputError("metrics: " + std::to_string(scores.size()) + " scores but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw InputError("metrics: no samples");
  for (int l : labels) {
    if (l != 0 && l != 1) throw InputError("metrics: labels must be 0 or 1, got " + std::to_string(l));
  }
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? kUndefinedMetric : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      predicted ? ++c.tp : ++c.fn;
    } else {
      predicted ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

BinaryMetrics binary_metrics(const ConfusionCounts& c) {
  return {ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.fn + c.tp), ratio(c.tn, c.tn + c.fp)};
}

namespace {

// Walks tied-score groups in descending score order, calling visit(dfp, dtp)
// with each group's counts. Returns (positives, negatives).
template <typename Visit>
std::pair<std::size_t, std::size_t> sweep_thresholds(std::span<const double> scores,
                                                     std::span<const int> labels, Visit visit) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t dtp = 0, dfp = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] == 1 ? ++dtp : ++dfp;
      ++j;
    }
    visit(dfp, dtp);
    pos += dtp;
    neg += dfp;
    i = j;
  }
  return {pos, neg};
}

}  // namespace

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  std::vector<std::pair<std::size_t, std::size_t>> steps;  // cumulative (fp, tp)
  std::size_t fp = 0, tp = 0;
  const auto [pos, neg] = sweep_thresholds(scores, labels, [&](std::size_t dfp, std::size_t dtp) {
    fp += dfp;
    tp += dtp;
    steps.emplace_back(fp, tp);
  });
  if (pos == 0 || neg == 0) throw InputError("roc_curve: both classes must be present");
  RocCurve curve{{0.0, 0.0}};
  for (const auto& [f, t] : steps) {
    curve.push_back({static_cast<double>(f) / static_cast<double>(neg),
                     static_cast<double>(t) / static_cast<double>(pos)});
  }
  return curve;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  // Twice the area in units of (1/neg) x (1/pos), accumulated exactly.
  unsigned long long twice_area = 0;
  std::size_t tp = 0;
  const auto [pos, neg] = sweep_thresholds(scores, labels, [&](std::size_t dfp, std::size_t dtp) {
    twice_area += static_cast<unsigned long long>(dfp) * (2 * tp + dtp);
    tp += dtp;
  });
  if (pos == 0 || neg == 0) return kUndefinedMetric;
  return static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace threemt
