#include <doctest.h>

#include <algorithm>
#include <random>

#include "threemt/errors.hpp"
#include "threemt/metrics.hpp"

using namespace threemt;

TEST_CASE("confusion examples") {
  const std::vector<double> scores{0.2, 0.9, 0.4, 0.6, 0.1};
  const std::vector<int> labels{0, 1, 1, 0, 0};
  const auto low = confusion(scores, labels, 0.0);
  CHECK(low == ConfusionCounts{2, 0, 3, 0});
  const auto high = confusion(scores, labels, 1.0);
  CHECK(high == ConfusionCounts{0, 3, 0, 2});

  const std::vector<double> s2{0.9, 0.4};
  const std::vector<int> l2{1, 0};
  CHECK(confusion(s2, l2, 0.5) == ConfusionCounts{1, 1, 0, 0});
  // Score equal to the threshold counts as positive.
  const std::vector<double> at{0.5};
  const std::vector<int> pos{1};
  CHECK(confusion(at, pos, 0.5).tp == 1);

  const std::vector<int> short_labels{1};
  CHECK_THROWS_AS(confusion(scores, short_labels, 0.5), InputError);
}

TEST_CASE("binary metrics examples") {
  auto perfect = binary_metrics({7, 5, 0, 0});
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.sensitivity == 1.0);
  CHECK(perfect.specificity == 1.0);

  auto half = binary_metrics({1, 1, 1, 1});
  CHECK(half.accuracy == 0.5);
  CHECK(half.sensitivity == 0.5);
  CHECK(half.specificity == 0.5);

  auto m = binary_metrics({2, 3, 1, 0});
  CHECK(m.accuracy == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(m.sensitivity == 1.0);
  CHECK(m.specificity == 0.75);

  auto no_pos = binary_metrics({0, 3, 1, 0});
  CHECK(is_undefined(no_pos.sensitivity));
  CHECK(no_pos.specificity == 0.75);
  auto none = binary_metrics({0, 0, 0, 0});
  CHECK(is_undefined(none.accuracy));
  CHECK(is_undefined(none.specificity));
}

TEST_CASE("accuracy is the prevalence-weighted mean of sensitivity and specificity") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> u(0, 40);
  for (int t = 0; t < 1000; ++t) {
    ConfusionCounts c{u(rng) + 1, u(rng) + 1, u(rng), u(rng)};
    auto m = binary_metrics(c);
    const double np = double(c.tp + c.fn), nn = double(c.tn + c.fp);
    CHECK(std::abs(m.accuracy - (m.sensitivity * np + m.specificity * nn) / (np + nn)) < 1e-12);
  }
}

TEST_CASE("auc examples") {
  const std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  const std::vector<int> sep_l{0, 0, 1, 1};
  CHECK(auc(sep, sep_l) == 1.0);
  const std::vector<double> flat(6, 0.3);
  const std::vector<int> mixed{0, 1, 1, 0, 1, 0};
  CHECK(auc(flat, mixed) == 0.5);
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<int> l{1, 0, 1, 0};
  CHECK(auc(s, l) == doctest::Approx(0.75).epsilon(1e-12));

  const std::vector<int> one_class{1, 1, 1, 1};
  CHECK(is_undefined(auc(s, one_class)));
  CHECK_THROWS_AS(roc_curve(s, one_class), InputError);
}

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double credit = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        ++pairs;
        credit += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return credit / double(pairs);
}

void random_instance(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& l) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 50)(rng);
  // Coarse scores so ties are common.
  std::uniform_int_distribution<int> level(0, 9);
  s.resize(n);
  l.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = level(rng) / 10.0;
    l[i] = int(rng() % 2);
  }
  l[0] = 0;
  l[1] = 1;
}

}  // namespace

TEST_CASE("auc matches the pairwise oracle and ignores monotone rescaling") {
  std::mt19937_64 rng(17);
  std::vector<double> s;
  std::vector<int> l;
  for (int t = 0; t < 1000; ++t) {
    random_instance(rng, s, l);
    const double a = auc(s, l);
    CHECK(std::abs(a - pairwise_auc(s, l)) < 1e-9);
    std::vector<double> warped(s.size());
    std::transform(s.begin(), s.end(), warped.begin(), [](double x) { return std::exp(3 * x) - 7; });
    CHECK(std::abs(auc(warped, l) - a) < 1e-12);
  }
}

TEST_CASE("roc curve runs from origin to (1,1) monotonically") {
  std::mt19937_64 rng(2);
  std::vector<double> s;
  std::vector<int> l;
  for (int t = 0; t < 200; ++t) {
    random_instance(rng, s, l);
    RocCurve roc = roc_curve(s, l);
    REQUIRE(roc.size() >= 2);
    CHECK(roc.front().fpr == 0.0);
    CHECK(roc.front().tpr == 0.0);
    CHECK(roc.back().fpr == 1.0);
    CHECK(roc.back().tpr == 1.0);
    for (std::size_t i = 1; i < roc.size(); ++i) {
      CHECK(roc[i].fpr >= roc[i - 1].fpr);
      CHECK(roc[i].tpr >= roc[i - 1].tpr);
    }
  }
}
