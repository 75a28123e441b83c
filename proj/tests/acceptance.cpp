// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "threemt/checkpoint.hpp"
#include "threemt/experiments.hpp"

using namespace threemt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and thresholds.
constexpr double kGradTolOp = 1e-4;
constexpr double kGradTolPipeline = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr int kAttentionInstances = 200;
constexpr double kSimplexTol = 1e-6;
constexpr double kPermutationTol = 1e-6;
constexpr std::size_t kDropDraws = 10000;
constexpr double kDropRateTol = 0.02;
constexpr double kMetricTol = 1e-12;
constexpr double kAucTol = 1e-9;
constexpr double kDropoutAucGap = 0.10;
constexpr double kDropoutSeconds = 600.0;
constexpr double kSeparableAccuracy = 0.95;
constexpr double kSingleModalityAccuracy = 0.80;
constexpr double kAuxGradNorm = 1e-8;
constexpr int kSplitDatasets = 100;

int failures = 0;

void report(int id, bool pass, const std::string& what) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t({r, c});
  for (double& x : t.storage()) x = n(rng);
  return t;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = Clock::now();
  const std::vector<GradCheckRow> rows = run_gradcheck(default_gradcheck_cases());
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds && !rows.empty();
  double worst_op = 0, pipeline = 0;
  std::string failed;
  for (const GradCheckRow& r : rows) {
    const bool is_pipeline = r.name == "full_pipeline";
    const double tol = is_pipeline ? kGradTolPipeline : kGradTolOp;
    if (!(r.rel_error < tol) || r.tolerance > tol) {
      ok = false;
      failed += " " + r.name;
    }
    if (is_pipeline) pipeline = r.rel_error;
    else worst_op = std::max(worst_op, r.rel_error);
  }
  std::ostringstream os;
  os << rows.size() << " checks, worst op rel error " << fmt("%.2e", worst_op) << ", pipeline "
     << fmt("%.2e", pipeline) << ", " << fmt("%.1f", secs) << " s";
  if (!failed.empty()) os << "; failed:" << failed;
  report(1, ok, os.str());
}

void attention_invariants() {
  std::mt19937_64 rng(101);
  int simplex = 0, convex = 0, perm = 0, single = 0;
  double worst_simplex = 0, worst_perm = 0;
  for (int inst = 0; inst < kAttentionInstances; ++inst) {
    const std::size_t groups = 1 + rng() % 3, nq = 1 + rng() % 3, nk = 1 + rng() % 6, dk = 1 + rng() % 8;
    const double scale = 0.1 + 3.0 * double(rng() % 100) / 100.0;
    Tape<double> tape;
    auto q = tape.constant(random_matrix(groups * nq, dk, rng, scale));
    auto kt = random_matrix(groups * nk, dk, rng, scale);
    auto vt = random_matrix(groups * nk, dk + 1, rng, 1.0);
    Tensor<double> w;
    auto out = ops::scaled_dot_attention(q, tape.constant(kt), tape.constant(vt), groups, dk, &w);

    bool s_ok = true, c_ok = true;
    for (std::size_t r = 0; r < groups * nq; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        sum += w(r, j);
        s_ok = s_ok && w(r, j) >= 0.0;
      }
      worst_simplex = std::max(worst_simplex, std::abs(sum - 1.0));
      s_ok = s_ok && std::abs(sum - 1.0) < kSimplexTol;
      const std::size_t g = r / nq;
      for (std::size_t c = 0; c < dk + 1; ++c) {
        double lo = vt(g * nk, c), hi = lo;
        for (std::size_t j = 1; j < nk; ++j) {
          lo = std::min(lo, vt(g * nk + j, c));
          hi = std::max(hi, vt(g * nk + j, c));
        }
        const double o = out.value()(r, c);
        c_ok = c_ok && o >= lo - 1e-12 && o <= hi + 1e-12;
      }
    }
    simplex += s_ok;
    convex += c_ok;

    // Joint key/value permutation inside every group.
    Tensor<double> kp = kt, vp = vt;
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<std::size_t> order(nk);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t j = 0; j < nk; ++j) {
        for (std::size_t c = 0; c < dk; ++c) kp(g * nk + j, c) = kt(g * nk + order[j], c);
        for (std::size_t c = 0; c < dk + 1; ++c) vp(g * nk + j, c) = vt(g * nk + order[j], c);
      }
    }
    auto permuted = ops::scaled_dot_attention(q, tape.constant(kp), tape.constant(vp), groups, dk);
    double diff = 0;
    for (std::size_t i = 0; i < out.value().numel(); ++i)
      diff = std::max(diff, std::abs(out.value()[i] - permuted.value()[i]));
    worst_perm = std::max(worst_perm, diff);
    perm += diff < kPermutationTol;

    // One key per group.
    Tensor<double> w1;
    auto k1 = tape.constant(random_matrix(groups, dk, rng, scale));
    auto v1t = random_matrix(groups, dk, rng, 1.0);
    auto o1 = ops::scaled_dot_attention(q, k1, tape.constant(v1t), groups, dk, &w1);
    bool one = true;
    for (std::size_t r = 0; r < groups * nq; ++r) {
      one = one && w1(r, 0) == 1.0;
      for (std::size_t c = 0; c < dk; ++c) one = one && o1.value()(r, c) == v1t(r / nq, c);
    }
    single += one;
  }
  const int n = kAttentionInstances;
  std::ostringstream os;
  os << "over " << n << " instances each: simplex " << simplex << "/" << n << " (max |sum-1| "
     << fmt("%.1e", worst_simplex) << "), convex bound " << convex << "/" << n << ", permutation " << perm << "/"
     << n << " (max diff " << fmt("%.1e", worst_perm) << "), single key " << single << "/" << n;
  report(2, simplex == n && convex == n && perm == n && single == n, os.str());
}

struct Mixed {
  SyntheticDataset data;
  ThreeMTModel<float> model;
  ModalityBatch batch;
};

Mixed mixed_fixture(std::size_t n, std::uint64_t seed) {
  SyntheticTaskConfig cfg;
  cfg.n_samples = n;
  cfg.n_ordinal = 2;
  cfg.n_categorical = 2;
  cfg.seed = seed;
  Mixed f{generate_synthetic(cfg), {}, {}};
  ModelConfig mc;
  mc.d = 16;
  mc.heads = 2;
  mc.seed = seed;
  f.model = ThreeMTModel<float>(f.data.dataset.schema, mc);
  fit_normalization(f.model, f.data.dataset);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  f.batch = make_batch(f.data.dataset, idx, f.model.specs());
  return f;
}

std::vector<Tensor<float>> all_logits(const ThreeMTModel<float>& model, const ModalityBatch& batch,
                                      const DropMask* drop = nullptr,
                                      const ThreeMTModel<float>::EmbeddingOverrides* over = nullptr) {
  Tape<float> tape;
  auto out = model.forward(tape, batch, drop, over);
  std::vector<Tensor<float>> v{out.final_logits.value()};
  for (const auto& a : out.aux_logits) v.push_back(a.value());
  return v;
}

void missing_equals_zero() {
  Mixed f = mixed_fixture(6, 11);
  const std::size_t M = f.model.specs().size();
  std::size_t zero_ok = 0, partial_ok = 0, inert_ok = 0;
  for (std::size_t m = 0; m < M; ++m) {
    ModalityBatch missing = f.batch;
    missing.columns[m].available.assign(missing.size, 0);
    ThreeMTModel<float>::EmbeddingOverrides zero{{m, Tensor<float>({missing.size, 16})}};
    zero_ok += all_logits(f.model, missing) == all_logits(f.model, f.batch, nullptr, &zero);

    ModalityBatch partial = f.batch;
    partial.columns[m].available[2] = 0;
    const auto part = all_logits(f.model, partial);
    const auto full = all_logits(f.model, f.batch);
    const auto none = all_logits(f.model, missing);
    bool p_ok = true;
    for (std::size_t h = 0; h < part.size(); ++h)
      for (std::size_t s = 0; s < 6; ++s)
        for (std::size_t c = 0; c < 2; ++c)
          p_ok = p_ok && part[h](s, c) == (s == 2 ? none[h](s, c) : full[h](s, c));
    partial_ok += p_ok;

    // Raw values behind a dropped flag are never read.
    ModalityBatch changed = f.batch;
    switch (f.model.specs()[m].kind) {
      case ModalityKind::Ordinal:
        for (double& v : changed.columns[m].values) v = -1e7;
        break;
      case ModalityKind::Categorical:
        for (auto& v : changed.columns[m].categories) v = 1 - v;
        break;
      case ModalityKind::Image:
        for (auto& v : changed.columns[m].volumes) v = f.data.dataset.records[0].volume;
        break;
    }
    DropMask drop(f.batch.size, M);
    for (std::size_t s = 0; s < f.batch.size; ++s) drop.set(s, m, false);
    ModalityBatch changed_missing = changed;
    changed_missing.columns[m].available.assign(changed.size, 0);
    inert_ok += all_logits(f.model, f.batch, &drop) == all_logits(f.model, changed, &drop) &&
                all_logits(f.model, missing) == all_logits(f.model, changed_missing);
  }
  std::ostringstream os;
  os << M << " modalities (image, ordinal, categorical): missing==zero override " << zero_ok << "/" << M
     << ", per-sample " << partial_ok << "/" << M << ", dropped values inert " << inert_ok << "/" << M
     << " (exact equality)";
  report(3, zero_ok == M && partial_ok == M && inert_ok == M, os.str());
}

void mdrop_statistics() {
  const std::vector<double> ps{0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0};
  std::vector<ModalitySpec> specs;
  for (std::size_t i = 0; i < ps.size(); ++i) specs.push_back(ModalitySpec::ordinal("m" + std::to_string(i), ps[i]));
  Rng rng(5);
  const DropMask mask = mdrop_sample(specs, kDropDraws, rng);
  bool ok = true;
  std::ostringstream os;
  os << "drop rates over " << kDropDraws << " draws:";
  for (std::size_t m = 0; m < ps.size(); ++m) {
    std::size_t dropped = 0;
    for (std::size_t s = 0; s < kDropDraws; ++s) dropped += !mask.kept(s, m);
    const double rate = double(dropped) / double(kDropDraws);
    ok = ok && std::abs(rate - ps[m]) <= kDropRateTol;
    if (ps[m] == 0.0) ok = ok && dropped == 0;
    if (ps[m] == 1.0) ok = ok && dropped == kDropDraws;
    os << " " << fmt("%.2f", ps[m]) << "->" << fmt("%.4f", rate);
  }

  Mixed f = mixed_fixture(6, 12);
  std::vector<ModalitySpec> all_drop = f.model.specs();
  for (ModalitySpec& s : all_drop) s.p_mdrop = 1.0;
  Rng r2(9);
  const DropMask full_drop = mdrop_sample(all_drop, f.batch.size, r2);
  ModalityBatch none = f.batch;
  for (auto& col : none.columns) col.available.assign(none.size, 0);
  const bool same = all_logits(f.model, f.batch, &full_drop) == all_logits(f.model, none);
  ok = ok && same;
  os << "; p=1 forward " << (same ? "equals" : "differs from") << " the all-missing forward";
  report(4, ok, os.str());
}

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

void metrics_oracle() {
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<std::size_t> count(0, 60);
  int table_ok = 0, auc_ok = 0;
  double worst_metric = 0, worst_auc = 0;
  for (int t = 0; t < 1000; ++t) {
    ConfusionCounts c{count(rng), count(rng), count(rng), count(rng)};
    if (t % 50 == 0) c.tp = c.fn = 0;  // exercise the undefined marker
    const BinaryMetrics m = binary_metrics(c);
    auto ratio = [](std::size_t a, std::size_t b) {
      return b == 0 ? kUndefinedMetric : double((long double)a / (long double)b);
    };
    const double acc = ratio(c.tp + c.tn, c.total());
    const double sen = ratio(c.tp, c.tp + c.fn);
    const double spe = ratio(c.tn, c.tn + c.fp);
    auto close = [&](double got, double want) {
      if (std::isnan(want)) return std::isnan(got);
      worst_metric = std::max(worst_metric, std::abs(got - want));
      return std::abs(got - want) <= kMetricTol;
    };
    table_ok += close(m.accuracy, acc) && close(m.sensitivity, sen) && close(m.specificity, spe);

    const std::size_t n = 2 + rng() % 49;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = t % 2 ? double(rng() % 8) : std::normal_distribution<double>(0, 1)(rng);
      l[i] = int(rng() % 2);
    }
    l[0] = 0;
    l[n - 1] = 1;
    const double diff = std::abs(auc(s, l) - pairwise_auc(s, l));
    worst_auc = std::max(worst_auc, diff);
    auc_ok += diff <= kAucTol;
  }
  std::ostringstream os;
  os << "binary_metrics " << table_ok << "/1000 tables (max err " << fmt("%.1e", worst_metric) << "), auc "
     << auc_ok << "/1000 instances up to 50 samples (max err " << fmt("%.1e", worst_auc) << ")";
  report(5, table_ok == 1000 && auc_ok == 1000, os.str());
}

// ---- training experiments --------------------------------------------------

struct Trained {
  double seconds = 0;
  std::map<std::string, EvalReport> scenarios;
};

Trained train_and_evaluate(const RunConfig& base, std::uint64_t seed, double p,
                           const std::vector<std::pair<std::string, std::set<std::string>>>& scenarios) {
  RunConfig c = base;
  c.seed = c.model.seed = c.train.seed = c.split.seed = c.data.synthetic.seed = seed;
  c.p_mdrop = p;
  const auto t0 = Clock::now();
  const Dataset data = load_run_dataset(c);
  const DatasetSplit split = patient_split(data, c.split);
  FitResult<float> fitted = fit(ThreeMTModel<float>(resolve_specs(c), c.model), split.train, split.val, c.train);
  Trained out;
  for (const auto& [name, missing] : scenarios) out.scenarios[name] = evaluate(fitted.model, split.test, missing);
  out.seconds = seconds_since(t0);
  return out;
}

std::set<std::string> names_of_kind(const std::vector<ModalitySpec>& specs, ModalityKind kind) {
  std::set<std::string> out;
  for (const ModalitySpec& s : specs)
    if (s.kind == kind) out.insert(s.name);
  return out;
}

void dropout_experiments() {
  const RunConfig base = preset_config("informative");
  const std::vector<ModalitySpec> specs = resolve_specs(base);
  const std::set<std::string> vol = names_of_kind(specs, ModalityKind::Image);
  const std::set<std::string> ord = names_of_kind(specs, ModalityKind::Ordinal);
  const std::set<std::string> cat = names_of_kind(specs, ModalityKind::Categorical);
  auto unite = [](std::set<std::string> a, const std::set<std::string>& b) {
    a.insert(b.begin(), b.end());
    return a;
  };
  // Each single-group scenario forces the other two groups missing.
  const std::vector<std::pair<std::string, std::set<std::string>>> scenarios{
      {"full", {}}, {"volume only", unite(ord, cat)}, {"ordinal only", unite(vol, cat)}, {"categorical only", unite(vol, ord)}};
  const char* single[] = {"volume only", "ordinal only", "categorical only"};

  double dropout_seconds = 0;
  std::vector<double> gaps, acc0, acc5, acc9;
  std::ostringstream detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const Trained p0 = train_and_evaluate(base, seed, 0.0, scenarios);
    const Trained p5 = train_and_evaluate(base, seed, 0.5, scenarios);
    const Trained p9 = train_and_evaluate(base, seed, 0.9, scenarios);
    dropout_seconds += p0.seconds + p5.seconds;
    double m0 = 0, m5 = 0;
    for (const char* s : single) {
      m0 += p0.scenarios.at(s).auc / 3.0;
      m5 += p5.scenarios.at(s).auc / 3.0;
    }
    gaps.push_back(m5 - m0);
    acc0.push_back(p0.scenarios.at("full").metrics.accuracy);
    acc5.push_back(p5.scenarios.at("full").metrics.accuracy);
    acc9.push_back(p9.scenarios.at("full").metrics.accuracy);
    std::printf("  seed %llu:", static_cast<unsigned long long>(seed));
    for (const auto& [name, tr] : {std::pair<const char*, const Trained*>{"p=0", &p0}, {"p=0.5", &p5}, {"p=0.9", &p9}}) {
      std::printf(" [%s %.0fs", name, tr->seconds);
      for (const auto& [sc, _] : scenarios)
        std::printf(" %s auc %.3f acc %.3f;", sc.c_str(), tr->scenarios.at(sc).auc, tr->scenarios.at(sc).metrics.accuracy);
      std::printf("]");
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  const double gap = median3(gaps);
  std::ostringstream os6;
  os6 << "median over 3 seeds of mean single-group AUC gap (p=0.5 minus p=0) " << fmt("%.3f", gap) << " (seeds "
      << fmt("%.3f", gaps[0]) << ", " << fmt("%.3f", gaps[1]) << ", " << fmt("%.3f", gaps[2]) << "; need >= "
      << fmt("%.2f", kDropoutAucGap) << "), 6 models in " << fmt("%.0f", dropout_seconds) << " s (limit "
      << fmt("%.0f", kDropoutSeconds) << ")";
  report(6, gap >= kDropoutAucGap && dropout_seconds < kDropoutSeconds, os6.str());

  const double a0 = median3(acc0), a9 = median3(acc9);
  std::ostringstream os7;
  os7 << "median full-data test accuracy p=0 " << fmt("%.3f", a0) << " vs p=0.9 " << fmt("%.3f", a9)
      << " (p=0.5 " << fmt("%.3f", median3(acc5)) << ")";
  report(7, a0 >= a9, os7.str());
}

void separable_sanity() {
  RunConfig c = preset_config("separable");
  const std::vector<ModalitySpec> specs = resolve_specs(c);
  std::vector<std::pair<std::string, std::set<std::string>>> scenarios{{"full", {}}};
  for (const ModalitySpec& keep : specs) {
    std::set<std::string> missing;
    for (const ModalitySpec& s : specs)
      if (s.name != keep.name) missing.insert(s.name);
    scenarios.push_back({keep.name + " only", missing});
  }
  c.output_dir = fs::temp_directory_path() / "threemt_acceptance_separable";
  fs::remove_all(c.output_dir);
  const auto t0 = Clock::now();
  const TrainRun run = run_train(c);
  bool ok = true;
  std::ostringstream os;
  os << "p_mdrop " << fmt("%.1f", c.p_mdrop) << ", val auc " << fmt("%.3f", run.fit.best_val_auc) << "; test accuracy:";
  for (const auto& [name, missing] : scenarios) {
    const EvalReport r = evaluate(run.fit.model, run.split.test, missing);
    const double need = name == "full" ? kSeparableAccuracy : kSingleModalityAccuracy;
    ok = ok && r.metrics.accuracy >= need;
    os << " " << name << " " << fmt("%.3f", r.metrics.accuracy);
  }
  os << " (" << fmt("%.0f", seconds_since(t0)) << " s)";
  report(8, ok, os.str());
}

void aux_reach() {
  std::vector<ModalitySpec> specs;
  for (int m = 0; m < 6; ++m) specs.push_back(ModalitySpec::categorical("m" + std::to_string(m), 4));
  ModelConfig mc;
  mc.seed = 21;
  ThreeMTModel<double> model(specs, mc);
  std::mt19937_64 rng(3);
  ModalityBatch batch;
  batch.size = 4;
  batch.labels = {0, 1, 1, 0};
  for (int m = 0; m < 6; ++m) {
    ModalityColumn col;
    col.available.assign(4, 1);
    for (int s = 0; s < 4; ++s) col.categories.push_back(rng() % 4);
    batch.columns.push_back(col);
  }
  auto grad_norm = [&](double weight) {
    model.zero_grad();
    Tape<double> tape;
    auto out = model.forward(tape, batch);
    tape.backward(compute_total_loss<double>(out.final_logits, out.aux_logits, batch.labels, weight).total);
    double sq = 0;
    for (auto* p : model.embedder_parameters(0))
      for (double g : p->grad.data()) sq += g * g;
    return std::sqrt(sq);
  };
  const double with_aux = grad_norm(1.0);
  const double without = grad_norm(0.0);
  report(9, with_aux > kAuxGradNorm,
         "first-embedder grad norm at depth 6: " + fmt("%.3e", with_aux) + " with aux weight 1 (reported only: " +
             fmt("%.3e", without) + " with weight 0)");
}

void reproducibility() {
  const fs::path root = fs::temp_directory_path() / "threemt_acceptance_repro";
  fs::remove_all(root);
  const std::string text =
      "seed = 17\nmodel.d = 16\nmodel.heads = 2\nimage.block_channels = 4,4,8,8\nimage.encoder_layers = 1\n"
      "image.encoder_heads = 2\ntrain.epochs = 2\nsynthetic.n_samples = 60\nsynthetic.n_ordinal = 2\n"
      "split.train = 0.6\nsplit.val = 0.2\nsplit.test = 0.2\n";
  std::string reports[2], evals[2], ckpts[2];
  TrainRun last;
  for (int i = 0; i < 2; ++i) {
    RunConfig c = parse_run_config_text(text);
    c.output_dir = root / ("run" + std::to_string(i));
    last = run_train(c);
    reports[i] = slurp(last.report);
    ckpts[i] = slurp(last.checkpoint);
    evals[i] = eval_report_csv({{"full", evaluate(last.fit.model, last.split.test)},
                                {"volume", evaluate(last.fit.model, last.split.test, {"volume"})}});
  }
  const ThreeMTModel<float> back = load_checkpoint(last.checkpoint);
  std::vector<std::size_t> idx(last.split.test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const ModalityBatch batch = make_batch(last.split.test, idx, back.specs());
  const Prediction a = last.fit.model.predict(batch), b = back.predict(batch);
  const bool params_same = [&] {
    auto pa = last.fit.model.parameters();
    auto pb = back.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (!(pa[i]->value == pb[i]->value)) return false;
    return true;
  }();
  const bool same_reports = reports[0] == reports[1] && evals[0] == evals[1] && ckpts[0] == ckpts[1];
  const bool round_trip = params_same && a.probabilities == b.probabilities && a.labels == b.labels;
  report(10, same_reports && round_trip,
         std::string("reports and checkpoints byte-identical across runs: ") + (same_reports ? "yes" : "no") +
             "; checkpoint round trip bitwise (parameters and eval outputs on " + std::to_string(idx.size()) +
             " samples): " + (round_trip ? "yes" : "no"));
}

void split_safety() {
  std::mt19937_64 rng(2024);
  int disjoint = 0, multi = 0;
  for (int t = 0; t < kSplitDatasets; ++t) {
    SyntheticTaskConfig cfg;
    cfg.with_volume = false;
    cfg.n_ordinal = 1;
    cfg.n_categorical = 0;
    cfg.n_samples = 12 + rng() % 200;
    cfg.records_per_patient = 1 + rng() % 5;
    cfg.seed = rng();
    Dataset d = generate_synthetic(cfg).dataset;
    // Interleave records so a patient's rows are not contiguous.
    std::shuffle(d.records.begin(), d.records.end(), rng);
    multi += cfg.records_per_patient > 1;
    const double tr = 0.4 + 0.4 * double(rng() % 100) / 100.0;
    const double va = (1.0 - tr) * double(rng() % 100) / 100.0;
    const DatasetSplit s = patient_split(d, {tr, va, 1.0 - tr - va, rng()});
    std::map<std::string, int> owner;
    bool ok = s.train.size() + s.val.size() + s.test.size() == d.size();
    int part = 0;
    for (const Dataset* p : {&s.train, &s.val, &s.test}) {
      for (const SampleRecord& r : p->records) {
        auto [it, fresh] = owner.emplace(r.patient_id, part);
        ok = ok && it->second == part;
      }
      ++part;
    }
    disjoint += ok;
  }
  report(11, disjoint == kSplitDatasets,
         std::to_string(disjoint) + "/" + std::to_string(kSplitDatasets) + " randomized datasets (" +
             std::to_string(multi) + " with multi-record patients) have pairwise-disjoint patient partitions");
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  gradient_fidelity();
  attention_invariants();
  missing_equals_zero();
  mdrop_statistics();
  metrics_oracle();
  dropout_experiments();
  separable_sanity();
  aux_reach();
  reproducibility();
  split_safety();
  std::printf("%d of 11 criteria failed (%.0f s)\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
