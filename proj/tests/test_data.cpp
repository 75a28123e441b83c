#include <doctest.h>

#include <fstream>
#include <map>

#include "test_util.hpp"
#include "threemt/data.hpp"
#include "threemt/errors.hpp"
#include "threemt/training.hpp"

using namespace threemt;
namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::set<std::string> patients(const Dataset& d) {
  std::set<std::string> out;
  for (const auto& r : d.records) out.insert(r.patient_id);
  return out;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic and honours zero missingness") {
  SyntheticTaskConfig cfg;
  cfg.n_samples = 30;
  cfg.volume_shape = {8, 8, 8};
  cfg.seed = 4;
  auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  REQUIRE(a.dataset.size() == 30);
  CHECK(a.dataset.records == b.dataset.records);
  int positives = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    const auto& r = a.dataset.records[i];
    positives += r.label;
    CHECK(*r.volume == *b.dataset.records[i].volume);
    CHECK(*a.raw_volumes[i] == *b.raw_volumes[i]);
    REQUIRE(r.volume);
    for (const auto& [name, v] : r.clinical) CHECK(v.has_value());
  }
  CHECK(positives == 15);

  cfg.seed = 5;
  CHECK_FALSE(generate_synthetic(cfg).dataset.records == a.dataset.records);

  cfg.ordinal_missing = {1.0};
  cfg.volume_missing = 1.0;
  for (const auto& r : generate_synthetic(cfg).dataset.records) {
    CHECK_FALSE(r.volume);
    CHECK_FALSE(r.volume_ref);
    CHECK_FALSE(r.clinical_value("ord0"));
  }
}

TEST_CASE("label-independent features give chance-level AUC on 2000 test samples") {
  SyntheticTaskConfig cfg;
  cfg.n_ordinal = 2;
  cfg.n_categorical = 1;
  cfg.with_volume = false;
  cfg.ordinal_separation = {0.0};
  cfg.categorical_separation = {0.0};
  cfg.n_samples = 200;
  cfg.seed = 1;
  Dataset train = generate_synthetic(cfg).dataset;
  cfg.n_samples = 2000;
  cfg.seed = 2;
  cfg.patient_prefix = "T";
  Dataset test = generate_synthetic(cfg).dataset;

  ModelConfig mc;
  mc.d = 16;
  mc.heads = 2;
  TrainConfig tc;
  tc.epochs = 5;
  auto fitted = fit(ThreeMTModel<float>(train.schema, mc), train, train, tc);
  const double a = evaluate(fitted.model, test).auc;
  INFO("null-task AUC " << a);
  CHECK(a >= 0.45);
  CHECK(a <= 0.55);
}

TEST_CASE("clinical CSV parsing") {
  const fs::path dir = testutil::scratch_dir("csv");
  const std::vector<std::string> features{"age", "MMSE"};

  write_file(dir / "empty.csv", "patient_id,label,volume_ref,age,MMSE\n");
  CHECK(load_clinical_csv(dir / "empty.csv", features).empty());

  write_file(dir / "gap.csv", "patient_id,label,volume_ref,MMSE,age\nA,1,,,71.5\nB,0,v.mmv,28,\n");
  auto recs = load_clinical_csv(dir / "gap.csv", features);
  REQUIRE(recs.size() == 2);
  CHECK_FALSE(recs[0].clinical_value("MMSE"));
  CHECK(*recs[0].clinical_value("age") == 71.5);
  CHECK_FALSE(recs[0].volume_ref);
  CHECK(*recs[1].volume_ref == "v.mmv");
  CHECK(*recs[1].clinical_value("MMSE") == 28.0);
  CHECK_FALSE(recs[1].clinical_value("age"));

  write_file(dir / "nocol.csv", "patient_id,label,volume_ref,age\nA,1,,3\n");
  try {
    load_clinical_csv(dir / "nocol.csv", features);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("MMSE") != std::string::npos);
  }

  write_file(dir / "bad.csv", "patient_id,label,volume_ref,age,MMSE\nA,1,,3,4\nB,0,,x7,4\n");
  try {
    load_clinical_csv(dir / "bad.csv", features);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("generated dataset survives a CSV and volume round trip") {
  SyntheticTaskConfig cfg;
  cfg.n_samples = 24;
  cfg.volume_shape = {6, 5, 4};
  cfg.ordinal_missing = {0.3};
  cfg.categorical_missing = {0.3};
  cfg.volume_missing = 0.25;
  cfg.records_per_patient = 2;
  cfg.seed = 8;
  auto gen = generate_synthetic(cfg);
  const fs::path csv = materialize_synthetic(gen, testutil::scratch_dir("roundtrip"));
  Dataset back = load_dataset(csv, gen.dataset.schema);
  REQUIRE(back.size() == gen.dataset.size());
  CHECK(back.records == gen.dataset.records);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(bool(back.records[i].volume) == bool(gen.dataset.records[i].volume));
    if (back.records[i].volume) CHECK(*back.records[i].volume == *gen.dataset.records[i].volume);
  }
}

TEST_CASE("raw volume files") {
  const fs::path dir = testutil::scratch_dir("volume");
  std::mt19937_64 rng(6);
  Tensor<float> rnd = testutil::random_tensor<float>({3 * 4 * 5}, rng, -10, 10);
  write_volume(dir / "r.mmv", {3, 4, 5}, rnd.data());
  RawVolume raw = read_volume_raw(dir / "r.mmv");
  CHECK(raw.dims == std::array<std::uint32_t, 3>{3, 4, 5});
  CHECK(raw.voxels == rnd.storage());

  Tensor<float> z = load_volume(dir / "r.mmv");
  CHECK(z.shape() == Shape{1, 3, 4, 5});
  double mean = 0, sq = 0;
  for (float v : z.data()) mean += v;
  mean /= double(z.numel());
  for (float v : z.data()) sq += (v - mean) * (v - mean);
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(std::sqrt(sq / double(z.numel())) - 1.0) < 1e-4);

  const std::vector<float> constant(8, 3.25f);
  write_volume(dir / "c.mmv", {2, 2, 2}, constant);
  const Tensor<float> flat = load_volume(dir / "c.mmv");
  for (float v : flat.data()) CHECK(v == 0.0f);

  {
    std::ofstream os(dir / "short.mmv", std::ios::binary);
    os.write("MMV1", 4);
    const unsigned char dims[12] = {4, 0, 0, 0, 4, 0, 0, 0, 4, 0, 0, 0};
    os.write(reinterpret_cast<const char*>(dims), 12);
    const std::vector<float> payload(63, 1.0f);
    os.write(reinterpret_cast<const char*>(payload.data()), 63 * 4);
  }
  CHECK_THROWS_AS(load_volume(dir / "short.mmv"), FormatError);
  write_file(dir / "magic.mmv", "NOPE000000000000");
  CHECK_THROWS_AS(load_volume(dir / "magic.mmv"), FormatError);
}

TEST_CASE("patient split sizes, grouping and errors") {
  SyntheticTaskConfig cfg;
  cfg.with_volume = false;
  cfg.n_samples = 4;
  auto four = generate_synthetic(cfg).dataset;
  auto s = patient_split(four, {0.5, 0.25, 0.25, 3});
  CHECK(s.train.size() == 2);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);

  cfg.n_samples = 50;
  cfg.records_per_patient = 5;
  auto grouped = generate_synthetic(cfg).dataset;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = patient_split(grouped, {0.6, 0.2, 0.2, seed});
    for (const Dataset* part : {&g.train, &g.val, &g.test}) {
      std::map<std::string, int> count;
      for (const auto& r : part->records) ++count[r.patient_id];
      for (const auto& [id, c] : count) CHECK(c == 5);
    }
    CHECK(g.train.size() + g.val.size() + g.test.size() == 50);
  }

  cfg.n_samples = 2;
  cfg.records_per_patient = 1;
  CHECK_THROWS_AS(patient_split(generate_synthetic(cfg).dataset, {0.4, 0.3, 0.3, 0}), InputError);
  CHECK_THROWS_AS(patient_split(four, {0.5, 0.5, 0.5, 0}), InputError);
}

TEST_CASE("patient split partitions are disjoint over 100 random datasets") {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 100; ++t) {
    SyntheticTaskConfig cfg;
    cfg.with_volume = false;
    cfg.n_ordinal = 1;
    cfg.n_categorical = 0;
    cfg.n_samples = 10 + rng() % 90;
    cfg.records_per_patient = 1 + rng() % 4;
    cfg.seed = rng();
    Dataset d = generate_synthetic(cfg).dataset;
    const double tr = 0.3 + 0.5 * double(rng() % 100) / 100.0;
    const double va = (1.0 - tr) / 2.0;
    auto s = patient_split(d, {tr, va, 1.0 - tr - va, rng()});
    auto a = patients(s.train), b = patients(s.val), c = patients(s.test);
    for (const auto& id : a) CHECK((b.count(id) == 0 && c.count(id) == 0));
    for (const auto& id : b) CHECK(c.count(id) == 0);
    CHECK(s.train.size() + s.val.size() + s.test.size() == d.size());
  }
}

TEST_CASE("make_batch marks forced and absent modalities unavailable") {
  SyntheticTaskConfig cfg;
  cfg.n_samples = 6;
  cfg.volume_shape = {4, 4, 4};
  cfg.ordinal_missing = {0.5};
  cfg.seed = 2;
  Dataset d = generate_synthetic(cfg).dataset;
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  ModalityBatch b = make_batch(d, idx, d.schema, {"cat0"});
  for (std::size_t m = 0; m < d.schema.size(); ++m) {
    for (std::size_t s = 0; s < 6; ++s) {
      if (d.schema[m].name == "cat0") CHECK(b.columns[m].available[s] == 0);
      if (d.schema[m].name == "ord0")
        CHECK(bool(b.columns[m].available[s]) == d.records[s].clinical_value("ord0").has_value());
    }
  }
  CHECK_THROWS_AS(make_batch(d, idx, d.schema, {"nope"}), InputError);
}
