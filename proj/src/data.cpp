#include "threemt/data.hpp"

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "threemt/errors.hpp"
#include "threemt/layers.hpp"
#include "byteio.hpp"

namespace threemt {

namespace fs = std::filesystem;
using detail::get_u32;
using detail::put_u32;

std::optional<double> SampleRecord::clinical_value(const std::string& name) const {
  for (const auto& [feature, value] : clinical) {
    if (feature == name) return value;
  }
  return std::nullopt;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.schema = schema;
  out.records.reserve(indices.size());
  for (std::size_t i : indices) out.records.push_back(records.at(i));
  return out;
}

namespace {

double broadcast(const std::vector<double>& values, std::size_t i, const char* what) {
  if (values.empty()) throw ConfigError(std::string(what) + " needs at least one value");
  if (values.size() == 1) return values[0];
  if (i >= values.size()) throw ConfigError(std::string(what) + " has fewer entries than features");
  return values[i];
}

void check_rate(double r, const char* what) {
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && (s[start] == ' ' || s[start] == '\t')) ++start;
  return s.substr(start);
}

}  // namespace

std::vector<ModalitySpec> synthetic_schema(const SyntheticTaskConfig& cfg, double p_mdrop) {
  std::vector<ModalitySpec> specs;
  if (cfg.with_volume) specs.push_back(ModalitySpec::image(kSyntheticVolumeName, cfg.volume_shape, p_mdrop));
  for (std::size_t k = 0; k < cfg.n_ordinal; ++k) specs.push_back(ModalitySpec::ordinal("ord" + std::to_string(k), p_mdrop));
  for (std::size_t k = 0; k < cfg.n_categorical; ++k) {
    specs.push_back(ModalitySpec::categorical("cat" + std::to_string(k), 2, p_mdrop));
  }
  return specs;
}

SyntheticDataset generate_synthetic(const SyntheticTaskConfig& cfg) {
  if (cfg.n_samples < 2) throw ConfigError("synthetic dataset needs n_samples >= 2");
  if (cfg.records_per_patient == 0) throw ConfigError("records_per_patient must be >= 1");
  for (std::size_t k = 0; k < cfg.n_ordinal; ++k) {
    if (broadcast(cfg.ordinal_separation, k, "ordinal_separation") < 0.0) {
      throw ConfigError("separations must be >= 0");
    }
    check_rate(broadcast(cfg.ordinal_missing, k, "ordinal_missing"), "ordinal_missing");
  }
  for (std::size_t k = 0; k < cfg.n_categorical; ++k) {
    if (broadcast(cfg.categorical_separation, k, "categorical_separation") < 0.0) {
      throw ConfigError("separations must be >= 0");
    }
    check_rate(broadcast(cfg.categorical_missing, k, "categorical_missing"), "categorical_missing");
  }
  if (cfg.volume_separation < 0.0) throw ConfigError("separations must be >= 0");
  check_rate(cfg.volume_missing, "volume_missing");

  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t n_patients = (cfg.n_samples + cfg.records_per_patient - 1) / cfg.records_per_patient;
  std::vector<int> patient_labels(n_patients);
  for (std::size_t p = 0; p < n_patients; ++p) patient_labels[p] = static_cast<int>(p % 2);
  std::shuffle(patient_labels.begin(), patient_labels.end(), rng);

  const auto [vd, vh, vw] = cfg.volume_shape;
  const std::size_t vox = vd * vh * vw;
  const double radius = static_cast<double>(std::min({vd, vh, vw})) / 4.0;
  const double cz = (static_cast<double>(vd) - 1) / 2, cy = (static_cast<double>(vh) - 1) / 2,
               cx = (static_cast<double>(vw) - 1) / 2;
  std::vector<std::uint8_t> in_blob;
  if (cfg.with_volume) {
    in_blob.resize(vox);
    for (std::size_t z = 0; z < vd; ++z)
      for (std::size_t y = 0; y < vh; ++y)
        for (std::size_t x = 0; x < vw; ++x) {
          const double dz = static_cast<double>(z) - cz, dy = static_cast<double>(y) - cy,
                       dx = static_cast<double>(x) - cx;
          in_blob[(z * vh + y) * vw + x] = dz * dz + dy * dy + dx * dx <= radius * radius;
        }
  }

  SyntheticDataset out;
  out.dataset.schema = synthetic_schema(cfg);
  const int width = static_cast<int>(std::to_string(n_patients).size());
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const std::size_t patient = i / cfg.records_per_patient;
    SampleRecord rec;
    char id[64];
    std::snprintf(id, sizeof id, "%s%0*zu", cfg.patient_prefix.c_str(), width, patient);
    rec.patient_id = id;
    rec.label = patient_labels[patient];
    const double y = rec.label;

    for (std::size_t k = 0; k < cfg.n_ordinal; ++k) {
      const double value = y * broadcast(cfg.ordinal_separation, k, "") + normal(rng);
      const bool missing = unit(rng) < broadcast(cfg.ordinal_missing, k, "");
      rec.clinical.emplace_back("ord" + std::to_string(k), missing ? std::nullopt : std::optional<double>(value));
    }
    for (std::size_t k = 0; k < cfg.n_categorical; ++k) {
      const double tv = std::min(1.0, broadcast(cfg.categorical_separation, k, ""));
      const double p_one = (1.0 + (2.0 * y - 1.0) * tv) / 2.0;
      const double value = unit(rng) < p_one ? 1.0 : 0.0;
      const bool missing = unit(rng) < broadcast(cfg.categorical_missing, k, "");
      rec.clinical.emplace_back("cat" + std::to_string(k), missing ? std::nullopt : std::optional<double>(value));
    }
    std::shared_ptr<const std::vector<float>> raw;
    if (cfg.with_volume) {
      auto voxels = std::make_shared<std::vector<float>>(vox);
      const double intensity = y * cfg.volume_separation;
      for (std::size_t v = 0; v < vox; ++v) {
        (*voxels)[v] = static_cast<float>(normal(rng) + (in_blob[v] ? intensity : 0.0));
      }
      const bool missing = unit(rng) < cfg.volume_missing;
      if (!missing) {
        raw = voxels;
        char ref[96];
        std::snprintf(ref, sizeof ref, "volumes/%s_%zu.mmv", rec.patient_id.c_str(), i % cfg.records_per_patient);
        rec.volume_ref = ref;
        RawVolume rv{{static_cast<std::uint32_t>(vd), static_cast<std::uint32_t>(vh), static_cast<std::uint32_t>(vw)},
                     *voxels};
        rec.volume = std::make_shared<const Tensor<float>>(zscore_volume(rv));
      }
    }
    out.raw_volumes.push_back(std::move(raw));
    out.dataset.records.push_back(std::move(rec));
  }
  return out;
}

fs::path materialize_synthetic(const SyntheticDataset& data, const fs::path& dir) {
  fs::create_directories(dir / "volumes");
  std::vector<std::string> features;
  std::array<std::uint32_t, 3> dims{};
  for (const ModalitySpec& s : data.dataset.schema) {
    if (s.kind == ModalityKind::Image) {
      for (int a = 0; a < 3; ++a) dims[a] = static_cast<std::uint32_t>(s.volume_shape[a]);
    } else {
      features.push_back(s.name);
    }
  }
  for (std::size_t i = 0; i < data.dataset.records.size(); ++i) {
    const SampleRecord& rec = data.dataset.records[i];
    if (rec.volume_ref && data.raw_volumes[i]) write_volume(dir / *rec.volume_ref, dims, *data.raw_volumes[i]);
  }
  const fs::path csv = dir / "dataset.csv";
  write_clinical_csv(csv, data.dataset.records, features);
  return csv;
}

void write_volume(const fs::path& path, const std::array<std::uint32_t, 3>& dims, std::span<const float> voxels) {
  if (static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] != voxels.size()) {
    throw ShapeError("write_volume: payload length does not match dims");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write("MMV1", 4);
  for (std::uint32_t d : dims) put_u32(os, d);
  for (float v : voxels) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw FormatError("failed writing " + path.string());
}

RawVolume read_volume_raw(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open volume " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::string(bytes.begin(), bytes.begin() + 4) != "MMV1") {
    throw FormatError(path.string() + ": not a raw volume (magic MMV1 expected)");
  }
  RawVolume out;
  for (int a = 0; a < 3; ++a) out.dims[a] = get_u32(bytes.data() + 4 + 4 * a);
  const std::uint64_t count = static_cast<std::uint64_t>(out.dims[0]) * out.dims[1] * out.dims[2];
  if (count == 0) throw FormatError(path.string() + ": volume dims must be positive");
  if (bytes.size() - 16 != count * 4) {
    throw FormatError(path.string() + ": payload holds " + std::to_string((bytes.size() - 16) / 4) +
                      " floats, header declares " + std::to_string(count));
  }
  out.voxels.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) out.voxels[i] = std::bit_cast<float>(get_u32(bytes.data() + 16 + 4 * i));
  return out;
}

Tensor<float> zscore_volume(const RawVolume& raw) {
  const std::size_t n = raw.voxels.size();
  double mean = 0.0;
  for (float v : raw.voxels) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : raw.voxels) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  Tensor<float> out({1, raw.dims[0], raw.dims[1], raw.dims[2]});
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>((raw.voxels[i] - mean) / sd);
  return out;
}

Tensor<float> load_volume(const fs::path& path) { return zscore_volume(read_volume_raw(path)); }

std::vector<SampleRecord> load_clinical_csv(const fs::path& path, const std::vector<std::string>& features) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open clinical CSV " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": missing header row");
  std::vector<std::string> header = split_csv_line(line);
  for (std::string& h : header) h = strip(h);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_id = column("patient_id"), c_label = column("label"), c_vol = column("volume_ref");
  std::vector<std::size_t> c_feat;
  for (const std::string& f : features) c_feat.push_back(column(f));

  std::vector<SampleRecord> records;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (strip(line).empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    for (std::string& c : cells) c = strip(c);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()));
    }
    SampleRecord rec;
    rec.patient_id = cells[c_id];
    if (rec.patient_id.empty()) throw FormatError(path.string() + " line " + std::to_string(line_no) + ": empty patient_id");
    if (cells[c_label] == "0" || cells[c_label] == "1") {
      rec.label = cells[c_label][0] - '0';
    } else {
      throw FormatError(path.string() + " line " + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                        cells[c_label] + "'");
    }
    if (!cells[c_vol].empty()) rec.volume_ref = cells[c_vol];
    for (std::size_t f = 0; f < features.size(); ++f) {
      const std::string& cell = cells[c_feat[f]];
      if (cell.empty()) {
        rec.clinical.emplace_back(features[f], std::nullopt);
        continue;
      }
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(cell.c_str(), &end);
      if (end != cell.c_str() + cell.size() || errno == ERANGE || !std::isfinite(v)) {
        throw FormatError(path.string() + " line " + std::to_string(line_no) + ": cannot parse '" + cell +
                          "' in column '" + features[f] + "'");
      }
      rec.clinical.emplace_back(features[f], v);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_clinical_csv(const fs::path& path, const std::vector<SampleRecord>& records,
                        const std::vector<std::string>& features) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << "patient_id,label,volume_ref";
  for (const std::string& f : features) os << ',' << f;
  os << '\n';
  for (const SampleRecord& r : records) {
    os << r.patient_id << ',' << r.label << ',' << r.volume_ref.value_or("");
    for (const std::string& f : features) {
      os << ',';
      if (auto v = r.clinical_value(f)) os << format_double(*v);
    }
    os << '\n';
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

Dataset load_dataset(const fs::path& csv_path, const std::vector<ModalitySpec>& schema) {
  std::vector<std::string> features;
  std::size_t images = 0;
  const ModalitySpec* image = nullptr;
  for (const ModalitySpec& s : schema) {
    if (s.kind == ModalityKind::Image) {
      ++images;
      image = &s;
    } else {
      features.push_back(s.name);
    }
  }
  if (images > 1) throw ConfigError("a CSV dataset carries at most one image modality (volume_ref)");
  Dataset out;
  out.schema = schema;
  out.records = load_clinical_csv(csv_path, features);
  const fs::path base = csv_path.parent_path();
  for (SampleRecord& rec : out.records) {
    for (const ModalitySpec& s : schema) {
      if (s.kind != ModalityKind::Categorical) continue;
      if (auto v = rec.clinical_value(s.name)) {
        if (*v < 0 || *v != std::floor(*v) || *v >= static_cast<double>(s.vocab_size)) {
          throw InputError("patient " + rec.patient_id + ": categorical '" + s.name + "' value " +
                           format_double(*v) + " is not a code in [0, " + std::to_string(s.vocab_size) + ")");
        }
      }
    }
    if (image && rec.volume_ref) {
      Tensor<float> vol = load_volume(base / *rec.volume_ref);
      const Shape expected{1, image->volume_shape[0], image->volume_shape[1], image->volume_shape[2]};
      if (vol.shape() != expected) {
        throw InputError("volume " + *rec.volume_ref + " has shape " + shape_str(vol.shape()) + ", expected " +
                         shape_str(expected));
      }
      rec.volume = std::make_shared<const Tensor<float>>(std::move(vol));
    }
  }
  return out;
}

DatasetSplit patient_split(const Dataset& data, const SplitSpec& spec) {
  const double fractions[3] = {spec.train, spec.val, spec.test};
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw InputError("split fractions must lie in [0, 1]");
  }
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) throw InputError("split fractions must sum to 1");

  std::vector<std::string> patients;
  std::map<std::string, std::size_t> seen;
  for (const SampleRecord& r : data.records) {
    if (seen.emplace(r.patient_id, patients.size()).second) patients.push_back(r.patient_id);
  }
  const std::size_t wanted = static_cast<std::size_t>(std::count_if(
      std::begin(fractions), std::end(fractions), [](double f) { return f > 0.0; }));
  if (patients.size() < wanted) {
    throw InputError("patient_split: " + std::to_string(patients.size()) + " unique patients cannot fill " +
                     std::to_string(wanted) + " non-empty partitions");
  }
  Rng rng(spec.seed);
  std::shuffle(patients.begin(), patients.end(), rng);
  const std::size_t n = patients.size();
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n) + 1e-9));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n) + 1e-9)));

  std::map<std::string, int> partition;
  for (std::size_t i = 0; i < n; ++i) partition[patients[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);

  std::vector<std::size_t> idx[3];
  for (std::size_t i = 0; i < data.records.size(); ++i) idx[partition.at(data.records[i].patient_id)].push_back(i);
  return {data.subset(idx[0]), data.subset(idx[1]), data.subset(idx[2])};
}

ModalityBatch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                         const std::vector<ModalitySpec>& specs, const std::set<std::string>& force_missing) {
  for (const std::string& name : force_missing) {
    if (std::none_of(specs.begin(), specs.end(), [&](const ModalitySpec& s) { return s.name == name; })) {
      throw InputError("unknown modality '" + name + "' in missing list");
    }
  }
  ModalityBatch batch;
  batch.size = indices.size();
  for (std::size_t i : indices) batch.labels.push_back(data.records.at(i).label);
  for (const ModalitySpec& spec : specs) {
    auto in_schema = std::find_if(data.schema.begin(), data.schema.end(),
                                  [&](const ModalitySpec& s) { return s.name == spec.name; });
    if (in_schema == data.schema.end() || in_schema->kind != spec.kind) {
      throw InputError("modality '" + spec.name + "' (" + to_string(spec.kind) + ") is not in the dataset schema");
    }
    const bool forced = force_missing.count(spec.name) > 0;
    ModalityColumn col;
    col.available.assign(indices.size(), 0);
    switch (spec.kind) {
      case ModalityKind::Categorical:
        col.categories.assign(indices.size(), 0);
        break;
      case ModalityKind::Ordinal:
        col.values.assign(indices.size(), 0.0);
        break;
      case ModalityKind::Image:
        col.volumes.assign(indices.size(), nullptr);
        break;
    }
    for (std::size_t row = 0; row < indices.size(); ++row) {
      if (forced) continue;
      const SampleRecord& rec = data.records.at(indices[row]);
      if (spec.kind == ModalityKind::Image) {
        if (rec.volume) {
          col.volumes[row] = rec.volume;
          col.available[row] = 1;
        }
        continue;
      }
      const std::optional<double> v = rec.clinical_value(spec.name);
      if (!v) continue;
      col.available[row] = 1;
      if (spec.kind == ModalityKind::Ordinal) {
        col.values[row] = *v;
      } else {
        if (*v < 0 || *v != std::floor(*v) || *v >= static_cast<double>(spec.vocab_size)) {
          throw InputError("categorical index " + format_double(*v) + " out of range for vocab_size " +
                           std::to_string(spec.vocab_size));
        }
        col.categories[row] = static_cast<std::size_t>(*v);
      }
    }
    batch.columns.push_back(std::move(col));
  }
  return batch;
}

}  // namespace threemt
