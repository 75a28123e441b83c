#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "threemt/modality.hpp"

namespace threemt {

struct SampleRecord {
  std::string patient_id;
  int label = 0;
  // Feature name -> value; std::nullopt marks a missing value.
  std::vector<std::pair<std::string, std::optional<double>>> clinical;
  std::optional<std::string> volume_ref;
  // Loaded, z-scored volume (null when absent or not loaded).
  VolumePtr volume;

  std::optional<double> clinical_value(const std::string& name) const;
  friend bool operator==(const SampleRecord& a, const SampleRecord& b) {
    return a.patient_id == b.patient_id && a.label == b.label && a.clinical == b.clinical &&
           a.volume_ref == b.volume_ref;
  }
};

// Records plus the modality schema their columns follow. The image modality
// (at most one) is fed from SampleRecord::volume.
struct Dataset {
  std::vector<ModalitySpec> schema;
  std::vector<SampleRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct SyntheticTaskConfig {
  std::size_t n_samples = 200;
  std::size_t n_ordinal = 4;
  std::size_t n_categorical = 1;
  bool with_volume = true;
  std::array<std::size_t, 3> volume_shape{16, 16, 16};
  // One entry per feature; a single entry is broadcast to all features.
  std::vector<double> ordinal_separation{1.0};
  std::vector<double> categorical_separation{0.5};
  double volume_separation = 1.0;
  std::vector<double> ordinal_missing{0.0};
  std::vector<double> categorical_missing{0.0};
  double volume_missing = 0.0;
  std::size_t records_per_patient = 1;
  std::string patient_prefix = "P";
  std::uint64_t seed = 0;
};

// Feature names used by the generator: ord0.., cat0.., and "volume".
inline constexpr const char* kSyntheticVolumeName = "volume";
std::vector<ModalitySpec> synthetic_schema(const SyntheticTaskConfig& cfg, double p_mdrop = 0.5);

struct SyntheticDataset {
  Dataset dataset;
  // Raw (pre-normalization) voxels for each record, null where no volume.
  std::vector<std::shared_ptr<const std::vector<float>>> raw_volumes;
};

// Balanced labels; ordinal ~ Normal(label * sep, 1); categorical in {0,1} with
// P(1 | y) = (1 + (2y - 1) * sep) / 2; volume = unit noise plus a centred
// sphere of intensity label * sep. Missingness is i.i.d. per value.
SyntheticDataset generate_synthetic(const SyntheticTaskConfig& cfg);

// Writes <dir>/dataset.csv and <dir>/volumes/*.mmv; returns the CSV path.
std::filesystem::path materialize_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);

// ---- raw volume files: "MMV1", u32 D, H, W (little endian), then D*H*W f32 LE.

struct RawVolume {
  std::array<std::uint32_t, 3> dims{};
  std::vector<float> voxels;
};

void write_volume(const std::filesystem::path& path, const std::array<std::uint32_t, 3>& dims,
                  std::span<const float> voxels);
RawVolume read_volume_raw(const std::filesystem::path& path);
// (1 x D x H x W), z-scored per volume; near-constant volumes (std < 1e-8) become zeros.
Tensor<float> zscore_volume(const RawVolume& raw);
Tensor<float> load_volume(const std::filesystem::path& path);

// ---- clinical CSV: header patient_id,label,volume_ref,<features...>; empty cell = missing.

std::vector<SampleRecord> load_clinical_csv(const std::filesystem::path& path,
                                            const std::vector<std::string>& features);
void write_clinical_csv(const std::filesystem::path& path, const std::vector<SampleRecord>& records,
                        const std::vector<std::string>& features);

// CSV records plus their volumes (volume_ref resolved relative to the CSV's
// directory). Validates categorical codes against the schema.
Dataset load_dataset(const std::filesystem::path& csv_path, const std::vector<ModalitySpec>& schema);

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  Dataset train, val, test;
};

// Shuffles unique patient ids with the seed and assigns whole patients:
// floor(train * P), then floor(val * P), remainder to test.
DatasetSplit patient_split(const Dataset& data, const SplitSpec& spec);

// One column per model spec. Modalities named in force_missing are marked
// unavailable for every sample.
ModalityBatch make_batch(const Dataset& data, std::span<const std::size_t> indices,
                         const std::vector<ModalitySpec>& specs,
                         const std::set<std::string>& force_missing = {});

}  // namespace threemt
