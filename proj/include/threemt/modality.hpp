#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "threemt/tensor.hpp"

namespace threemt {

enum class ModalityKind { Categorical, Ordinal, Image };

std::string to_string(ModalityKind kind);
ModalityKind modality_kind_from_string(const std::string& text);

// Declaration of one input modality. Cascade order is declaration order.
struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::Ordinal;
  std::size_t vocab_size = 0;                  // categorical only
  std::array<std::size_t, 3> volume_shape{};   // image only: D, H, W
  double p_mdrop = 0.5;

  static ModalitySpec categorical(std::string name, std::size_t vocab_size, double p_mdrop = 0.5);
  static ModalitySpec ordinal(std::string name, double p_mdrop = 0.5);
  static ModalitySpec image(std::string name, std::array<std::size_t, 3> shape, double p_mdrop = 0.5);
};

// Throws ConfigError on duplicate names, bad p_mdrop, or empty categorical vocabularies.
void validate_specs(const std::vector<ModalitySpec>& specs);

// A z-scored volume of shape (1 x D x H x W), shared between datasets and batches.
using VolumePtr = std::shared_ptr<const Tensor<float>>;

// Values of one modality across a batch. Only the field matching the
// modality's kind is filled; entries with available == 0 are placeholders
// and are never read.
struct ModalityColumn {
  std::vector<std::uint8_t> available;
  std::vector<std::size_t> categories;
  std::vector<double> values;
  std::vector<VolumePtr> volumes;
};

// One column per model modality (same order as the specs) plus labels.
struct ModalityBatch {
  std::size_t size = 0;
  std::vector<ModalityColumn> columns;
  std::vector<int> labels;
};

}  // namespace threemt
