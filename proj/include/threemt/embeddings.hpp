#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "threemt/attention.hpp"
#include "threemt/layers.hpp"

namespace threemt {

// Lookup table (vocab_size x d).
template <typename T>
class CategoricalEmbedder {
 public:
  CategoricalEmbedder() = default;
  CategoricalEmbedder(const std::string& name, std::size_t vocab_size, std::size_t d, Rng& rng);

  // (k x d): row i is table[indices[i]].
  Var<T> embed(Tape<T>& tape, std::span<const std::size_t> indices) const;

  std::size_t vocab_size() const { return table_.value.rows(); }
  Parameter<T>& table() { return table_; }
  void collect(ParamRefs<T>& out) { out.push_back(&table_); }

 private:
  Parameter<T> table_;
};

// Affine map of a z-scored scalar: weight * ((value - mean) / std) + bias.
template <typename T>
class OrdinalEmbedder {
 public:
  OrdinalEmbedder() = default;
  OrdinalEmbedder(const std::string& name, std::size_t d, Rng& rng);

  // Estimates mean/std from observed training values. Rejects constant or
  // empty features with InputError.
  void fit(std::span<const double> values);
  void set_normalization(double mean, double std);
  bool fitted() const noexcept { return fitted_; }
  double mean() const noexcept { return mean_; }
  double std() const noexcept { return std_; }

  // (k x d); throws StateError before fit.
  Var<T> embed(Tape<T>& tape, std::span<const double> values) const;

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter<T> weight_;  // (1 x d)
  Parameter<T> bias_;    // (d)
  double mean_ = 0.0;
  double std_ = 0.0;
  bool fitted_ = false;
};

// Normalization used after each CNN convolution: statistics over every
// channel and voxel of one sample, or over the channels of each voxel.
enum class VolumeNorm { Sample, Voxel };

std::string to_string(VolumeNorm norm);
VolumeNorm volume_norm_from_string(const std::string& text);

struct ImageEncoderConfig {
  std::size_t stem_channels = 4;
  std::array<std::size_t, 4> block_channels{8, 16, 32, 64};
  std::size_t encoder_layers = 2;
  std::size_t encoder_heads = 4;
  VolumeNorm norm = VolumeNorm::Sample;
};

// Number of patch tokens after the stride-16 CNN for a D x H x W input.
std::size_t image_patch_count(const std::array<std::size_t, 3>& volume_shape);

// 3-D CNN + transformer encoder producing one d-vector per volume:
// two stride-1 conv layers, four residual stride-2 blocks, one token per
// remaining voxel plus a learned positional table, pre-norm encoder layers,
// mean over tokens, linear projection to d.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const std::string& name, std::array<std::size_t, 3> volume_shape, std::size_t d,
               const ImageEncoderConfig& cfg, Rng& rng);

  // volumes: (b x 1 x D x H x W) -> (b x d).
  Var<T> encode(Tape<T>& tape, const Var<T>& volumes) const;

  std::size_t num_patches() const noexcept { return num_patches_; }
  const std::array<std::size_t, 3>& volume_shape() const noexcept { return volume_shape_; }
  void collect(ParamRefs<T>& out);

 private:
  struct Conv {
    Parameter<T> kernel;
    Parameter<T> bias;
    std::size_t stride = 1;
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
  };
  struct ResidualBlock {
    Conv down, conv, shortcut;
    LayerNorm<T> norm_down, norm_conv;
  };
  struct EncoderLayer {
    LayerNorm<T> norm_attn, norm_ff;
    MultiHeadAttention<T> attn;
    Linear<T> ff_in, ff_out;
  };

  static Conv make_conv(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                        std::size_t stride, Rng& rng);

  std::array<std::size_t, 3> volume_shape_{};
  std::size_t num_patches_ = 0;
  Conv stem1_, stem2_;
  LayerNorm<T> stem_norm1_, stem_norm2_;
  VolumeNorm norm_ = VolumeNorm::Sample;
  std::vector<ResidualBlock> blocks_;
  Parameter<T> pos_embed_;
  std::vector<EncoderLayer> layers_;
  Linear<T> projection_;
};

}  // namespace threemt
