#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "threemt/attention.hpp"
#include "threemt/embeddings.hpp"
#include "threemt/modality.hpp"

namespace threemt {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  // Divide attention scores by sqrt(d) rather than sqrt(d / heads).
  bool scale_full_dim = false;
  ImageEncoderConfig image;
  std::uint64_t seed = 0;
};

// Per-sample, per-modality keep flags produced by modality dropout.
class DropMask {
 public:
  DropMask() = default;
  DropMask(std::size_t batch, std::size_t modalities, bool keep_all = true)
      : batch_(batch), modalities_(modalities), keep_(batch * modalities, keep_all ? 1 : 0) {}

  bool kept(std::size_t sample, std::size_t modality) const { return keep_.at(sample * modalities_ + modality) != 0; }
  void set(std::size_t sample, std::size_t modality, bool keep) {
    keep_.at(sample * modalities_ + modality) = keep ? 1 : 0;
  }
  std::size_t batch() const noexcept { return batch_; }
  std::size_t modalities() const noexcept { return modalities_; }

 private:
  std::size_t batch_ = 0;
  std::size_t modalities_ = 0;
  std::vector<std::uint8_t> keep_;
};

// Independent Bernoulli(p_mdrop) drop decision per sample and modality.
DropMask mdrop_sample(const std::vector<ModalitySpec>& specs, std::size_t batch_size, Rng& rng);

struct Prediction {
  std::vector<std::array<double, 2>> probabilities;
  std::vector<int> labels;  // argmax, ties -> 0
};

// Softmax over two logits per row and argmax labels with ties toward 0.
template <typename T>
Prediction predictions_from_logits(const Tensor<T>& logits);

// Learned query refined by one cascaded modality transformer per modality,
// with a two-layer classifier after every block (auxiliary) and at the end.
template <typename T>
class ThreeMTModel {
 public:
  using Embedder = std::variant<CategoricalEmbedder<T>, OrdinalEmbedder<T>, ImageEncoder<T>>;

  struct Output {
    Var<T> final_logits;
    std::vector<Var<T>> aux_logits;  // one per modality, in cascade order
  };

  // Replaces the embedding matrix (b x d) of the keyed modality indices.
  using EmbeddingOverrides = std::map<std::size_t, Tensor<T>>;

  ThreeMTModel() = default;
  ThreeMTModel(std::vector<ModalitySpec> specs, const ModelConfig& config);

  // Eval mode when drop is null; otherwise a modality is injected for a sample
  // only if it is available and kept by the mask.
  Output forward(Tape<T>& tape, const ModalityBatch& batch, const DropMask* drop = nullptr,
                 const EmbeddingOverrides* overrides = nullptr) const;

  // Eval-mode class probabilities; auxiliary heads are not used.
  Prediction predict(const ModalityBatch& batch) const;

  const std::vector<ModalitySpec>& specs() const noexcept { return specs_; }
  const ModelConfig& config() const noexcept { return config_; }
  std::size_t modality_index(const std::string& name) const;

  Embedder& embedder(std::size_t m) { return embedders_.at(m); }
  const Embedder& embedder(std::size_t m) const { return embedders_.at(m); }
  CmtBlock<T>& cmt(std::size_t m) { return cmts_.at(m); }
  Parameter<T>& query() { return query_; }

  // Every trainable parameter in a fixed order with unique names.
  ParamRefs<T> parameters();
  ConstParamRefs<T> parameters() const;
  // Parameters owned by one modality's embedder.
  ParamRefs<T> embedder_parameters(std::size_t m);
  void zero_grad();

 private:
  struct Head {
    Linear<T> hidden;
    Linear<T> out;
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
    void collect(ParamRefs<T>& out_refs);
  };

  static Head make_head(const std::string& name, std::size_t d, Rng& rng);
  Var<T> embed_modality(Tape<T>& tape, std::size_t m, const ModalityColumn& column,
                        std::span<const std::size_t> rows) const;

  std::vector<ModalitySpec> specs_;
  ModelConfig config_;
  Parameter<T> query_;
  std::vector<Embedder> embedders_;
  std::vector<CmtBlock<T>> cmts_;
  std::vector<Head> aux_heads_;
  Head final_head_;
};

}  // namespace threemt
