#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "threemt/data.hpp"
#include "threemt/metrics.hpp"
#include "threemt/model.hpp"

namespace threemt {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates for a fixed list of parameters.
template <typename T>
class AdamState {
 public:
  AdamState() = default;
  AdamState(const AdamConfig& config, const ParamRefs<T>& params);

  // One bias-corrected update from each parameter's accumulated grad.
  void step(const ParamRefs<T>& params);

  std::uint64_t t() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig config_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

template <typename T>
void adam_step(AdamState<T>& state, const ParamRefs<T>& params) {
  state.step(params);
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  AdamConfig adam;
  double aux_loss_weight = 1.0;
  // p_mdrop per modality name; modalities not listed keep their spec value.
  std::map<std::string, double> p_mdrop;
  // Volume axis (0 = D, 1 = H, 2 = W) mirrored by the flip augmentation.
  std::size_t flip_axis = 2;
  double flip_prob = 0.5;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& config);

template <typename T>
struct TotalLoss {
  Var<T> total;
  double final_loss = 0.0;
  std::vector<double> aux_losses;
};

// CE(final) + aux_loss_weight * sum_m CE(aux_m). A zero weight leaves the
// auxiliary terms out of the graph entirely.
template <typename T>
TotalLoss<T> compute_total_loss(const Var<T>& final_logits, std::span<const Var<T>> aux_logits,
                                std::span<const int> labels, double aux_loss_weight);

// Mirrors a (1 x D x H x W) volume along axis 0, 1 or 2.
Tensor<float> flip_volume(const Tensor<float>& volume, std::size_t axis);

// Per available volume: mirror along flip_axis with probability flip_prob,
// then add N(0, noise_sigma^2) noise. Non-image columns are copied unchanged.
ModalityBatch augment(const ModalityBatch& batch, const TrainConfig& config, Rng& rng);

struct EvalReport {
  std::size_t n = 0;
  ConfusionCounts counts;
  BinaryMetrics metrics;
  double auc = kUndefinedMetric;
  std::vector<double> scores;  // P(label 1)
  std::vector<int> predicted;
};

// Eval-mode forward over the whole dataset with the named modalities forced
// unavailable. Shared by validation during fit and the eval command.
template <typename T>
EvalReport evaluate(const ThreeMTModel<T>& model, const Dataset& data,
                    const std::set<std::string>& force_missing = {}, std::size_t chunk = 32);

struct LossReport {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  double loss_final = 0.0;
  std::vector<double> loss_aux;
  EvalReport validation;
};

template <typename T>
struct FitResult {
  ThreeMTModel<T> model;  // parameters from the best validation epoch
  std::vector<LossReport> reports;
  std::size_t best_epoch = 0;  // 0 = initial parameters (no epochs run)
  double best_val_auc = kUndefinedMetric;
};

// Fits every unfitted ordinal embedder's normalization on `train`.
template <typename T>
void fit_normalization(ThreeMTModel<T>& model, const Dataset& train);

// Seeded shuffled mini-batches; per batch: augment, modality dropout, forward,
// total loss, backward, Adam. After each epoch the validation AUC decides the
// kept parameters (strictly greater wins, so ties keep the earlier epoch).
template <typename T>
FitResult<T> fit(ThreeMTModel<T> model, const Dataset& train, const Dataset& val, const TrainConfig& config);

}  // namespace threemt
