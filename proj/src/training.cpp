#include "threemt/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace threemt {

template <typename T>
AdamState<T>::AdamState(const AdamConfig& config, const ParamRefs<T>& params) : config_(config) {
  for (const Parameter<T>* p : params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void AdamState<T>::step(const ParamRefs<T>& params) {
  if (params.size() != m_.size()) {
    throw StateError("adam_step: optimizer tracks " + std::to_string(m_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.shape() != m_[i].shape() || params[i]->grad.shape() != m_[i].shape()) {
      throw StateError("adam_step: shape mismatch for parameter '" + params[i]->name + "'");
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T lr = static_cast<T>(config_.lr), eps = static_cast<T>(config_.eps);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* __restrict w = params[i]->value.raw();
    const T* __restrict g = params[i]->grad.raw();
    T* __restrict m = m_[i].raw();
    T* __restrict v = v_[i].raw();
    for (std::size_t j = 0; j < m_[i].numel(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] * inv_bc1;
      const T vhat = v[j] * inv_bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("train.noise_sigma must be >= 0");
  if (!(c.flip_prob >= 0.0 && c.flip_prob <= 1.0)) throw ConfigError("train.flip_prob must lie in [0, 1]");
  if (c.flip_axis > 2) throw ConfigError("train.flip_axis must be 0, 1 or 2");
  if (!(c.aux_loss_weight >= 0.0)) throw ConfigError("train.aux_loss_weight must be >= 0");
  if (!(c.adam.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  for (const auto& [name, p] : c.p_mdrop) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p_mdrop for '" + name + "' must lie in [0, 1]");
  }
}

template <typename T>
TotalLoss<T> compute_total_loss(const Var<T>& final_logits, std::span<const Var<T>> aux_logits,
                                std::span<const int> labels, double aux_loss_weight) {
  TotalLoss<T> out;
  out.total = ops::cross_entropy_logits(final_logits, labels);
  out.final_loss = static_cast<double>(out.total.value()[0]);
  for (const Var<T>& aux : aux_logits) {
    Var<T> ce = ops::cross_entropy_logits(aux, labels);
    out.aux_losses.push_back(static_cast<double>(ce.value()[0]));
    if (aux_loss_weight != 0.0) {
      out.total = ops::add(out.total, aux_loss_weight == 1.0 ? ce : ops::scale(ce, static_cast<T>(aux_loss_weight)));
    }
  }
  return out;
}

Tensor<float> flip_volume(const Tensor<float>& volume, std::size_t axis) {
  const Shape& s = volume.shape();
  if (s.size() != 4 || s[0] != 1) throw ShapeError("flip_volume: expected (1 x D x H x W), got " + shape_str(s));
  if (axis > 2) throw InputError("flip_volume: axis must be 0, 1 or 2");
  const std::size_t d = s[1], h = s[2], w = s[3];
  Tensor<float> out(s);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sz = axis == 0 ? d - 1 - z : z;
        const std::size_t sy = axis == 1 ? h - 1 - y : y;
        const std::size_t sx = axis == 2 ? w - 1 - x : x;
        out[(z * h + y) * w + x] = volume[(sz * h + sy) * w + sx];
      }
  return out;
}

ModalityBatch augment(const ModalityBatch& batch, const TrainConfig& config, Rng& rng) {
  ModalityBatch out = batch;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, config.noise_sigma > 0.0 ? config.noise_sigma : 1.0);
  for (ModalityColumn& col : out.columns) {
    for (std::size_t s = 0; s < col.volumes.size(); ++s) {
      if (!col.available[s] || !col.volumes[s]) continue;
      const bool flip = unit(rng) < config.flip_prob;
      if (!flip && config.noise_sigma == 0.0) continue;
      Tensor<float> vol = flip ? flip_volume(*col.volumes[s], config.flip_axis) : *col.volumes[s];
      if (config.noise_sigma > 0.0) {
        for (float& v : vol.storage()) v += static_cast<float>(noise(rng));
      }
      col.volumes[s] = std::make_shared<const Tensor<float>>(std::move(vol));
    }
  }
  return out;
}

template <typename T>
EvalReport evaluate(const ThreeMTModel<T>& model, const Dataset& data, const std::set<std::string>& force_missing,
                    std::size_t chunk) {
  EvalReport report;
  report.n = data.size();
  if (data.size() == 0) return report;
  std::vector<int> labels;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t stop = std::min(data.size(), start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    ModalityBatch batch = make_batch(data, idx, model.specs(), force_missing);
    Prediction pred = model.predict(batch);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      report.scores.push_back(pred.probabilities[i][1]);
      report.predicted.push_back(pred.labels[i]);
      labels.push_back(batch.labels[i]);
    }
  }
  std::vector<double> hard(report.predicted.begin(), report.predicted.end());
  report.counts = confusion(hard, labels, 0.5);
  report.metrics = binary_metrics(report.counts);
  report.auc = auc(report.scores, labels);
  return report;
}

template <typename T>
void fit_normalization(ThreeMTModel<T>& model, const Dataset& train) {
  for (std::size_t m = 0; m < model.specs().size(); ++m) {
    auto* ord = std::get_if<OrdinalEmbedder<T>>(&model.embedder(m));
    if (!ord || ord->fitted()) continue;
    std::vector<double> values;
    for (const SampleRecord& r : train.records) {
      if (auto v = r.clinical_value(model.specs()[m].name)) values.push_back(*v);
    }
    try {
      ord->fit(values);
    } catch (const InputError& e) {
      throw InputError("ordinal modality '" + model.specs()[m].name + "': " + e.what());
    }
  }
}

template <typename T>
FitResult<T> fit(ThreeMTModel<T> model, const Dataset& train, const Dataset& val, const TrainConfig& config) {
  validate(config);
  if (train.size() == 0) throw InputError("fit: empty training set");
  fit_normalization(model, train);

  std::vector<ModalitySpec> drop_specs = model.specs();
  for (const auto& [name, p] : config.p_mdrop) drop_specs.at(model.modality_index(name)).p_mdrop = p;

  Rng shuffle_rng(config.seed);
  Rng augment_rng(config.seed ^ 0xa5a5a5a5a5a5a5a5ULL);
  Rng drop_rng(config.seed ^ 0x5a5a5a5a5a5a5a5aULL);

  ParamRefs<T> params = model.parameters();
  AdamState<T> adam(config.adam, params);
  model.zero_grad();

  FitResult<T> result{model, {}, 0, kUndefinedMetric};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossReport rep;
    rep.epoch = epoch;
    rep.loss_aux.assign(model.specs().size(), 0.0);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      ModalityBatch batch = augment(make_batch(train, idx, model.specs()), config, augment_rng);
      DropMask mask = mdrop_sample(drop_specs, batch.size, drop_rng);

      Tape<T> tape;
      auto out = model.forward(tape, batch, &mask);
      TotalLoss<T> loss = compute_total_loss<T>(out.final_logits, out.aux_logits, batch.labels, config.aux_loss_weight);
      tape.backward(loss.total);
      adam.step(params);
      model.zero_grad();

      const double w = static_cast<double>(batch.size);
      rep.loss_total += w * static_cast<double>(loss.total.value()[0]);
      rep.loss_final += w * loss.final_loss;
      for (std::size_t m = 0; m < loss.aux_losses.size(); ++m) rep.loss_aux[m] += w * loss.aux_losses[m];
    }
    const double n = static_cast<double>(train.size());
    rep.loss_total /= n;
    rep.loss_final /= n;
    for (double& a : rep.loss_aux) a /= n;
    if (val.size() > 0) rep.validation = evaluate(model, val);

    const double score = rep.validation.auc;
    const bool better = result.best_epoch == 0 || (!std::isnan(score) && (std::isnan(result.best_val_auc) || score > result.best_val_auc));
    if (better) {
      result.model = model;
      result.best_epoch = epoch;
      result.best_val_auc = score;
    }
    result.reports.push_back(std::move(rep));
  }
  return result;
}

template class AdamState<float>;
template class AdamState<double>;
template TotalLoss<float> compute_total_loss(const Var<float>&, std::span<const Var<float>>, std::span<const int>, double);
template TotalLoss<double> compute_total_loss(const Var<double>&, std::span<const Var<double>>, std::span<const int>, double);
template EvalReport evaluate(const ThreeMTModel<float>&, const Dataset&, const std::set<std::string>&, std::size_t);
template EvalReport evaluate(const ThreeMTModel<double>&, const Dataset&, const std::set<std::string>&, std::size_t);
template void fit_normalization(ThreeMTModel<float>&, const Dataset&);
template void fit_normalization(ThreeMTModel<double>&, const Dataset&);
template FitResult<float> fit(ThreeMTModel<float>, const Dataset&, const Dataset&, const TrainConfig&);
template FitResult<double> fit(ThreeMTModel<double>, const Dataset&, const Dataset&, const TrainConfig&);

}  // namespace threemt
