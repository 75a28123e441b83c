#include "threemt/model.hpp"

#include <algorithm>
#include <cmath>

namespace threemt {

DropMask mdrop_sample(const std::vector<ModalitySpec>& specs, std::size_t batch_size, Rng& rng) {
  DropMask mask(batch_size, specs.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t s = 0; s < batch_size; ++s) {
    for (std::size_t m = 0; m < specs.size(); ++m) {
      // u in [0, 1): p = 0 never drops, p = 1 always drops.
      mask.set(s, m, !(unit(rng) < specs[m].p_mdrop));
    }
  }
  return mask;
}

template <typename T>
Prediction predictions_from_logits(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.cols() != 2) {
    throw ShapeError("predict: expected (b x 2) logits, got " + shape_str(logits.shape()));
  }
  Prediction out;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double a = static_cast<double>(logits(i, 0));
    const double b = static_cast<double>(logits(i, 1));
    const double mx = std::max(a, b);
    const double ea = std::exp(a - mx), eb = std::exp(b - mx);
    out.probabilities.push_back({ea / (ea + eb), eb / (ea + eb)});
    out.labels.push_back(b > a ? 1 : 0);
  }
  return out;
}

template <typename T>
typename ThreeMTModel<T>::Head ThreeMTModel<T>::make_head(const std::string& name, std::size_t d, Rng& rng) {
  Head h;
  h.hidden = Linear<T>(name + ".hidden", d, d, true, rng);
  h.out = Linear<T>(name + ".out", d, 2, true, rng);
  return h;
}

template <typename T>
Var<T> ThreeMTModel<T>::Head::forward(Tape<T>& tape, const Var<T>& x) const {
  return out.forward(tape, ops::leaky_relu(hidden.forward(tape, x)));
}

template <typename T>
void ThreeMTModel<T>::Head::collect(ParamRefs<T>& out_refs) {
  hidden.collect(out_refs);
  out.collect(out_refs);
}

template <typename T>
ThreeMTModel<T>::ThreeMTModel(std::vector<ModalitySpec> specs, const ModelConfig& config)
    : specs_(std::move(specs)), config_(config) {
  validate_specs(specs_);
  if (config_.heads == 0 || config_.d == 0 || config_.d % config_.heads != 0) {
    throw ConfigError("model dimension d=" + std::to_string(config_.d) + " is not divisible by h=" +
                      std::to_string(config_.heads));
  }
  Rng rng(config_.seed);
  const std::size_t d = config_.d;
  query_ = init_weight<T>("query", {1, d}, d, rng);
  for (const ModalitySpec& spec : specs_) {
    const std::string prefix = "modality." + spec.name;
    switch (spec.kind) {
      case ModalityKind::Categorical:
        embedders_.emplace_back(CategoricalEmbedder<T>(prefix + ".embed", spec.vocab_size, d, rng));
        break;
      case ModalityKind::Ordinal:
        embedders_.emplace_back(OrdinalEmbedder<T>(prefix + ".embed", d, rng));
        break;
      case ModalityKind::Image:
        embedders_.emplace_back(ImageEncoder<T>(prefix + ".embed", spec.volume_shape, d, config_.image, rng));
        break;
    }
    cmts_.emplace_back(prefix + ".cmt", d, config_.heads, config_.scale_full_dim, rng);
    aux_heads_.push_back(make_head(prefix + ".aux_head", d, rng));
  }
  final_head_ = make_head("final_head", d, rng);
}

template <typename T>
std::size_t ThreeMTModel<T>::modality_index(const std::string& name) const {
  for (std::size_t m = 0; m < specs_.size(); ++m) {
    if (specs_[m].name == name) return m;
  }
  throw InputError("unknown modality '" + name + "'");
}

template <typename T>
Var<T> ThreeMTModel<T>::embed_modality(Tape<T>& tape, std::size_t m, const ModalityColumn& column,
                                       std::span<const std::size_t> rows) const {
  const ModalitySpec& spec = specs_[m];
  switch (spec.kind) {
    case ModalityKind::Categorical: {
      std::vector<std::size_t> idx;
      for (std::size_t r : rows) idx.push_back(column.categories.at(r));
      return std::get<CategoricalEmbedder<T>>(embedders_[m]).embed(tape, idx);
    }
    case ModalityKind::Ordinal: {
      std::vector<double> vals;
      for (std::size_t r : rows) vals.push_back(column.values.at(r));
      return std::get<OrdinalEmbedder<T>>(embedders_[m]).embed(tape, vals);
    }
    case ModalityKind::Image: {
      const auto& [dd, hh, ww] = spec.volume_shape;
      const std::size_t vox = dd * hh * ww;
      Tensor<T> volumes({rows.size(), 1, dd, hh, ww});
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const VolumePtr& v = column.volumes.at(rows[i]);
        if (!v || v->numel() != vox || v->shape() != Shape{1, dd, hh, ww}) {
          throw InputError("modality '" + spec.name + "': volume for sample " + std::to_string(rows[i]) +
                           " is missing or does not match " + shape_str({1, dd, hh, ww}));
        }
        const float* src = v->raw();
        T* dst = volumes.raw() + i * vox;
        for (std::size_t j = 0; j < vox; ++j) dst[j] = static_cast<T>(src[j]);
      }
      return std::get<ImageEncoder<T>>(embedders_[m]).encode(tape, tape.constant(std::move(volumes)));
    }
  }
  throw ContractError("unreachable modality kind");
}

template <typename T>
typename ThreeMTModel<T>::Output ThreeMTModel<T>::forward(Tape<T>& tape, const ModalityBatch& batch,
                                                          const DropMask* drop,
                                                          const EmbeddingOverrides* overrides) const {
  const std::size_t b = batch.size;
  const std::size_t d = config_.d;
  if (b == 0) throw InputError("forward: empty batch");
  if (batch.columns.size() != specs_.size()) {
    throw InputError("forward: batch has " + std::to_string(batch.columns.size()) + " modality columns, model expects " +
                     std::to_string(specs_.size()));
  }
  if (drop && (drop->batch() != b || drop->modalities() != specs_.size())) {
    throw InputError("forward: drop mask shape does not match the batch");
  }
  for (std::size_t m = 0; m < specs_.size(); ++m) {
    if (batch.columns[m].available.size() != b) {
      throw InputError("forward: modality '" + specs_[m].name + "' covers " +
                       std::to_string(batch.columns[m].available.size()) + " samples, batch has " +
                       std::to_string(b));
    }
  }

  Var<T> q = ops::add_rows(tape.constant(Tensor<T>({b, d})), tape.parameter(query_));
  Output out;
  for (std::size_t m = 0; m < specs_.size(); ++m) {
    const ModalityColumn& column = batch.columns[m];
    Var<T> e;
    if (overrides && overrides->count(m)) {
      const Tensor<T>& forced = overrides->at(m);
      if (forced.shape() != Shape{b, d}) throw ShapeError("forward: embedding override must be (b x d)");
      e = tape.constant(forced);
    } else {
      std::vector<std::size_t> rows;
      for (std::size_t s = 0; s < b; ++s) {
        if (column.available[s] && (!drop || drop->kept(s, m))) rows.push_back(s);
      }
      if (rows.empty()) {
        e = tape.constant(Tensor<T>({b, d}));
      } else {
        e = ops::scatter_rows(embed_modality(tape, m, column, rows), rows, b);
      }
    }
    q = cmts_[m].forward(tape, q, e);
    out.aux_logits.push_back(aux_heads_[m].forward(tape, q));
  }
  out.final_logits = final_head_.forward(tape, q);
  return out;
}

template <typename T>
Prediction ThreeMTModel<T>::predict(const ModalityBatch& batch) const {
  Tape<T> tape(false);
  Output out = forward(tape, batch);
  return predictions_from_logits(out.final_logits.value());
}

template <typename T>
ParamRefs<T> ThreeMTModel<T>::parameters() {
  ParamRefs<T> out;
  out.push_back(&query_);
  for (std::size_t m = 0; m < specs_.size(); ++m) {
    std::visit([&](auto& e) { e.collect(out); }, embedders_[m]);
    cmts_[m].collect(out);
    aux_heads_[m].collect(out);
  }
  final_head_.collect(out);
  return out;
}

template <typename T>
ConstParamRefs<T> ThreeMTModel<T>::parameters() const {
  ParamRefs<T> refs = const_cast<ThreeMTModel*>(this)->parameters();
  return ConstParamRefs<T>(refs.begin(), refs.end());
}

template <typename T>
ParamRefs<T> ThreeMTModel<T>::embedder_parameters(std::size_t m) {
  ParamRefs<T> out;
  std::visit([&](auto& e) { e.collect(out); }, embedders_.at(m));
  return out;
}

template <typename T>
void ThreeMTModel<T>::zero_grad() {
  for (Parameter<T>* p : parameters()) p->zero_grad();
}

template Prediction predictions_from_logits(const Tensor<float>&);
template Prediction predictions_from_logits(const Tensor<double>&);
template class ThreeMTModel<float>;
template class ThreeMTModel<double>;

}  // namespace threemt
