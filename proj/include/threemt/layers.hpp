#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "threemt/ops.hpp"

namespace threemt {

using Rng = std::mt19937_64;

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
using ConstParamRefs = std::vector<const Parameter<T>*>;

// Uniform(-bound, bound) entries drawn in storage order. Draws happen in double
// so float and double models built from one seed start from the same values.
template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

// Weight init used throughout: Uniform(+-sqrt(1/fan_in)).
template <typename T>
Parameter<T> init_weight(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  return Parameter<T>(std::move(name),
                      uniform_tensor<T>(std::move(shape), std::sqrt(1.0 / static_cast<double>(fan_in)), rng));
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias, Rng& rng)
      : weight_(init_weight<T>(name + ".weight", {in, out}, in, rng)), has_bias_(with_bias) {
    if (with_bias) bias_ = Parameter<T>(name + ".bias", Tensor<T>({out}));
  }

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
    Var<T> y = ops::matmul(x, tape.parameter(weight_));
    return has_bias_ ? ops::add_rows(y, tape.parameter(bias_)) : y;
  }

  std::size_t in_features() const { return weight_.value.rows(); }
  std::size_t out_features() const { return weight_.value.cols(); }
  bool has_bias() const { return has_bias_; }
  Parameter<T>& weight() { return weight_; }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  bool has_bias_ = false;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t width)
      : gamma_(name + ".gamma", Tensor<T>({width}, T(1))), beta_(name + ".beta", Tensor<T>({width})) {}

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
    return ops::layer_norm(x, tape.parameter(gamma_), tape.parameter(beta_));
  }

  // Per-voxel normalization across the channels of a (b x c x D x H x W) volume.
  Var<T> forward_channels(Tape<T>& tape, const Var<T>& x) const {
    return ops::channel_norm(x, tape.parameter(gamma_), tape.parameter(beta_));
  }

  // Normalization over all channels and voxels of each sample.
  Var<T> forward_sample(Tape<T>& tape, const Var<T>& x) const {
    return ops::sample_norm(x, tape.parameter(gamma_), tape.parameter(beta_));
  }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
};

}  // namespace threemt
