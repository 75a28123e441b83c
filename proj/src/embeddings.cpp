#include "threemt/embeddings.hpp"

#include <cmath>

namespace threemt {

template <typename T>
CategoricalEmbedder<T>::CategoricalEmbedder(const std::string& name, std::size_t vocab_size,
                                            std::size_t d, Rng& rng)
    : table_(init_weight<T>(name + ".table", {vocab_size, d}, 1, rng)) {}

template <typename T>
Var<T> CategoricalEmbedder<T>::embed(Tape<T>& tape, std::span<const std::size_t> indices) const {
  return ops::gather_rows(tape.parameter(table_), indices);
}

template <typename T>
OrdinalEmbedder<T>::OrdinalEmbedder(const std::string& name, std::size_t d, Rng& rng)
    : weight_(init_weight<T>(name + ".weight", {1, d}, 1, rng)),
      bias_(init_weight<T>(name + ".bias", {d}, 1, rng)) {}

template <typename T>
void OrdinalEmbedder<T>::fit(std::span<const double> values) {
  if (values.empty()) throw InputError("ordinal feature has no observed training values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  const double sd = std::sqrt(var);
  if (!(sd > 0.0) || !std::isfinite(sd)) throw InputError("ordinal feature is constant over the training set");
  set_normalization(mean, sd);
}

template <typename T>
void OrdinalEmbedder<T>::set_normalization(double mean, double std) {
  if (!(std > 0.0) || !std::isfinite(std) || !std::isfinite(mean)) {
    throw InputError("ordinal normalization needs finite mean and std > 0");
  }
  mean_ = mean;
  std_ = std;
  fitted_ = true;
}

template <typename T>
Var<T> OrdinalEmbedder<T>::embed(Tape<T>& tape, std::span<const double> values) const {
  if (!fitted_) throw StateError("ordinal embedder used before its normalization was fitted");
  Tensor<T> z({values.size(), 1});
  for (std::size_t i = 0; i < values.size(); ++i) z[i] = static_cast<T>((values[i] - mean_) / std_);
  Var<T> scaled = ops::matmul(tape.constant(std::move(z)), tape.parameter(weight_));
  return ops::add_rows(scaled, tape.parameter(bias_));
}

std::size_t image_patch_count(const std::array<std::size_t, 3>& volume_shape) {
  std::size_t n = 1;
  for (std::size_t extent : volume_shape) n *= (extent + 15) / 16;
  return n;
}

std::string to_string(VolumeNorm norm) { return norm == VolumeNorm::Sample ? "sample" : "voxel"; }

VolumeNorm volume_norm_from_string(const std::string& text) {
  if (text == "sample") return VolumeNorm::Sample;
  if (text == "voxel") return VolumeNorm::Voxel;
  throw ConfigError("unknown volume norm '" + text + "' (accepted: sample, voxel)");
}

template <typename T>
typename ImageEncoder<T>::Conv ImageEncoder<T>::make_conv(const std::string& name, std::size_t c_in,
                                                          std::size_t c_out, std::size_t k,
                                                          std::size_t stride, Rng& rng) {
  Conv conv;
  conv.kernel = init_weight<T>(name + ".kernel", {c_out, c_in, k, k, k}, c_in * k * k * k, rng);
  conv.bias = Parameter<T>(name + ".bias", Tensor<T>({c_out}));
  conv.stride = stride;
  return conv;
}

template <typename T>
Var<T> ImageEncoder<T>::Conv::forward(Tape<T>& tape, const Var<T>& x) const {
  return ops::conv3d(x, tape.parameter(kernel), tape.parameter(bias), stride);
}

template <typename T>
ImageEncoder<T>::ImageEncoder(const std::string& name, std::array<std::size_t, 3> volume_shape,
                              std::size_t d, const ImageEncoderConfig& cfg, Rng& rng)
    : volume_shape_(volume_shape), num_patches_(image_patch_count(volume_shape)), norm_(cfg.norm) {
  for (std::size_t extent : volume_shape) {
    if (extent < 16) {
      throw ShapeError("image volumes need every extent >= 16 for the 16x reduction, got " +
                       std::to_string(extent));
    }
  }
  const std::size_t c0 = cfg.stem_channels;
  stem1_ = make_conv(name + ".stem1", 1, c0, 3, 1, rng);
  stem_norm1_ = LayerNorm<T>(name + ".stem_norm1", c0);
  stem2_ = make_conv(name + ".stem2", c0, c0, 3, 1, rng);
  stem_norm2_ = LayerNorm<T>(name + ".stem_norm2", c0);

  std::size_t c_in = c0;
  for (std::size_t i = 0; i < cfg.block_channels.size(); ++i) {
    const std::size_t c_out = cfg.block_channels[i];
    const std::string bname = name + ".block" + std::to_string(i);
    ResidualBlock block;
    block.down = make_conv(bname + ".down", c_in, c_out, 3, 2, rng);
    block.norm_down = LayerNorm<T>(bname + ".norm_down", c_out);
    block.conv = make_conv(bname + ".conv", c_out, c_out, 3, 1, rng);
    block.norm_conv = LayerNorm<T>(bname + ".norm_conv", c_out);
    block.shortcut = make_conv(bname + ".shortcut", c_in, c_out, 1, 2, rng);
    blocks_.push_back(std::move(block));
    c_in = c_out;
  }

  const std::size_t width = c_in;
  if (cfg.encoder_heads == 0 || width % cfg.encoder_heads != 0) {
    throw ConfigError("image encoder width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(cfg.encoder_heads) + " heads");
  }
  pos_embed_ = init_weight<T>(name + ".pos_embed", {num_patches_, width}, width, rng);
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string lname = name + ".encoder" + std::to_string(l);
    EncoderLayer layer;
    layer.norm_attn = LayerNorm<T>(lname + ".norm_attn", width);
    layer.attn = MultiHeadAttention<T>(lname + ".attn", width, cfg.encoder_heads, false, rng);
    layer.norm_ff = LayerNorm<T>(lname + ".norm_ff", width);
    layer.ff_in = Linear<T>(lname + ".ff_in", width, 2 * width, true, rng);
    layer.ff_out = Linear<T>(lname + ".ff_out", 2 * width, width, true, rng);
    layers_.push_back(std::move(layer));
  }
  projection_ = Linear<T>(name + ".projection", width, d, true, rng);
}

template <typename T>
Var<T> ImageEncoder<T>::encode(Tape<T>& tape, const Var<T>& volumes) const {
  const Shape& s = volumes.shape();
  if (s.size() != 5 || s[1] != 1 || s[2] != volume_shape_[0] || s[3] != volume_shape_[1] ||
      s[4] != volume_shape_[2]) {
    throw ShapeError("encode_image: expected (b x 1 x " + std::to_string(volume_shape_[0]) + " x " +
                     std::to_string(volume_shape_[1]) + " x " + std::to_string(volume_shape_[2]) +
                     "), got " + shape_str(s));
  }
  const std::size_t batch = s[0];
  auto norm = [&](const LayerNorm<T>& ln, const Var<T>& v) {
    return norm_ == VolumeNorm::Sample ? ln.forward_sample(tape, v) : ln.forward_channels(tape, v);
  };
  Var<T> x = ops::leaky_relu(norm(stem_norm1_, stem1_.forward(tape, volumes)));
  x = ops::leaky_relu(norm(stem_norm2_, stem2_.forward(tape, x)));
  for (const ResidualBlock& block : blocks_) {
    Var<T> main = ops::leaky_relu(norm(block.norm_down, block.down.forward(tape, x)));
    main = norm(block.norm_conv, block.conv.forward(tape, main));
    x = ops::leaky_relu(ops::add(main, block.shortcut.forward(tape, x)));
  }
  Var<T> tokens = ops::add_rows(ops::volume_to_tokens(x), tape.parameter(pos_embed_));
  for (const EncoderLayer& layer : layers_) {
    Var<T> normed = layer.norm_attn.forward(tape, tokens);
    tokens = ops::add(tokens, layer.attn.forward(tape, normed, normed, normed, batch));
    Var<T> hidden = ops::relu(layer.ff_in.forward(tape, layer.norm_ff.forward(tape, tokens)));
    tokens = ops::add(tokens, layer.ff_out.forward(tape, hidden));
  }
  return projection_.forward(tape, ops::mean_groups(tokens, batch));
}

template <typename T>
void ImageEncoder<T>::collect(ParamRefs<T>& out) {
  auto conv = [&](Conv& c) {
    out.push_back(&c.kernel);
    out.push_back(&c.bias);
  };
  conv(stem1_);
  stem_norm1_.collect(out);
  conv(stem2_);
  stem_norm2_.collect(out);
  for (ResidualBlock& block : blocks_) {
    conv(block.down);
    block.norm_down.collect(out);
    conv(block.conv);
    block.norm_conv.collect(out);
    conv(block.shortcut);
  }
  out.push_back(&pos_embed_);
  for (EncoderLayer& layer : layers_) {
    layer.norm_attn.collect(out);
    layer.attn.collect(out);
    layer.norm_ff.collect(out);
    layer.ff_in.collect(out);
    layer.ff_out.collect(out);
  }
  projection_.collect(out);
}

template class CategoricalEmbedder<float>;
template class CategoricalEmbedder<double>;
template class OrdinalEmbedder<float>;
template class OrdinalEmbedder<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;

}  // namespace threemt
