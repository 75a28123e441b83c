#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "threemt/tape.hpp"

namespace threemt::ops {

enum class Activation { LeakyRelu, Relu };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kLayerNormEps = 1e-5;

// Elementwise sum of equally shaped tensors.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

// x (n x d) plus rows (m x d) tiled down the rows of x; n must be a multiple of m.
// Covers bias vectors (m = 1) and per-sample positional tables.
template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& rows);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

// Softmax over the last axis, max-subtracted. Non-finite inputs raise NumericError.
template <typename T>
Var<T> softmax_lastaxis(const Var<T>& x);

// Row-wise layer normalization of an (n x d) matrix with per-column gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(kLayerNormEps));

// Layer normalization across channels at every voxel of a (b x c x D x H x W) volume.
template <typename T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    T eps = T(kLayerNormEps));

// Layer normalization over all channels and voxels of each sample of a
// (b x c x D x H x W) volume, with a per-channel affine.
template <typename T>
Var<T> sample_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   T eps = T(kLayerNormEps));

// 3-D convolution with cubic kernels (c_out x c_in x k x k x k), k odd, symmetric
// padding k/2. Output spatial extent is ceil(in / stride) for k in {1, 3}.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride);

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind);

template <typename T>
Var<T> leaky_relu(const Var<T>& x) {
  return activation(x, Activation::LeakyRelu);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return activation(x, Activation::Relu);
}

// Mean over the batch of -log softmax(logits)[label]; labels index columns.
template <typename T>
Var<T> cross_entropy_logits(const Var<T>& logits, std::span<const int> labels);

// softmax(Q K^T / sqrt(scale_dim)) V, computed independently inside each of
// `groups` equal row blocks of Q and of K/V (one block per sample). When
// weights_out is given it receives the (rows(Q) x keys-per-group) weights.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t groups,
                            std::size_t scale_dim, Tensor<T>* weights_out = nullptr);

// Column-wise concatenation of matrices with equal row counts.
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);

// (groups*p x c) -> (groups x c): mean of each consecutive block of p rows.
template <typename T>
Var<T> mean_groups(const Var<T>& x, std::size_t groups);

// (b x c x D x H x W) -> (b*D*H*W x c), one token per voxel in raster order.
template <typename T>
Var<T> volume_to_tokens(const Var<T>& x);

// Rows of table selected by index (embedding lookup).
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> indices);

// (k x d) -> (n x d): row i of src lands at row rows[i]; every other row is exactly zero.
template <typename T>
Var<T> scatter_rows(const Var<T>& src, std::span<const std::size_t> rows, std::size_t n);

template <typename T>
Var<T> sum(const Var<T>& x);

// Scalar sum_i weights_i * x_i (a fixed linear functional).
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

}  // namespace threemt::ops
