#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "threemt/layers.hpp"

namespace threemt {

// Bias-free multi-head attention with separate per-head projections
// W_i^Q, W_i^K, W_i^V (d x d/h) and an output projection W^O (d x d).
//
// Rows of the query and key/value sources are split into `groups` equal
// blocks; attention never crosses blocks, so a batch of independent samples
// can run through one call.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  // scale_full_dim: divide scores by sqrt(d) instead of sqrt(d/h).
  MultiHeadAttention(const std::string& name, std::size_t d, std::size_t heads, bool scale_full_dim,
                     Rng& rng);

  Var<T> forward(Tape<T>& tape, const Var<T>& query, const Var<T>& key_src, const Var<T>& value_src,
                 std::size_t groups) const;

  std::size_t dim() const noexcept { return d_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t head_dim() const noexcept { return d_ / heads_; }
  std::size_t scale_dim() const noexcept { return scale_full_dim_ ? d_ : d_ / heads_; }

  Parameter<T>& w_query(std::size_t head) { return wq_.at(head); }
  Parameter<T>& w_key(std::size_t head) { return wk_.at(head); }
  Parameter<T>& w_value(std::size_t head) { return wv_.at(head); }
  Parameter<T>& w_out() { return wo_; }

  void collect(ParamRefs<T>& out);

 private:
  std::size_t d_ = 0;
  std::size_t heads_ = 1;
  bool scale_full_dim_ = false;
  std::vector<Parameter<T>> wq_, wk_, wv_;
  Parameter<T> wo_;
};

// One cascaded modality transformer: pre-norm self-attention over the running
// query followed by pre-norm cross-attention into a modality embedding, each
// wrapped in a residual connection. No feed-forward sublayer.
template <typename T>
class CmtBlock {
 public:
  CmtBlock() = default;
  CmtBlock(const std::string& name, std::size_t d, std::size_t heads, bool scale_full_dim, Rng& rng);

  // query, embedding: (b x d). Returns the refined (b x d) query.
  Var<T> forward(Tape<T>& tape, const Var<T>& query, const Var<T>& embedding) const;

  LayerNorm<T>& norm1() { return norm1_; }
  LayerNorm<T>& norm2() { return norm2_; }
  MultiHeadAttention<T>& self_attn() { return self_attn_; }
  MultiHeadAttention<T>& cross_attn() { return cross_attn_; }

  void collect(ParamRefs<T>& out);

 private:
  LayerNorm<T> norm1_, norm2_;
  MultiHeadAttention<T> self_attn_, cross_attn_;
};

}  // namespace threemt
