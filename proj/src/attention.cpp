#include "threemt/attention.hpp"

namespace threemt {

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(const std::string& name, std::size_t d, std::size_t heads,
                                          bool scale_full_dim, Rng& rng)
    : d_(d), heads_(heads), scale_full_dim_(scale_full_dim) {
  if (heads == 0 || d == 0 || d % heads != 0) {
    throw ConfigError("attention dimension " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  for (std::size_t i = 0; i < heads; ++i) {
    const std::string suffix = "." + std::to_string(i);
    wq_.push_back(init_weight<T>(name + ".wq" + suffix, {d, dh}, d, rng));
    wk_.push_back(init_weight<T>(name + ".wk" + suffix, {d, dh}, d, rng));
    wv_.push_back(init_weight<T>(name + ".wv" + suffix, {d, dh}, d, rng));
  }
  wo_ = init_weight<T>(name + ".wo", {d, d}, d, rng);
}

template <typename T>
Var<T> MultiHeadAttention<T>::forward(Tape<T>& tape, const Var<T>& query, const Var<T>& key_src,
                                      const Var<T>& value_src, std::size_t groups) const {
  for (const Var<T>* v : {&query, &key_src, &value_src}) {
    if (v->value().rank() != 2 || v->value().cols() != d_) {
      throw ShapeError("multi_head: expected (n x " + std::to_string(d_) + ") inputs, got " +
                       shape_str(v->shape()));
    }
  }
  std::vector<Var<T>> heads;
  heads.reserve(heads_);
  for (std::size_t i = 0; i < heads_; ++i) {
    Var<T> q = ops::matmul(query, tape.parameter(wq_[i]));
    Var<T> k = ops::matmul(key_src, tape.parameter(wk_[i]));
    Var<T> v = ops::matmul(value_src, tape.parameter(wv_[i]));
    heads.push_back(ops::scaled_dot_attention(q, k, v, groups, scale_dim()));
  }
  Var<T> joined = heads_ == 1 ? heads.front() : ops::concat_cols<T>(heads);
  return ops::matmul(joined, tape.parameter(wo_));
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamRefs<T>& out) {
  for (std::size_t i = 0; i < heads_; ++i) {
    out.push_back(&wq_[i]);
    out.push_back(&wk_[i]);
    out.push_back(&wv_[i]);
  }
  out.push_back(&wo_);
}

template <typename T>
CmtBlock<T>::CmtBlock(const std::string& name, std::size_t d, std::size_t heads, bool scale_full_dim,
                      Rng& rng)
    : norm1_(name + ".norm1", d),
      norm2_(name + ".norm2", d),
      self_attn_(name + ".self_attn", d, heads, scale_full_dim, rng),
      cross_attn_(name + ".cross_attn", d, heads, scale_full_dim, rng) {}

template <typename T>
Var<T> CmtBlock<T>::forward(Tape<T>& tape, const Var<T>& query, const Var<T>& embedding) const {
  if (query.shape() != embedding.shape()) {
    throw ShapeError("cmt_forward: query " + shape_str(query.shape()) + " and embedding " +
                     shape_str(embedding.shape()) + " differ");
  }
  const std::size_t batch = query.value().rows();
  Var<T> normed = norm1_.forward(tape, query);
  Var<T> x1 = ops::add(query, self_attn_.forward(tape, normed, normed, normed, batch));
  Var<T> injected = cross_attn_.forward(tape, norm2_.forward(tape, x1), embedding, embedding, batch);
  return ops::add(x1, injected);
}

template <typename T>
void CmtBlock<T>::collect(ParamRefs<T>& out) {
  norm1_.collect(out);
  self_attn_.collect(out);
  norm2_.collect(out);
  cross_attn_.collect(out);
}

template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class CmtBlock<float>;
template class CmtBlock<double>;

}  // namespace threemt
