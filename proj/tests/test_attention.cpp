#include <doctest.h>

#include <algorithm>

#include "test_util.hpp"
#include "threemt/attention.hpp"

using namespace threemt;
using testutil::mat;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

std::vector<double> norm_row(const std::vector<double>& x, const Tensor<double>& g, const Tensor<double>& b) {
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return out;
}

// Plain loops: one query row attending over a key/value set.
std::vector<double> mha_oracle(MultiHeadAttention<double>& mha, const std::vector<double>& q, const Mat& kv) {
  const std::size_t h = mha.heads(), dh = mha.head_dim();
  std::vector<double> concat;
  for (std::size_t i = 0; i < h; ++i) {
    Mat qp = mul({q}, to_mat(mha.w_query(i).value));
    Mat kp = mul(kv, to_mat(mha.w_key(i).value));
    Mat vp = mul(kv, to_mat(mha.w_value(i).value));
    std::vector<double> s(kv.size());
    for (std::size_t j = 0; j < kv.size(); ++j) {
      for (std::size_t c = 0; c < dh; ++c) s[j] += qp[0][c] * kp[j][c];
      s[j] /= std::sqrt(double(mha.scale_dim()));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (double& v : s) z += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < dh; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < kv.size(); ++j) acc += s[j] / z * vp[j][c];
      concat.push_back(acc);
    }
  }
  return mul({concat}, to_mat(mha.w_out().value))[0];
}

}  // namespace

TEST_CASE("scaled dot attention examples") {
  Tape<double> tape;
  Tensor<double> w;
  auto out = ops::scaled_dot_attention(tape.constant(mat(1, 2, {1, 0})), tape.constant(mat(2, 2, {1, 0, 0, 1})),
                                       tape.constant(mat(2, 2, {1, 0, 0, 1})), 1, 2, &w);
  // softmax([1/sqrt(2), 0]) evaluated in Python: 0.6697615493, 0.3302384507
  CHECK(w[0] == doctest::Approx(0.6697615493).epsilon(1e-9));
  CHECK(w[1] == doctest::Approx(0.3302384507).epsilon(1e-9));
  CHECK(out.value()[0] == doctest::Approx(0.6697615493).epsilon(1e-9));
  CHECK(out.value()[1] == doctest::Approx(0.3302384507).epsilon(1e-9));

  auto single = ops::scaled_dot_attention(tape.constant(mat(3, 2, {5, -1, 0, 2, 7, 7})), tape.constant(mat(1, 2, {3, 1})),
                                          tape.constant(mat(1, 2, {0.25, -4})), 1, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(single.value()(r, 0) == 0.25);
    CHECK(single.value()(r, 1) == -4.0);
  }

  auto twin = ops::scaled_dot_attention(tape.constant(mat(1, 2, {0.3, 0.9})), tape.constant(mat(2, 2, {1, 2, 1, 2})),
                                        tape.constant(mat(2, 2, {1, 3, 5, 7})), 1, 2);
  CHECK(twin.value()[0] == doctest::Approx(3.0));
  CHECK(twin.value()[1] == doctest::Approx(5.0));

  CHECK_THROWS_AS(ops::scaled_dot_attention(tape.constant(mat(2, 2, {1, 2, 3, 4})), tape.constant(mat(1, 2, {1, 2})),
                                            tape.constant(mat(1, 2, {1, 2})), 2, 2),
                  ContractError);
}

TEST_CASE("multi-head attention zero sources, single head, shapes") {
  Rng rng(1);
  MultiHeadAttention<double> mha("m", 8, 2, false, rng);
  CHECK(mha.w_query(0).value.shape() == Shape{8, 4});
  CHECK(mha.scale_dim() == 4);
  Tape<double> tape;
  std::mt19937_64 r(2);
  auto q = tape.constant(testutil::random_tensor<double>({1, 8}, r));
  auto zero = tape.constant(Tensor<double>({3, 8}));
  for (double v : mha.forward(tape, q, zero, zero, 1).value().data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(mha.forward(tape, q, tape.constant(Tensor<double>({3, 6})), zero, 1), ShapeError);
  CHECK_THROWS_AS(MultiHeadAttention<double>("bad", 10, 4, false, rng), ConfigError);

  MultiHeadAttention<double> one("s", 6, 1, false, rng);
  auto kv = testutil::random_tensor<double>({4, 6}, r);
  auto qv = testutil::random_tensor<double>({1, 6}, r);
  auto got = one.forward(tape, tape.constant(qv), tape.constant(kv), tape.constant(kv), 1).value();
  const auto expect = mha_oracle(one, to_mat(qv)[0], to_mat(kv));
  for (std::size_t c = 0; c < 6; ++c) CHECK(got[c] == doctest::Approx(expect[c]).epsilon(1e-12));

  MultiHeadAttention<double> full("f", 8, 2, true, rng);
  CHECK(full.scale_dim() == 8);
}

TEST_CASE("multi-head attention matches a loop oracle and is key/value permutation invariant") {
  std::mt19937_64 r(4);
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(trial);
    MultiHeadAttention<double> mha("m", 8, 4, trial % 2 == 1, rng);
    auto q = testutil::random_tensor<double>({1, 8}, r);
    auto kv = testutil::random_tensor<double>({5, 8}, r);
    Tape<double> tape;
    auto out = mha.forward(tape, tape.constant(q), tape.constant(kv), tape.constant(kv), 1).value();
    const auto expect = mha_oracle(mha, to_mat(q)[0], to_mat(kv));
    for (std::size_t c = 0; c < 8; ++c) CHECK(out[c] == doctest::Approx(expect[c]).epsilon(1e-10));

    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Tensor<double> shuffled({5, 8});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 8; ++c) shuffled(i, c) = kv(perm[i], c);
    auto permuted = mha.forward(tape, tape.constant(q), tape.constant(shuffled), tape.constant(shuffled), 1).value();
    CHECK(testutil::max_abs_diff(out, permuted) < 1e-6);
  }
}

TEST_CASE("grouped attention never mixes samples") {
  Rng rng(5);
  MultiHeadAttention<float> mha("m", 8, 2, false, rng);
  std::mt19937_64 r(6);
  auto q = testutil::random_tensor<float>({2, 8}, r);
  auto kv = testutil::random_tensor<float>({6, 8}, r);
  Tape<float> tape;
  auto both = mha.forward(tape, tape.constant(q), tape.constant(kv), tape.constant(kv), 2).value();
  Tensor<float> q1({1, 8}), kv1({3, 8});
  std::copy(q.raw() + 8, q.raw() + 16, q1.raw());
  std::copy(kv.raw() + 24, kv.raw() + 48, kv1.raw());
  auto alone = mha.forward(tape, tape.constant(q1), tape.constant(kv1), tape.constant(kv1), 1).value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(both(1, c) == alone[c]);
}

TEST_CASE("cmt block: zero embedding, zero weights, straight-line oracle") {
  std::mt19937_64 r(7);
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(trial);
    CmtBlock<double> block("b", 8, 2, false, rng);
    for (auto* ln : {&block.norm1(), &block.norm2()}) {
      ln->gamma().value = testutil::random_tensor<double>({8}, r, 0.5, 1.5);
      ln->beta().value = testutil::random_tensor<double>({8}, r);
    }
    auto q = testutil::random_tensor<double>({1, 8}, r);
    auto e = testutil::random_tensor<double>({1, 8}, r);
    Tape<double> tape;
    auto out = block.forward(tape, tape.constant(q), tape.constant(e)).value();

    const auto n1 = norm_row(to_mat(q)[0], block.norm1().gamma().value, block.norm1().beta().value);
    const auto sa = mha_oracle(block.self_attn(), n1, {n1});
    std::vector<double> x1(8);
    for (std::size_t c = 0; c < 8; ++c) x1[c] = q[c] + sa[c];
    const auto n2 = norm_row(x1, block.norm2().gamma().value, block.norm2().beta().value);
    const auto ca = mha_oracle(block.cross_attn(), n2, to_mat(e));
    for (std::size_t c = 0; c < 8; ++c) CHECK(out[c] == doctest::Approx(x1[c] + ca[c]).epsilon(1e-5));

    // Zero embedding: output equals x1 = Q + self-attention, bit for bit.
    Tape<double> t2;
    auto qv = t2.constant(q);
    auto normed = block.norm1().forward(t2, qv);
    auto x1v = ops::add(qv, block.self_attn().forward(t2, normed, normed, normed, 1)).value();
    CHECK(block.forward(t2, qv, t2.constant(Tensor<double>({1, 8}))).value() == x1v);
  }

  Rng rng(9);
  CmtBlock<float> block("z", 8, 4, false, rng);
  ParamRefs<float> params;
  block.collect(params);
  for (auto* p : params) {
    if (p->name.find("norm") == std::string::npos) p->value.fill(0.0f);
  }
  auto q = testutil::random_tensor<float>({3, 8}, r);
  Tape<float> tape;
  CHECK(block.forward(tape, tape.constant(q), tape.constant(testutil::random_tensor<float>({3, 8}, r))).value() == q);
}

TEST_CASE("single-token self-attention is the explicit value/output composition") {
  Rng rng(10);
  CmtBlock<double> block("b", 8, 2, false, rng);
  std::mt19937_64 r(11);
  auto q = testutil::random_tensor<double>({1, 8}, r);
  Tape<double> tape;
  auto normed = block.norm1().forward(tape, tape.constant(q));
  auto sa = block.self_attn().forward(tape, normed, normed, normed, 1).value();
  std::vector<double> concat;
  for (std::size_t i = 0; i < 2; ++i) {
    auto v = mul(to_mat(normed.value()), to_mat(block.self_attn().w_value(i).value))[0];
    concat.insert(concat.end(), v.begin(), v.end());
  }
  auto expect = mul({concat}, to_mat(block.self_attn().w_out().value))[0];
  for (std::size_t c = 0; c < 8; ++c) CHECK(sa[c] == doctest::Approx(expect[c]).epsilon(1e-12));
}
