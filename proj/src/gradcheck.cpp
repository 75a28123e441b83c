#include "threemt/gradcheck.hpp"

#include <cmath>
#include <deque>
#include <numeric>

#include "threemt/attention.hpp"
#include "threemt/embeddings.hpp"
#include "threemt/model.hpp"
#include "threemt/training.hpp"

namespace threemt {

namespace {

using V = Var<double>;
using P = Parameter<double>;

// Parameters with stable addresses.
struct Bag {
  std::deque<P> items;

  P& add(const std::string& name, Shape shape, Rng& rng, double away_from_zero = 0.0) {
    Tensor<double> t = uniform_tensor<double>(std::move(shape), 1.0, rng);
    if (away_from_zero > 0.0) {
      for (double& x : t.storage()) x = std::copysign(away_from_zero + std::abs(x), x);
    }
    items.emplace_back(name, std::move(t));
    return items.back();
  }
  ParamRefs<double> refs() {
    ParamRefs<double> out;
    for (P& p : items) out.push_back(&p);
    return out;
  }
};

// Fixed, non-degenerate linear functional so every output element matters.
V project(const V& out) {
  Tensor<double> w(out.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::sin(1.3 * static_cast<double>(i) + 0.7) + 0.1;
  return ops::weighted_sum(out, w);
}

GradCheckCase op_case(const std::string& name, std::shared_ptr<Bag> bag, std::function<V(Tape<double>&)> loss) {
  GradCheckCase c;
  c.name = name;
  c.params = bag->refs();
  c.loss = std::move(loss);
  c.owner = bag;
  return c;
}

// Builds cases for single ops whose inputs are all leaves in the bag.
template <typename Build>
GradCheckCase leaf_case(const std::string& name, Rng& rng, std::vector<Shape> shapes, Build build,
                        double away_from_zero = 0.0) {
  auto bag = std::make_shared<Bag>();
  for (std::size_t i = 0; i < shapes.size(); ++i) bag->add(name + ".in" + std::to_string(i), shapes[i], rng, away_from_zero);
  Bag* raw = bag.get();
  return op_case(name, bag, [raw, build](Tape<double>& tape) {
    std::vector<V> in;
    for (P& p : raw->items) in.push_back(tape.parameter(p));
    return build(in);
  });
}

}  // namespace

GradCheckRow run_gradcheck_case(const GradCheckCase& c, std::uint64_t seed) {
  for (const P* p : c.params) p->zero_grad();
  {
    Tape<double> tape;
    V loss = c.loss(tape);
    tape.backward(loss);
  }
  auto evaluate = [&] {
    Tape<double> tape(false);
    return c.loss(tape).value()[0];
  };

  Rng rng(seed ^ std::hash<std::string>{}(c.name));
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::size_t coords = 0;
  for (P* p : c.params) {
    std::vector<std::size_t> idx(p->value.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (c.max_coords > 0 && idx.size() > c.max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(c.max_coords);
    }
    for (std::size_t j : idx) {
      const double orig = p->value[j];
      p->value[j] = orig + c.step;
      const double up = evaluate();
      p->value[j] = orig - c.step;
      const double down = evaluate();
      p->value[j] = orig;
      const double numeric = (up - down) / (2.0 * c.step);
      const double analytic = p->grad[j];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++coords;
    }
  }
  const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
  GradCheckRow row;
  row.name = c.name;
  row.tolerance = c.tolerance;
  row.coords = coords;
  row.rel_error = denom < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
  row.passed = row.rel_error < c.tolerance;
  return row;
}

std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, std::uint64_t seed) {
  std::vector<GradCheckRow> rows;
  for (const GradCheckCase& c : cases) rows.push_back(run_gradcheck_case(c, seed));
  return rows;
}

std::vector<GradCheckCase> default_gradcheck_cases(std::size_t d, std::size_t heads, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases;

  cases.push_back(leaf_case("add", rng, {{3, 4}, {3, 4}}, [](auto& in) { return project(ops::add(in[0], in[1])); }));
  cases.push_back(leaf_case("add_rows", rng, {{6, 4}, {2, 4}}, [](auto& in) { return project(ops::add_rows(in[0], in[1])); }));
  cases.push_back(leaf_case("scale", rng, {{3, 5}}, [](auto& in) { return project(ops::scale(in[0], 1.7)); }));
  cases.push_back(leaf_case("matmul", rng, {{3, 4}, {4, 5}}, [](auto& in) { return project(ops::matmul(in[0], in[1])); }));
  cases.push_back(leaf_case("softmax_lastaxis", rng, {{4, 6}}, [](auto& in) { return project(ops::softmax_lastaxis(in[0])); }));
  cases.push_back(leaf_case("layer_norm", rng, {{4, 6}, {6}, {6}},
                            [](auto& in) { return project(ops::layer_norm(in[0], in[1], in[2])); }));
  cases.push_back(leaf_case("channel_norm", rng, {{2, 3, 2, 2, 2}, {3}, {3}},
                            [](auto& in) { return project(ops::channel_norm(in[0], in[1], in[2])); }));
  cases.push_back(leaf_case("sample_norm", rng, {{2, 3, 2, 2, 2}, {3}, {3}},
                            [](auto& in) { return project(ops::sample_norm(in[0], in[1], in[2])); }));
  cases.push_back(leaf_case("conv3d_k3_s1", rng, {{1, 2, 4, 4, 3}, {3, 2, 3, 3, 3}, {3}},
                            [](auto& in) { return project(ops::conv3d(in[0], in[1], in[2], 1)); }));
  cases.push_back(leaf_case("conv3d_k3_s2", rng, {{1, 2, 4, 4, 3}, {3, 2, 3, 3, 3}, {3}},
                            [](auto& in) { return project(ops::conv3d(in[0], in[1], in[2], 2)); }));
  cases.push_back(leaf_case("conv3d_k1_s2", rng, {{2, 2, 4, 3, 3}, {3, 2, 1, 1, 1}, {3}},
                            [](auto& in) { return project(ops::conv3d(in[0], in[1], in[2], 2)); }));
  cases.push_back(leaf_case("leaky_relu", rng, {{3, 5}}, [](auto& in) { return project(ops::leaky_relu(in[0])); }, 0.05));
  cases.push_back(leaf_case("relu", rng, {{3, 5}}, [](auto& in) { return project(ops::relu(in[0])); }, 0.05));
  cases.push_back(leaf_case("cross_entropy_logits", rng, {{4, 2}}, [](auto& in) {
    static const int labels[] = {0, 1, 1, 0};
    return ops::cross_entropy_logits(in[0], std::span<const int>(labels));
  }));
  cases.push_back(leaf_case("scaled_dot_attention", rng, {{4, 4}, {6, 4}, {6, 3}},
                            [](auto& in) { return project(ops::scaled_dot_attention(in[0], in[1], in[2], 2, 4)); }));
  cases.push_back(leaf_case("concat_cols", rng, {{3, 2}, {3, 4}}, [](auto& in) {
    return project(ops::concat_cols(std::span<const V>(in.data(), 2)));
  }));
  cases.push_back(leaf_case("mean_groups", rng, {{6, 4}}, [](auto& in) { return project(ops::mean_groups(in[0], 2)); }));
  cases.push_back(leaf_case("volume_to_tokens", rng, {{2, 3, 2, 2, 2}},
                            [](auto& in) { return project(ops::volume_to_tokens(in[0])); }));
  cases.push_back(leaf_case("gather_rows", rng, {{5, 4}}, [](auto& in) {
    static const std::size_t idx[] = {1, 3, 1, 0};
    return project(ops::gather_rows(in[0], std::span<const std::size_t>(idx)));
  }));
  cases.push_back(leaf_case("scatter_rows", rng, {{2, 4}}, [](auto& in) {
    static const std::size_t rows[] = {0, 2};
    return project(ops::scatter_rows(in[0], std::span<const std::size_t>(rows), 4));
  }));
  cases.push_back(leaf_case("sum", rng, {{3, 4}}, [](auto& in) { return ops::sum(in[0]); }));
  cases.push_back(leaf_case("weighted_sum", rng, {{3, 4}}, [](auto& in) { return project(in[0]); }));

  {
    struct State {
      Bag inputs;
      Linear<double> layer;
    };
    auto s = std::make_shared<State>();
    s->layer = Linear<double>("linear", 5, 3, true, rng);
    s->inputs.add("x", {4, 5}, rng);
    GradCheckCase c;
    c.name = "linear";
    c.params = s->inputs.refs();
    s->layer.collect(c.params);
    c.loss = [raw = s.get()](Tape<double>& tape) {
      return project(raw->layer.forward(tape, tape.parameter(raw->inputs.items[0])));
    };
    c.owner = s;
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Bag inputs;
      MultiHeadAttention<double> mha;
    };
    auto s = std::make_shared<State>();
    s->mha = MultiHeadAttention<double>("mha", d, heads, false, rng);
    s->inputs.add("q", {2, d}, rng);
    s->inputs.add("kv", {6, d}, rng);
    GradCheckCase c;
    c.name = "multi_head_attention";
    c.params = s->inputs.refs();
    s->mha.collect(c.params);
    c.loss = [raw = s.get()](Tape<double>& tape) {
      V q = tape.parameter(raw->inputs.items[0]);
      V kv = tape.parameter(raw->inputs.items[1]);
      return project(raw->mha.forward(tape, q, kv, kv, 2));
    };
    c.owner = s;
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Bag inputs;
      CmtBlock<double> block;
    };
    auto s = std::make_shared<State>();
    s->block = CmtBlock<double>("cmt", d, heads, false, rng);
    s->inputs.add("query", {2, d}, rng);
    s->inputs.add("embedding", {2, d}, rng);
    // Non-trivial norm parameters so their gradients are not at a symmetric point.
    for (Parameter<double>* p : std::initializer_list<Parameter<double>*>{
             &s->block.norm1().gamma(), &s->block.norm1().beta(), &s->block.norm2().gamma(), &s->block.norm2().beta()}) {
      p->value = uniform_tensor<double>(p->value.shape(), 1.0, rng);
    }
    GradCheckCase c;
    c.name = "cmt_block";
    c.params = s->inputs.refs();
    s->block.collect(c.params);
    c.loss = [raw = s.get()](Tape<double>& tape) {
      return project(raw->block.forward(tape, tape.parameter(raw->inputs.items[0]), tape.parameter(raw->inputs.items[1])));
    };
    c.owner = s;
    cases.push_back(std::move(c));
  }
  {
    auto emb = std::make_shared<CategoricalEmbedder<double>>("categorical", 4, d, rng);
    GradCheckCase c;
    c.name = "categorical_embedding";
    emb->collect(c.params);
    c.loss = [raw = emb.get()](Tape<double>& tape) {
      static const std::size_t idx[] = {2, 0, 2};
      return project(raw->embed(tape, std::span<const std::size_t>(idx)));
    };
    c.owner = emb;
    cases.push_back(std::move(c));
  }
  {
    auto emb = std::make_shared<OrdinalEmbedder<double>>("ordinal", d, rng);
    emb->set_normalization(0.5, 1.3);
    GradCheckCase c;
    c.name = "ordinal_embedding";
    emb->collect(c.params);
    c.loss = [raw = emb.get()](Tape<double>& tape) {
      static const double values[] = {-0.4, 1.7, 0.5};
      return project(raw->embed(tape, std::span<const double>(values)));
    };
    c.owner = emb;
    cases.push_back(std::move(c));
  }
  {
    ImageEncoderConfig cfg;
    cfg.stem_channels = 3;
    cfg.block_channels = {3, 4, 4, 8};
    cfg.encoder_layers = 1;
    cfg.encoder_heads = 2;
    struct State {
      ImageEncoder<double> encoder;
      Tensor<double> volume;
    };
    auto s = std::make_shared<State>();
    s->encoder = ImageEncoder<double>("image", {32, 16, 16}, d, cfg, rng);
    s->volume = uniform_tensor<double>({1, 1, 32, 16, 16}, 1.0, rng);
    GradCheckCase c;
    c.name = "image_encoder";
    c.max_coords = 6;
    // Channel norm over few stem channels is steep where channels nearly
    // coincide; a larger step straddles that curvature.
    c.step = 1e-7;
    s->encoder.collect(c.params);
    c.loss = [raw = s.get()](Tape<double>& tape) {
      return project(raw->encoder.encode(tape, tape.constant(raw->volume)));
    };
    c.owner = s;
    cases.push_back(std::move(c));
  }
  {
    ModelConfig mc;
    mc.d = d;
    mc.heads = heads;
    mc.seed = seed + 1;
    auto model = std::make_shared<ThreeMTModel<double>>(
        std::vector<ModalitySpec>{ModalitySpec::ordinal("ordinal"), ModalitySpec::categorical("categorical", 3)}, mc);
    std::get<OrdinalEmbedder<double>>(model->embedder(0)).set_normalization(0.2, 1.1);
    struct State {
      std::shared_ptr<ThreeMTModel<double>> model;
      ModalityBatch batch;
    };
    auto s = std::make_shared<State>();
    s->model = model;
    s->batch.size = 1;
    s->batch.labels = {1};
    ModalityColumn ord, cat;
    ord.available = {1};
    ord.values = {0.9};
    cat.available = {1};
    cat.categories = {2};
    s->batch.columns = {ord, cat};
    GradCheckCase c;
    c.name = "full_pipeline";
    c.tolerance = 1e-3;
    c.params = model->parameters();
    c.loss = [raw = s.get()](Tape<double>& tape) {
      DropMask keep(1, 2, true);
      auto out = raw->model->forward(tape, raw->batch, &keep);
      return compute_total_loss<double>(out.final_logits, out.aux_logits, raw->batch.labels, 1.0).total;
    };
    c.owner = s;
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace threemt
