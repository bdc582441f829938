#include <doctest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "miam/model.hpp"

using namespace miam;
using ad::Tensor;
using Mat = std::vector<std::vector<double>>;

namespace {

ModelConfig small_model(std::size_t D = 3) {
  ModelConfig m;
  m.num_variables = D;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_k = 4;
  m.d_v = 4;
  m.d_ffn = 16;
  m.d_hidden = 8;
  m.dropout = 0;
  return m;
}

TimeSeriesSample random_sample(std::mt19937_64& rng, std::size_t T, std::size_t D,
                               const std::string& id, int label) {
  RealMatrix x(T, D);
  std::normal_distribution<double> n01;
  for (auto& v : x.data) v = n01(rng);
  return make_sample(id, testing::random_times(rng, T), x, testing::random_mask(rng, T, D, 0.6),
                     label);
}

Dataset random_dataset(std::uint64_t seed, std::vector<std::size_t> lengths, std::size_t D = 3) {
  std::mt19937_64 rng(seed);
  Dataset ds;
  ds.num_variables = D;
  for (std::size_t d = 0; d < D; ++d) ds.vocabulary.push_back("v" + std::to_string(d));
  for (std::size_t i = 0; i < lengths.size(); ++i)
    ds.samples.push_back(random_sample(rng, lengths[i], D, "s" + std::to_string(i), int(i % 2)));
  return ds;
}

Mat to_mat(const Tensor<double>& t, std::size_t b = 0) {
  const std::size_t r = t.dim(t.rank() - 2), c = t.dim(t.rank() - 1);
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[(b * r + i) * c + j];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat weight(const ParameterSet<double>& p, const std::string& name) {
  const auto& t = p.at(name);
  if (t.rank() == 1) return Mat{std::vector<double>(t.data().begin(), t.data().end())};
  return to_mat(t);
}

// Single-head attention, no masking: softmax(q wq (k wk)^T / sqrt(dk)) v wv wo.
Mat attention_oracle(const Mat& q, const Mat& kv, const ParameterSet<double>& p,
                     const std::string& prefix, double dk) {
  const auto Q = mm(q, weight(p, prefix + ".wq"));
  const auto K = mm(kv, weight(p, prefix + ".wk"));
  const auto V = mm(kv, weight(p, prefix + ".wv"));
  Mat A(Q.size(), std::vector<double>(K.size()));
  for (std::size_t i = 0; i < Q.size(); ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < K.size(); ++j) {
      double s = 0;
      for (std::size_t c = 0; c < Q[0].size(); ++c) s += Q[i][c] * K[j][c];
      A[i][j] = s / std::sqrt(dk);
      mx = std::max(mx, A[i][j]);
    }
    double z = 0;
    for (auto& a : A[i]) z += (a = std::exp(a - mx));
    for (auto& a : A[i]) a /= z;
  }
  return mm(mm(A, V), weight(p, prefix + ".wo"));
}

Mat ffn_oracle(const Mat& x, const ParameterSet<double>& p, const std::string& prefix,
               double slope) {
  auto h = mm(x, weight(p, prefix + ".w1"));
  const auto b1 = weight(p, prefix + ".b1")[0];
  for (auto& row : h)
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] += b1[j];
      if (row[j] < 0) row[j] *= slope;
    }
  auto out = mm(h, weight(p, prefix + ".w2"));
  const auto b2 = weight(p, prefix + ".b2")[0];
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b2[j];
  return out;
}

double mat_diff(const Mat& a, const Mat& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

struct Harness {
  ad::Tape<double> tape;
  ParameterSet<double> params;
  std::unique_ptr<BoundParams<double>> bound;
  ModelConfig config;

  Harness(ModelConfig c, ParameterSet<double> p) : params(std::move(p)), config(std::move(c)) {
    bound = std::make_unique<BoundParams<double>>(tape, params, false);
  }
  ForwardContext<double> ctx(Mode mode = Mode::kEval, AttentionTrace<double>* trace = nullptr) {
    return ForwardContext<double>{tape, config, *bound, mode, nullptr, trace};
  }
};

}  // namespace

TEST_CASE("time embedding examples") {
  const std::vector<double> t{0.0, 100.0};
  const auto te = time_embedding(t, 4, 100.0);
  const double want0[4] = {0, 1, 0, 1};
  const double want1[4] = {-0.5063656411097588, 0.8623188722876839, -0.5440211108893698,
                           -0.8390715290764524};
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(std::abs(te(0, c) - want0[c]) < 1e-12);
    CHECK(std::abs(te(1, c) - want1[c]) < 1e-12);
  }
}

TEST_CASE("init_params: names, shapes and reproducibility") {
  const auto c = small_model();
  const auto a = init_params<double>(c, 3), b = init_params<double>(c, 3), d = init_params<double>(c, 4);
  CHECK(a == b);
  CHECK_FALSE(a == d);
  CHECK(a.at("embed.x.w").shape() == ad::Shape{3, 8});
  CHECK(a.at("layer1.miss.wq").shape() == ad::Shape{8, 8});
  CHECK(a.at("dec.out.w").shape() == ad::Shape{8, 3});
  CHECK(a.at("cls.w2").shape() == ad::Shape{8, 1});
  for (double g : a.at("layer0.obs.lnq.g").data()) CHECK(g == 1.0);
  const double limit = std::sqrt(6.0 / (3 + 8));
  for (double w : a.at("embed.x.w").data()) CHECK(std::abs(w) <= limit);

  auto x_only = c;
  x_only.views = ViewSet::kX;
  x_only.use_decoder = false;
  const auto p = init_params<double>(x_only, 3);
  CHECK_FALSE(p.contains("embed.m.w"));
  CHECK_FALSE(p.contains("layer0.miss.wq"));
  CHECK_FALSE(p.contains("dec.out.w"));
}

TEST_CASE("model config validation") {
  auto c = small_model();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_model();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_view_set("triple") == ViewSet::kTriple);
  CHECK_THROWS_AS(parse_view_set("xyz"), ConfigError);
}

TEST_CASE("zero embedding and attention output weights leave the time embedding") {
  const auto c = small_model();
  auto p = init_params<double>(c, 1);
  p.at("embed.x.w").fill(0);
  p.at("view.x.wo").fill(0);
  const auto data = random_dataset(5, {4, 2});
  const std::size_t idx[] = {0, 1};
  const auto batch = make_batch(data, idx);
  Harness h(c, p);
  const auto hx = embed_views(h.ctx(), batch).hx.value();
  const auto te = time_embedding(batch.timestamps, c.d_model, c.l_max);
  CHECK(hx.storage() == te.data);
}

TEST_CASE("padded keys receive zero attention; zero query weights give uniform attention") {
  const auto c = small_model();
  auto p = init_params<double>(c, 2);
  const auto data = random_dataset(6, {5, 3});
  const std::size_t idx[] = {0, 1};
  const auto batch = make_batch(data, idx);
  {
    Harness h(c, p);
    AttentionTrace<double> trace;
    forward(h.ctx(Mode::kEval, &trace), batch);
    REQUIRE(!trace.weights.empty());
    for (const auto& [name, w] : trace.weights) {
      const auto& a = w.value();
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a.at(1, i, 3) == 0.0);
        CHECK(a.at(1, i, 4) == 0.0);
      }
    }
  }
  p.at("view.x.wq").fill(0);
  Harness h(c, p);
  AttentionTrace<double> trace;
  embed_views(h.ctx(Mode::kEval, &trace), batch);
  for (const auto& [name, w] : trace.weights) {
    if (name.rfind("view.x.", 0) != 0) continue;
    const auto& a = w.value();
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(a.at(0, i, j) == doctest::Approx(0.2).epsilon(1e-12));
        if (j < 3) CHECK(a.at(1, i, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));
      }
  }
}

TEST_CASE("a single valid key gets weight one") {
  const auto c = small_model();
  const auto data = random_dataset(7, {1});
  const std::size_t idx[] = {0};
  Harness h(c, init_params<double>(c, 3));
  AttentionTrace<double> trace;
  forward(h.ctx(Mode::kEval, &trace), make_batch(data, idx));
  for (const auto& [name, w] : trace.weights) CHECK(w.value()[0] == 1.0);
}

TEST_CASE("single-head attention matches a direct computation") {
  auto c = small_model();
  c.n_heads = 1;
  c.d_k = c.d_v = 5;
  const auto p = init_params<double>(c, 9);
  std::mt19937_64 rng(10);
  const auto q = testing::random_tensor(rng, {1, 4, 8}), kv = testing::random_tensor(rng, {1, 6, 8});
  const std::vector<std::uint8_t> valid(6, 1);
  Harness h(c, p);
  const auto got = mha(h.ctx(), h.tape.constant(q), h.tape.constant(kv), h.tape.constant(kv),
                       "layer0.obs", valid).value();
  CHECK(mat_diff(to_mat(got), attention_oracle(to_mat(q), to_mat(kv), p, "layer0.obs", 5)) < 1e-12);
}

TEST_CASE("integration layer matches a direct computation without residual norms") {
  auto c = small_model();
  c.n_heads = 1;
  c.d_k = c.d_v = 6;
  c.residual_norm = false;
  const auto p = init_params<double>(c, 11);
  std::mt19937_64 rng(12);
  const auto hx = testing::random_tensor(rng, {1, 5, 8}), hm = testing::random_tensor(rng, {1, 5, 8}),
             hd = testing::random_tensor(rng, {1, 5, 8});
  Harness h(c, p);
  ViewStates<double> s{h.tape.constant(hx), h.tape.constant(hm), h.tape.constant(hd)};
  const std::vector<std::uint8_t> valid(5, 1);
  const auto got = miam_layer(h.ctx(), s, 0, valid).hx.value();
  const auto hm_star = attention_oracle(to_mat(hd), to_mat(hm), p, "layer0.miss", 6);
  const auto hx_star = attention_oracle(hm_star, to_mat(hx), p, "layer0.obs", 6);
  const auto want = ffn_oracle(hx_star, p, "layer0.ffn", c.leaky_slope);
  CHECK(mat_diff(to_mat(got), want) < 1e-12);
}

TEST_CASE("zero classifier weights give probability one half") {
  const auto c = small_model();
  auto p = init_params<double>(c, 4);
  p.at("cls.w2").fill(0);
  const auto data = random_dataset(8, {3, 6, 2});
  Harness h(c, p);
  const std::size_t idx[] = {0, 1, 2};
  const auto out = forward(h.ctx(), make_batch(data, idx));
  for (double v : out.probabilities.value().data()) CHECK(v == 0.5);
}

TEST_CASE("decoder runs in train mode only; zero output weights give zero imputation") {
  const auto c = small_model();
  auto p = init_params<double>(c, 5);
  const auto data = random_dataset(9, {4, 2});
  const std::size_t idx[] = {0, 1};
  const auto batch = make_batch(data, idx);
  {
    Harness h(c, p);
    CHECK_FALSE(forward(h.ctx(Mode::kEval), batch).imputed.has_value());
  }
  p.at("dec.out.w").fill(0);
  Harness h(c, p);
  const auto out = forward(h.ctx(Mode::kTrain), batch);
  REQUIRE(out.imputed.has_value());
  CHECK(out.imputed->shape() == ad::Shape{2, 4, 3});
  for (double v : out.imputed->value().data()) CHECK(v == 0.0);
}

TEST_CASE("predictions do not depend on batch composition or order") {
  const auto c = small_model();
  const auto p = init_params<double>(c, 6);
  const auto data = random_dataset(10, {3, 9, 5, 1, 7, 4});
  const auto together = predict(p, c, data, 64);
  const auto singles = predict(p, c, data, 1);
  std::vector<std::size_t> rev(data.size());
  std::iota(rev.rbegin(), rev.rend(), 0);
  const auto reversed = predict(p, c, data.subset(rev), 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(std::abs(together[i] - singles[i]) < 1e-12);
    CHECK(std::abs(together[i] - reversed[data.size() - 1 - i]) < 1e-12);
  }
}

TEST_CASE("padded rows do not leak into valid outputs") {
  const auto c = small_model();
  const auto p = init_params<double>(c, 7);
  auto data = random_dataset(11, {3, 6});
  const std::size_t idx[] = {0, 1};
  auto batch = make_batch(data, idx);
  auto run = [&](const Batch& b) {
    Harness h(c, p);
    auto out = forward(h.ctx(Mode::kTrain), b);
    return std::make_pair(out.probabilities.value()[0], out.imputed->value());
  };
  const auto base = run(batch);
  for (std::size_t j = 3; j < 6; ++j)
    for (std::size_t d = 0; d < 3; ++d) {
      batch.values[batch.offset(0, j, d)] = 123.0;
      batch.mask[batch.offset(0, j, d)] = 1.0;
    }
  const auto poked = run(batch);
  CHECK(base.first == poked.first);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t d = 0; d < 3; ++d) CHECK(base.second.at(0, j, d) == poked.second.at(0, j, d));
}

TEST_CASE("float and double forward passes agree") {
  const auto c = small_model();
  const auto p = init_params<double>(c, 8);
  const auto data = random_dataset(12, {5, 4, 8});
  const auto d64 = predict(p, c, data);
  const auto d32 = predict(p.cast<float>(), c, data);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(std::abs(d64[i] - d32[i]) < 1e-4);
}

TEST_CASE("mismatched variable count is a shape error") {
  const auto c = small_model(4);
  const auto data = random_dataset(13, {3});
  const std::size_t idx[] = {0};
  Harness h(c, init_params<double>(c, 1));
  CHECK_THROWS_AS(forward(h.ctx(), make_batch(data, idx)), ShapeError);
}
