#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "miam/synthetic.hpp"
#include "miam/training.hpp"

using namespace miam;
using ad::Tensor;

namespace {

ModelConfig small_model(std::size_t D) {
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

Dataset synthetic(std::size_t n, std::uint64_t seed) {
  SyntheticConfig c;
  c.n_samples = n;
  c.seed = seed;
  return generate(c).dataset;
}

Batch one_batch(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(data, idx);
}

ParameterSet<double> scalar_param(double x) {
  ParameterSet<double> p;
  p.add("x", Tensor<double>({1}, x));
  return p;
}

}  // namespace

TEST_CASE("focal term examples") {
  CHECK(std::abs(focal_term(0.5, 1, 7.0, 0.15) - 4.372894519959303) < 1e-12);
  CHECK(std::abs(focal_term(0.3, 1, 1, 0) + std::log(0.3)) < 1e-15);
  CHECK(std::abs(focal_term(0.3, 0, 1, 0) + std::log(0.7)) < 1e-15);
  CHECK(std::isfinite(focal_term(0.0, 1, 7, 0.15)));
  CHECK(std::isfinite(focal_term(1.0, 0, 7, 0.15)));
  double prev = 1e300;
  for (double p = 0.01; p < 1.0; p += 0.01) {
    const double v = focal_term(p, 1, 7, 0.15);
    CHECK(v >= 0);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("focal loss sums terms; the logit form agrees in value and gradient") {
  const std::vector<int> labels{1, 0, 1, 0};
  const std::vector<double> z{-2.0, 0.3, 1.5, -0.7};
  ad::Tape<double> tape;
  auto zv = tape.variable(Tensor<double>({4, 1}, z));
  auto from_logits = focal_loss_logits(zv, labels, 7.0, 0.15);
  auto from_probs = focal_loss(ad::sigmoid(zv), labels, 7.0, 0.15);
  double want = 0;
  for (std::size_t i = 0; i < 4; ++i) want += focal_term(1 / (1 + std::exp(-z[i])), labels[i], 7, 0.15);
  CHECK(std::abs(from_logits.value().item() - want) < 1e-12);
  CHECK(std::abs(from_probs.value().item() - want) < 1e-12);
  tape.backward(from_logits);
  const auto g = tape.grad(zv);
  for (std::size_t i = 0; i < 4; ++i) {
    auto term = [&](double zi) { return focal_term(1 / (1 + std::exp(-zi)), labels[i], 7, 0.15); };
    const double numeric = (term(z[i] + 1e-6) - term(z[i] - 1e-6)) / 2e-6;
    CHECK(std::abs(g[i] - numeric) < 1e-6);
  }
}

TEST_CASE("mask plan") {
  Dataset ds;
  ds.num_variables = 5;
  RealMatrix x(2, 5, 1.0);
  MaskMatrix m(2, 5, 1);
  ds.samples.push_back(make_sample("a", {0, 1}, x, m, 1));
  const auto batch = one_batch(ds);
  std::mt19937_64 rng(1);
  CHECK(sample_mask_plan(batch, 0.0, rng).plan.count() == 0);
  const auto c = sample_mask_plan(batch, 0.1, rng);
  CHECK(c.plan.count() == 1);
  CHECK(c.plan.per_sample == std::vector<std::size_t>{1});

  const auto data = synthetic(16, 3);
  const auto b = one_batch(data);
  std::mt19937_64 r1(5), r2(5);
  const auto p1 = sample_mask_plan(b, 0.25, r1), p2 = sample_mask_plan(b, 0.25, r2);
  CHECK(p1.plan.hidden == p2.plan.hidden);
  for (std::size_t i = 0; i < b.mask.size(); ++i) {
    if (p1.plan.hidden[i]) {
      CHECK(b.mask[i] == 1.0);
      CHECK(p1.batch.mask[i] == 0.0);
      CHECK(p1.batch.values[i] == 0.0);
    } else {
      CHECK(p1.batch.mask[i] == b.mask[i]);
    }
  }
  for (std::size_t s = 0; s < data.size(); ++s)
    CHECK(p1.plan.per_sample[s] == data.samples[s].observed_count() / 4);
}

TEST_CASE("imputation loss counts hidden entries only") {
  const std::vector<double> target{1, 2, 3, 4, 5, 6, 7, 8};
  const std::vector<std::uint8_t> hidden{1, 0, 0, 0, 0, 0, 0, 1};
  ad::Tape<double> tape;
  Tensor<double> xhat({2, 2, 2}, 0.0);
  for (std::size_t i = 0; i < 8; ++i) xhat[i] = target[i] + 2.0;
  auto v = tape.variable(xhat);
  auto loss = imputation_loss(v, target, hidden, 2);
  CHECK(loss.value().item() == doctest::Approx(4.0).epsilon(1e-15));
  tape.backward(loss);
  const auto g = tape.grad(v);
  for (std::size_t i = 0; i < 8; ++i) CHECK(g[i] == (hidden[i] ? 2.0 : 0.0));
}

TEST_CASE("composite loss weights") {
  ad::Tape<double> tape;
  auto cls = tape.constant(Tensor<double>({1}, 2.0));
  auto imp = tape.constant(Tensor<double>({1}, 3.0));
  CHECK(composite_loss(cls, std::optional(imp), 7.0, 0.1).value().item() ==
        doctest::Approx(14.3).epsilon(1e-15));
  CHECK(composite_loss(cls, std::optional<ad::Var<double>>(), 7.0, 0.1).value().item() == 14.0);
}

TEST_CASE("RAdam rho and scalar trajectories") {
  const double rho[6] = {1.0, 1.999499749846109, 2.9986659997755396,
                         3.9974987498546852, 4.995998000395048, 5.994163751655833};
  for (std::size_t t = 1; t <= 6; ++t) CHECK(std::abs(radam_rho(t, 0.999) - rho[t - 1]) < 1e-12);

  const double with_warmup[8] = {0.95, 0.9, 0.85, 0.8, 0.7982688497179913, 0.7956867384894476,
                                 0.7924128571139288, 0.7885390294894223};
  const double held[8] = {1, 1, 1, 1, 0.9982688497179915, 0.9956867384894478, 0.992412857113929,
                          0.9885390294894225};
  for (bool warm : {true, false}) {
    auto p = scalar_param(1.0);
    auto state = radam_init(p);
    const auto g = scalar_param(0.5);
    RAdamConfig cfg;
    cfg.sgd_warmup = warm;
    for (std::size_t t = 0; t < 8; ++t) {
      REQUIRE(radam_step(p, g, state, 0.1, cfg));
      CHECK(std::abs(p.at("x")[0] - (warm ? with_warmup : held)[t]) < 1e-12);
    }
  }
}

TEST_CASE("RAdam: zero gradient is a fixed point; non-finite gradient is skipped") {
  auto p = scalar_param(2.0);
  auto state = radam_init(p);
  for (int t = 0; t < 10; ++t) radam_step(p, scalar_param(0.0), state, 0.1, RAdamConfig{});
  CHECK(p.at("x")[0] == 2.0);
  const auto before = state.step;
  CHECK_FALSE(radam_step(p, scalar_param(std::nan("")), state, 0.1, RAdamConfig{}));
  CHECK(p.at("x")[0] == 2.0);
  CHECK(state.step == before);
  CHECK(state.skipped == 1);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(learning_rate_at(c, 0) == 0.005);
  CHECK(learning_rate_at(c, 9) == 0.005);
  CHECK(learning_rate_at(c, 10) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(learning_rate_at(c, 25) == doctest::Approx(0.0002).epsilon(1e-15));
}

TEST_CASE("lambda_cls = 0 gives no classifier gradient") {
  const auto data = synthetic(8, 4);
  const auto model = small_model(data.num_variables);
  const auto params = init_params<double>(model, 1);
  TrainConfig cfg;
  cfg.lambda_cls = 0;
  const auto b = one_batch(data);
  std::mt19937_64 rng(2);
  const auto loss = batch_loss(params, model, cfg, sample_mask_plan(b, 0.1, rng), b, nullptr, true);
  for (const char* name : {"cls.w1", "cls.b1", "cls.w2", "cls.b2"})
    for (double g : loss.grads.at(name).data()) CHECK(g == 0.0);
  double dec = 0;
  for (double g : loss.grads.at("dec.out.w").data()) dec += std::abs(g);
  CHECK(dec > 0);
}

TEST_CASE("epoch batches cover the split once") {
  const auto data = synthetic(50, 5);
  TrainConfig cfg;
  cfg.batch_size = 8;
  const auto batches = make_epoch_batches(data, cfg, 0);
  CHECK(batches.size() == 7);
  std::vector<int> seen(50, 0);
  for (const auto& b : batches)
    for (auto i : b) ++seen[i];
  for (int s : seen) CHECK(s == 1);
  CHECK(make_epoch_batches(data, cfg, 0) == batches);
  CHECK_FALSE(make_epoch_batches(data, cfg, 1) == batches);
}

TEST_CASE("validation split is stratified and disjoint") {
  const auto data = synthetic(100, 6);
  const auto [tr, va] = split_validation(data, 0.2, 1);
  CHECK(tr.size() + va.size() == 100);
  std::size_t pos = 0;
  for (auto i : va) pos += data.samples[i].label == 1;
  const double share = double(data.positives()) / 100.0;
  CHECK(std::abs(double(pos) - share * double(va.size())) <= 1.0);
  std::vector<int> seen(100, 0);
  for (auto i : tr) ++seen[i];
  for (auto i : va) ++seen[i];
  for (int s : seen) CHECK(s == 1);
}

TEST_CASE("one full batch epoch is one step and one history row") {
  const auto data = synthetic(64, 7);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 64;
  const auto r = train<double>(data, Dataset{}, small_model(data.num_variables), cfg);
  CHECK_FALSE(r.diverged);
  REQUIRE(r.state.history.size() == 1);
  CHECK(r.state.history[0].steps == 1);
  CHECK(std::isnan(r.state.history[0].val_auc));
  CHECK(r.state.best_epoch == 1);
}

TEST_CASE("training loss decreases and runs are bitwise reproducible") {
  const auto data = synthetic(64, 8);
  const auto model = small_model(data.num_variables);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.precision = Precision::kFloat64;
  auto run = [&] {
    const auto r = train<double>(data, Dataset{}, model, cfg);
    std::ostringstream os;
    write_history_csv(os, r.state.history, "x");
    return std::make_pair(r, os.str());
  };
  const auto [a, csv_a] = run();
  const auto [b, csv_b] = run();
  CHECK(csv_a == csv_b);
  CHECK(a.state.params == b.state.params);
  REQUIRE(a.state.history.size() == 5);
  for (std::size_t e = 1; e < 5; ++e) CHECK(a.state.history[e].loss < a.state.history[e - 1].loss);
  CHECK(a.state.history[4].steps == 20);
}

TEST_CASE("resume continues exactly where the run stopped") {
  const auto data = synthetic(32, 9);
  const auto model = small_model(data.num_variables);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  const auto full = train<double>(data, Dataset{}, model, cfg);
  cfg.epochs = 2;
  auto half = train<double>(data, Dataset{}, model, cfg);
  cfg.epochs = 4;
  const auto resumed = train<double>(data, Dataset{}, model, cfg, std::move(half.state));
  CHECK(resumed.state.params == full.state.params);
  CHECK(resumed.state.history.size() == 4);
}

TEST_CASE("max_steps caps the optimizer") {
  const auto data = synthetic(40, 10);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.max_steps = 7;
  const auto r = train<double>(data, Dataset{}, small_model(data.num_variables), cfg);
  CHECK(r.state.optimizer.step == 7);
  CHECK(r.state.history.size() == 2);
}

TEST_CASE("training configuration validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mask_ratio = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const auto data = synthetic(8, 11);
  CHECK_THROWS_AS(train<double>(data, Dataset{}, small_model(data.num_variables + 1), TrainConfig{}),
                  ConfigError);
}
