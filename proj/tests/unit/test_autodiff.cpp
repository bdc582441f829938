#include <doctest.h>

#include <functional>
#include <random>

#include "helpers.hpp"
#include "miam/autodiff.hpp"

using namespace miam;
using namespace miam::ad;
using T64 = Tensor<double>;

namespace {

using Op = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// loss = sum(op(inputs) * R) for a fixed random R, differentiated both ways.
double fd_check(const Op& op, std::vector<T64> inputs, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  T64 weights;
  auto loss_of = [&](const std::vector<T64>& in, std::vector<T64>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : in) vars.push_back(tape.variable(t));
    auto out = op(tape, vars);
    if (weights.empty()) weights = testing::random_tensor(rng, out.shape());
    auto loss = sum(elementwise_mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (auto v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value().item();
  };
  std::vector<T64> analytic;
  loss_of(inputs, &analytic);
  double worst = 0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double up = loss_of(inputs, nullptr);
      inputs[i][k] = orig - h;
      const double down = loss_of(inputs, nullptr);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i][k];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4}));
    }
  }
  return worst;
}

T64 rnd(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return testing::random_tensor(rng, std::move(s), scale);
}

}  // namespace

TEST_CASE("row_softmax of uniform logits") {
  Tape<double> tape;
  auto y = row_softmax(tape.constant(T64({1, 3}, 0.0)));
  for (int j = 0; j < 3; ++j) CHECK(y.value()[j] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("sigmoid(0) = 0.5") {
  Tape<double> tape;
  CHECK(sigmoid(tape.constant(T64({1}, 0.0))).value()[0] == 0.5);
}

TEST_CASE("matmul matches a triple loop") {
  const auto a = rnd({2, 3}, 1), b = rnd({3, 2}, 2);
  Tape<double> tape;
  const auto c = matmul(tape.constant(a), tape.constant(b)).value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(c.at(i, j) - s) < 1e-12);
    }
}

TEST_CASE("batched matmul and broadcast right operand") {
  const auto a = rnd({2, 3, 4}, 3), w = rnd({4, 5}, 4), b = rnd({2, 4, 5}, 5);
  Tape<double> tape;
  const auto shared = matmul(tape.constant(a), tape.constant(w)).value();
  const auto batched = matmul(tape.constant(a), tape.constant(b)).value();
  CHECK(shared.shape() == Shape{2, 3, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s1 = 0, s2 = 0;
        for (std::size_t k = 0; k < 4; ++k) {
          s1 += a.at(n, i, k) * w.at(k, j);
          s2 += a.at(n, i, k) * b.at(n, k, j);
        }
        CHECK(std::abs(shared.at(n, i, j) - s1) < 1e-12);
        CHECK(std::abs(batched.at(n, i, j) - s2) < 1e-12);
      }
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape<double> tape;
  auto a = tape.constant(T64({2, 3}));
  auto b = tape.constant(T64({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.constant(T64({3, 2}))), ShapeError);
}

TEST_CASE("backward: sum gives ones; sigmoid(w.x) at w = 0 gives x / 4") {
  Tape<double> tape;
  auto w = tape.variable(rnd({2, 3}, 7));
  tape.backward(sum(w));
  const auto ones = tape.grad(w);
  for (double g : ones.data()) CHECK(g == 1.0);

  Tape<double> t2;
  const auto xv = rnd({3, 1}, 8);
  auto w2 = t2.variable(T64({1, 3}, 0.0));
  auto loss = sum(sigmoid(matmul(w2, t2.constant(xv))));
  t2.backward(loss);
  for (std::size_t k = 0; k < 3; ++k) CHECK(t2.grad(w2)[k] == doctest::Approx(0.25 * xv[k]).epsilon(1e-14));
}

TEST_CASE("backward through a non-scalar is a contract error") {
  Tape<double> tape;
  auto w = tape.variable(T64({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(w), ContractError);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  const auto x = rnd({3, 4, 6}, 11, 3.0);
  auto shifted = x;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 6; ++c) shifted[r * 6 + c] += static_cast<double>(r) * 10 - 40;
  Tape<double> tape;
  const auto y = row_softmax(tape.constant(x)).value();
  const auto ys = row_softmax(tape.constant(shifted)).value();
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      s += y[r * 6 + c];
      CHECK(std::abs(y[r * 6 + c] - ys[r * 6 + c]) < 1e-9);
    }
    CHECK(std::abs(s - 1) < 1e-9);
  }
}

TEST_CASE("masked softmax: masked keys get zero probability and zero gradient") {
  const auto x = rnd({2, 3, 4}, 12);
  const std::vector<std::uint8_t> valid{1, 1, 0, 1, 0, 0, 0, 0};
  Tape<double> tape;
  auto xv = tape.variable(x);
  auto y = masked_row_softmax(xv, std::span<const std::uint8_t>(valid));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(y.value().at(0, i, 2) == 0.0);
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += y.value().at(0, i, j);
    CHECK(std::abs(s - 1) < 1e-12);
    for (std::size_t j = 0; j < 4; ++j) CHECK(y.value().at(1, i, j) == 0.0);  // no valid key
  }
  tape.backward(sum(elementwise_mul(y, tape.constant(rnd({2, 3, 4}, 13)))));
  const auto g = tape.grad(xv);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.at(0, i, 2) == 0.0);
    for (std::size_t j = 0; j < 4; ++j) CHECK(g.at(1, i, j) == 0.0);
  }
}

TEST_CASE("layer_norm rows have zero mean and unit variance") {
  Tape<double> tape;
  const auto y = layer_norm(tape.constant(rnd({5, 7}, 14, 4.0)), 1e-12).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 7; ++c) m += y.at(r, c);
    m /= 7;
    for (std::size_t c = 0; c < 7; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 7;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1) < 1e-6);
  }
}

TEST_CASE("every op matches central finite differences") {
  using V = std::vector<Var<double>>;
  const double tol = 1e-4;
  CHECK(fd_check([](Tape<double>&, const V& v) { return matmul(v[0], v[1]); },
                 {rnd({2, 3, 4}, 1), rnd({4, 2}, 2)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return matmul(v[0], v[1]); },
                 {rnd({2, 3, 4}, 3), rnd({2, 4, 2}, 4)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return transpose(v[0]); }, {rnd({2, 3, 4}, 5)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return add(v[0], v[1]); },
                 {rnd({3, 4}, 6), rnd({4}, 7)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return scale(v[0], -2.5); }, {rnd({3, 2}, 8)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return row_softmax(v[0]); }, {rnd({2, 3, 4}, 9)}) < tol);
  CHECK(fd_check(
            [](Tape<double>&, const V& v) {
              static const std::vector<std::uint8_t> valid{1, 0, 1, 1, 1, 1, 0, 1};
              return masked_row_softmax(v[0], std::span<const std::uint8_t>(valid));
            },
            {rnd({2, 3, 4}, 10)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return relu(v[0]); }, {rnd({4, 5}, 11)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return leaky_relu(v[0], 0.1); }, {rnd({4, 5}, 12)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return sigmoid(v[0]); }, {rnd({4, 5}, 13)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return mean_over_axis(v[0], 1); }, {rnd({2, 3, 4}, 14)}) < tol);
  CHECK(fd_check(
            [](Tape<double>&, const V& v) {
              const std::vector<Var<double>> parts{v[0], v[1]};
              return concat_last_axis(std::span<const Var<double>>(parts));
            },
            {rnd({2, 3}, 15), rnd({2, 2}, 16)}) < tol);
  CHECK(fd_check(
            [](Tape<double>&, const V& v) {
              const std::vector<std::size_t> w{2, 3};
              auto parts = split_last_axis(v[0], std::span<const std::size_t>(w));
              const std::vector<Var<double>> swapped{parts[1], scale(parts[0], 2.0)};
              return concat_last_axis(std::span<const Var<double>>(swapped));
            },
            {rnd({2, 5}, 17)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return layer_norm(v[0], 1e-5); }, {rnd({3, 6}, 18)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return elementwise_mul(v[0], v[1]); },
                 {rnd({3, 4}, 19), rnd({3, 4}, 20)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return elementwise_mul(v[0], v[1]); },
                 {rnd({3, 4}, 21), rnd({4}, 22)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return log(sigmoid(v[0])); }, {rnd({3, 3}, 23)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return power(sigmoid(v[0]), 1.7); }, {rnd({3, 3}, 24)}) < tol);
  CHECK(fd_check([](Tape<double>&, const V& v) { return reshape(v[0], Shape{6, 2}); }, {rnd({3, 4}, 25)}) < tol);
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    Tape<double> tape;
    auto a = tape.variable(rnd({3, 5}, 30));
    auto b = tape.variable(rnd({5, 4}, 31));
    auto loss = sum(layer_norm(row_softmax(matmul(a, b)), 1e-5));
    tape.backward(loss);
    return std::make_pair(tape.grad(a), tape.grad(b));
  };
  const auto r1 = run(), r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("check_finite flags non-finite forward outputs") {
  TapeOptions<double> opts;
  opts.check_finite = true;
  Tape<double> tape(opts);
  auto x = tape.constant(T64({2}, -1.0));
  CHECK_THROWS_AS(log(x), NumericError);
}
