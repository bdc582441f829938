#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "miam/autodiff.hpp"
#include "miam/data_model.hpp"

namespace testing {

inline std::vector<double> random_times(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> gap(0.05, 3.0);
  std::vector<double> t(n);
  double clock = std::uniform_real_distribution<double>(0, 2)(rng);
  for (auto& x : t) x = (clock += gap(rng));
  return t;
}

inline miam::MaskMatrix random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                    double p_observed) {
  std::bernoulli_distribution coin(p_observed);
  miam::MaskMatrix m(rows, cols);
  for (auto& v : m.data) v = coin(rng) ? 1 : 0;
  return m;
}

inline miam::ad::Tensor<double> random_tensor(std::mt19937_64& rng, miam::ad::Shape shape,
                                              double scale = 1.0) {
  std::normal_distribution<double> n(0, scale);
  miam::ad::Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing
