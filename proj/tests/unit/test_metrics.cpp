#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "miam/evaluation.hpp"
#include "miam/metrics.hpp"
#include "miam/synthetic.hpp"

using namespace miam;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        den += 1;
      }
  return num / den;
}

// Precision and recall at each distinct threshold, highest first.
double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  std::map<double, std::pair<int, int>, std::greater<>> groups;
  int total_pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    (y[i] ? groups[s[i]].first : groups[s[i]].second)++;
    total_pos += y[i];
  }
  double ap = 0, prev_recall = 0;
  int tp = 0, fp = 0;
  for (const auto& [score, g] : groups) {
    tp += g.first;
    fp += g.second;
    const double recall = double(tp) / total_pos;
    ap += (recall - prev_recall) * double(tp) / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

TEST_CASE("AUC and AUPRC examples") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(auc(s, y) == 0.75);
  CHECK(std::abs(auprc(s, y) - 5.0 / 6) < 1e-15);
  const std::vector<double> s2{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> y2{0, 0, 1, 1};
  CHECK(auc(s2, y2) == 0.0);
  CHECK(std::abs(auprc(s2, y2) - 5.0 / 12) < 1e-15);
  const std::vector<double> flat(4, 0.3);
  CHECK(auc(flat, y) == 0.5);
  CHECK(auprc(flat, y) == 0.5);
}

TEST_CASE("metrics are undefined with a missing class") {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> ones{1, 1}, zeros{0, 0};
  CHECK_THROWS_AS(auc(s, ones), UndefinedMetricError);
  CHECK_THROWS_AS(auprc(s, zeros), UndefinedMetricError);
  CHECK(auprc(s, ones) == 1.0);
  CHECK(std::isnan(auc_or_nan(s, zeros)));
  const std::vector<int> three{0, 1, 2};
  const std::vector<double> s3{0.1, 0.2, 0.3};
  CHECK_THROWS_AS(auc(s3, three), InvalidInputError);
}

TEST_CASE("random instances match brute-force oracles") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 40;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 10) / 10.0;  // ties on purpose
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(std::abs(auc(s, y) - brute_auc(s, y)) < 1e-12);
    CHECK(std::abs(auprc(s, y) - brute_ap(s, y)) < 1e-12);

    auto t = s;
    for (auto& v : t) v = std::exp(3 * v) - 7;  // strictly increasing transform
    CHECK(auc(t, y) == auc(s, y));
    CHECK(auprc(t, y) == auprc(s, y));
    auto neg = s;
    for (auto& v : neg) v = -v;
    CHECK(std::abs(auc(neg, y) - (1 - auc(s, y))) < 1e-12);
  }
}

TEST_CASE("mean and population std") {
  const std::vector<double> v{0.81, 0.79, 0.85, 0.80, 0.75};
  const auto ms = mean_std(v);
  CHECK(std::abs(ms.mean - 0.8) < 1e-15);
  CHECK(std::abs(ms.std - 0.03224903099319419) < 1e-15);
  CHECK(format_mean_std(ms) == "0.8000 ± 0.0322");
  const std::vector<double> single{0.5};
  CHECK(mean_std(single).std == 0.0);
}

TEST_CASE("cross-validation on a toy problem") {
  SyntheticConfig sc;
  sc.n_samples = 24;
  sc.seed = 3;
  const auto data = generate(sc).dataset;
  RunConfig cfg;
  cfg.model.num_variables = data.num_variables;
  cfg.model.d_model = 8;
  cfg.model.n_heads = 2;
  cfg.model.d_k = cfg.model.d_v = 4;
  cfg.model.d_ffn = 8;
  cfg.model.d_hidden = 4;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  const auto folds = make_folds(data, 2, 1);
  const auto a = cross_validate(data, folds, cfg);
  REQUIRE(a.complete);
  REQUIRE(a.folds.size() == 2);
  CHECK(a.folds[0].fold == 0);
  CHECK(a.folds[1].fold == 1);
  CHECK(a.folds[0].test.n + a.folds[1].test.n == 24);
  CHECK(a.fingerprint == cfg.fingerprint());
  std::vector<double> aucs{a.folds[0].test.auc, a.folds[1].test.auc};
  CHECK(a.auc.mean == mean_std(aucs).mean);
  cfg.workers = 2;
  const auto b = cross_validate(data, folds, cfg);
  CHECK(b.to_csv() == a.to_csv());
}

TEST_CASE("a failing fold yields an incomplete report") {
  SyntheticConfig sc;
  sc.n_samples = 12;
  const auto data = generate(sc).dataset;
  RunConfig cfg;
  cfg.model.d_k = 0;
  cfg.train.epochs = 1;
  const auto r = cross_validate(data, make_folds(data, 2, 0), cfg);
  CHECK_FALSE(r.complete);
  CHECK_FALSE(r.error.empty());
}
