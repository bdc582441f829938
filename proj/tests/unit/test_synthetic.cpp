#include <doctest.h>

#include <cmath>

#include "miam/synthetic.hpp"

using namespace miam;

namespace {

double observed_rate(const Dataset& ds, int label) {
  double obs = 0, total = 0;
  for (const auto& s : ds.samples) {
    if (label >= 0 && s.label != label) continue;
    obs += static_cast<double>(s.observed_count());
    total += static_cast<double>(s.mask.data.size());
  }
  return obs / total;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  SyntheticConfig c;
  c.n_samples = 20;
  c.seed = 4;
  const auto a = generate(c), b = generate(c);
  CHECK(a.dataset == b.dataset);
  CHECK(a.latents == b.latents);
  c.seed = 5;
  CHECK_FALSE(generate(c).dataset == a.dataset);
}

TEST_CASE("samples are valid and shaped by the configuration") {
  SyntheticConfig c;
  c.n_samples = 50;
  c.num_variables = 6;
  c.t_min = 3;
  c.t_max = 9;
  const auto g = generate(c);
  CHECK(g.dataset.size() == 50);
  CHECK(g.dataset.num_variables == 6);
  for (std::size_t i = 0; i < g.dataset.size(); ++i) {
    const auto& s = g.dataset.samples[i];
    CHECK(validate_sample(s).empty());
    CHECK(s.length() >= 3);
    CHECK(s.length() <= 9);
    CHECK(s.timestamps.back() <= c.horizon);
    CHECK(g.latents[i].rows == s.length());
    for (std::size_t j = 0; j < s.length(); ++j)
      for (std::size_t d = 0; d < 6; ++d)
        if (s.mask(j, d)) CHECK(std::abs(s.values(j, d) - g.latents[i](j, d)) < 0.5);
  }
}

TEST_CASE("no missingness gives a full mask") {
  SyntheticConfig c;
  c.n_samples = 10;
  c.missing_p = 0;
  for (const auto& s : generate(c).dataset.samples)
    for (auto m : s.mask.data) CHECK(m == 1);
}

TEST_CASE("observation rate is within three standard errors of the target") {
  SyntheticConfig c;
  c.n_samples = 400;
  c.missing_p = 0.3;
  const auto ds = generate(c).dataset;
  double total = 0;
  for (const auto& s : ds.samples) total += static_cast<double>(s.mask.data.size());
  const double se = std::sqrt(0.7 * 0.3 / total);
  CHECK(std::abs(observed_rate(ds, -1) - 0.7) < 3 * se);
}

TEST_CASE("missing-rate labels set class-dependent missingness") {
  SyntheticConfig c;
  c.n_samples = 400;
  c.label_rule = LabelRule::kMissingRate;
  const auto ds = generate(c).dataset;
  CHECK(std::abs(observed_rate(ds, 0) - 0.8) < 0.03);
  CHECK(std::abs(observed_rate(ds, 1) - 0.2) < 0.03);
  CHECK(ds.positives() > 150);
  CHECK(ds.positives() < 250);
}

TEST_CASE("hidden-mask values carry the same non-zero rate in both classes") {
  SyntheticConfig c;
  c.n_samples = 600;
  c.label_rule = LabelRule::kMissingRate;
  c.hide_mask_in_values = true;
  const auto ds = generate(c).dataset;
  double nz[2] = {0, 0}, total[2] = {0, 0};
  for (const auto& s : ds.samples) {
    for (double v : s.values.data) nz[*s.label] += v != 0;
    total[*s.label] += static_cast<double>(s.values.data.size());
  }
  CHECK(std::abs(nz[0] / total[0] - 0.2) < 0.03);
  CHECK(std::abs(nz[1] / total[1] - 0.2) < 0.03);
  c.label_rule = LabelRule::kLatentAmplitude;
  CHECK_THROWS_AS(generate(c), ConfigError);
}

TEST_CASE("informative missingness observes large amplitudes more often") {
  SyntheticConfig c;
  c.n_samples = 300;
  c.regime = MissingRegime::kInformative;
  c.threshold = 0.8;
  const auto g = generate(c);
  double obs[2] = {0, 0}, total[2] = {0, 0};
  for (std::size_t i = 0; i < g.dataset.size(); ++i) {
    const auto& s = g.dataset.samples[i];
    for (std::size_t k = 0; k < s.mask.data.size(); ++k) {
      const int high = std::abs(g.latents[i].data[k]) > 0.8;
      obs[high] += s.mask.data[k];
      total[high] += 1;
    }
  }
  CHECK(std::abs(obs[1] / total[1] - 0.9) < 0.03);
  CHECK(std::abs(obs[0] / total[0] - 0.3) < 0.03);
}

TEST_CASE("label temperature zero is a hard amplitude threshold") {
  SyntheticConfig c;
  c.n_samples = 200;
  const auto ds = generate(c).dataset;
  CHECK(ds.positives() > 70);
  CHECK(ds.positives() < 130);
  c.t_min = 0;
  CHECK_THROWS_AS(generate(c), ConfigError);
}
