#include "miam/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "miam/errors.hpp"
#include "miam/random.hpp"

namespace miam {

const char* to_string(MissingRegime r) {
  return r == MissingRegime::kMcar ? "mcar" : "informative";
}

const char* to_string(LabelRule r) {
  return r == LabelRule::kLatentAmplitude ? "latent-amplitude" : "missing-rate";
}

MissingRegime parse_missing_regime(const std::string& s) {
  if (s == "mcar") return MissingRegime::kMcar;
  if (s == "informative" || s == "threshold") return MissingRegime::kInformative;
  throw ConfigError("unknown missingness regime '" + s + "' (mcar, informative)");
}

LabelRule parse_label_rule(const std::string& s) {
  if (s == "latent-amplitude" || s == "amplitude") return LabelRule::kLatentAmplitude;
  if (s == "missing-rate") return LabelRule::kMissingRate;
  throw ConfigError("unknown label rule '" + s + "' (latent-amplitude, missing-rate)");
}

void SyntheticConfig::validate() const {
  auto prob = [](double p) { return p >= 0 && p <= 1; };
  if (num_variables == 0) throw ConfigError("synthetic: num_variables must be >= 1");
  if (t_min < 1 || t_min > t_max) throw ConfigError("synthetic: need 1 <= t_min <= t_max");
  if (!(horizon > 0)) throw ConfigError("synthetic: horizon must be positive");
  if (n_factors == 0) throw ConfigError("synthetic: n_factors must be >= 1");
  if (!(freq_min >= 0 && freq_min <= freq_max)) throw ConfigError("synthetic: bad frequency range");
  if (!(amp_min >= 0 && amp_min <= amp_max)) throw ConfigError("synthetic: bad amplitude range");
  if (!(noise_std >= 0)) throw ConfigError("synthetic: noise_std must be >= 0");
  if (!prob(missing_p) || !prob(missing_p_neg) || !prob(missing_p_pos) || !prob(observe_low) ||
      !prob(observe_high) || !prob(prevalence)) {
    throw ConfigError("synthetic: probabilities must lie in [0, 1]");
  }
  if (!(label_temperature >= 0)) throw ConfigError("synthetic: label_temperature must be >= 0");
  if (hide_mask_in_values &&
      (label_rule != LabelRule::kMissingRate || regime != MissingRegime::kMcar))
    throw ConfigError("synthetic: hide_mask_in_values needs mcar with the missing-rate label rule");
}

SyntheticData generate(const SyntheticConfig& c) {
  c.validate();
  const std::size_t D = c.num_variables, K = c.n_factors;
  constexpr double kTwoPi = 2 * std::numbers::pi;

  std::vector<double> loadings(D * K);
  {
    std::mt19937_64 rng(derive_seed(c.seed, {~std::uint64_t{0}}));
    std::normal_distribution<double> n01;
    for (std::size_t d = 0; d < D; ++d) {
      double norm = 0;
      for (std::size_t k = 0; k < K; ++k) {
        loadings[d * K + k] = n01(rng);
        norm += loadings[d * K + k] * loadings[d * K + k];
      }
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < K; ++k) loadings[d * K + k] /= norm > 0 ? norm : 1;
    }
  }

  SyntheticData out;
  out.dataset.num_variables = D;
  for (std::size_t d = 0; d < D; ++d) out.dataset.vocabulary.push_back("v" + std::to_string(d));
  out.dataset.samples.reserve(c.n_samples);
  out.latents.reserve(c.n_samples);

  const double amp_mid = 0.5 * (c.amp_min + c.amp_max);

  for (std::size_t n = 0; n < c.n_samples; ++n) {
    std::mt19937_64 rng(derive_seed(c.seed, {n}));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, c.noise_std);
    std::uniform_int_distribution<std::size_t> len(c.t_min, c.t_max);

    const std::size_t T = len(rng);
    std::vector<double> t(T);
    for (;;) {
      for (auto& x : t) x = u01(rng) * c.horizon;
      std::sort(t.begin(), t.end());
      if (std::adjacent_find(t.begin(), t.end()) == t.end()) break;
    }

    std::vector<double> amp(K), freq(K), phase(K);
    for (std::size_t k = 0; k < K; ++k) {
      amp[k] = c.amp_min + (c.amp_max - c.amp_min) * u01(rng);
      freq[k] = c.freq_min + (c.freq_max - c.freq_min) * u01(rng);
      phase[k] = kTwoPi * u01(rng);
    }

    int label = 0;
    if (c.label_rule == LabelRule::kMissingRate) {
      label = u01(rng) < c.prevalence ? 1 : 0;
    } else if (c.label_temperature == 0) {
      label = amp[0] > amp_mid ? 1 : 0;
    } else {
      const double p = 1 / (1 + std::exp(-(amp[0] - amp_mid) / c.label_temperature));
      label = u01(rng) < p ? 1 : 0;
    }

    RealMatrix latent(T, D, 0.0), x(T, D, 0.0);
    MaskMatrix m(T, D, 0);
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t d = 0; d < D; ++d) {
        double z = 0;
        for (std::size_t k = 0; k < K; ++k)
          z += loadings[d * K + k] * amp[k] * std::sin(kTwoPi * freq[k] * t[j] + phase[k]);
        latent(j, d) = z;
      }
    }
    double p_missing = c.missing_p;
    if (c.label_rule == LabelRule::kMissingRate)
      p_missing = label == 1 ? c.missing_p_pos : c.missing_p_neg;
    // Keeping a non-zero value with prob obs_min / obs equalises the
    // non-zero rate across classes at the smaller observation rate.
    const double obs_rate = 1 - p_missing;
    const double obs_min = 1 - std::max(c.missing_p_neg, c.missing_p_pos);
    const double keep = obs_rate > 0 ? obs_min / obs_rate : 1.0;
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t d = 0; d < D; ++d) {
        const double z = latent(j, d);
        bool observed = false;
        if (c.regime == MissingRegime::kMcar) {
          observed = u01(rng) >= p_missing;
        } else {
          observed = u01(rng) < (std::abs(z) > c.threshold ? c.observe_high : c.observe_low);
        }
        // Draw both variates unconditionally so the stream does not depend on
        // which branch was taken.
        const double eps = c.noise_std > 0 ? noise(rng) : 0.0;
        const double keep_u = u01(rng);
        if (!observed) continue;
        m(j, d) = 1;
        double v = z + eps;
        if (c.hide_mask_in_values && keep_u >= keep) v = 0;
        x(j, d) = v;
      }
    }
    out.dataset.samples.push_back(make_sample("syn" + std::to_string(n), std::move(t), std::move(x),
                                              std::move(m), label));
    out.latents.push_back(std::move(latent));
  }
  return out;
}

}  // namespace miam
