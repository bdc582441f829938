#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miam/data_model.hpp"

namespace miam {

enum class MissingRegime : std::uint8_t {
  kMcar,         // every entry missing with probability p (class-conditional
                 // under LabelRule::kMissingRate)
  kInformative,  // observed with observe_high when |latent| > threshold, else observe_low
};

enum class LabelRule : std::uint8_t {
  kLatentAmplitude,  // label from the amplitude of the first latent factor
  kMissingRate,      // label drawn first; it sets the missing probability
};

const char* to_string(MissingRegime r);
const char* to_string(LabelRule r);
MissingRegime parse_missing_regime(const std::string& s);
LabelRule parse_label_rule(const std::string& s);

/// Latent model: for sample n, factor k is a_k sin(2 pi f_k t + phi_k) with
/// per-sample amplitude, frequency and phase; variable d is sum_k W[d,k]
/// factor_k(t) with a shared loading matrix W (rows scaled to unit norm).
/// Observations add N(0, noise_std^2). Timestamps are T sorted uniform draws
/// on [0, horizon] (a Poisson process conditioned on its count), T uniform in
/// [t_min, t_max].
struct SyntheticConfig {
  std::size_t n_samples = 256;
  std::size_t num_variables = 4;
  std::size_t t_min = 8;
  std::size_t t_max = 24;
  double horizon = 48.0;
  std::size_t n_factors = 2;
  double freq_min = 0.02;  // cycles per hour
  double freq_max = 0.08;
  double amp_min = 0.5;
  double amp_max = 1.5;
  double noise_std = 0.05;

  MissingRegime regime = MissingRegime::kMcar;
  double missing_p = 0.3;
  double missing_p_neg = 0.2;  // kMissingRate: class 0
  double missing_p_pos = 0.8;  // kMissingRate: class 1
  double threshold = 1.0;      // kInformative
  double observe_low = 0.3;
  double observe_high = 0.9;

  LabelRule label_rule = LabelRule::kLatentAmplitude;
  double prevalence = 0.5;         // kMissingRate
  double label_temperature = 0.0;  // kLatentAmplitude; 0 gives a hard threshold
  /// Sets observed values to 0 at a class-dependent rate so that the count
  /// of non-zero values has the same distribution in both classes; the mask
  /// then carries information the values do not.
  bool hide_mask_in_values = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Dataset dataset;
  std::vector<RealMatrix> latents;  // noise-free signal, T x D per sample
};

/// Deterministic in config.seed; each sample uses its own derived stream.
SyntheticData generate(const SyntheticConfig& config);

}  // namespace miam
