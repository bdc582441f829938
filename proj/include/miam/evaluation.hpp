#pragma once

#include <string>
#include <vector>

#include "miam/data_model.hpp"
#include "miam/ingestion.hpp"
#include "miam/metrics.hpp"
#include "miam/run_config.hpp"
#include "miam/training.hpp"

namespace miam {

struct FoldResult {
  std::size_t fold = 0;
  MetricsReport test;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t best_epoch = 0;
  double best_val_auc = 0;
  std::size_t steps = 0;
};

struct CrossValReport {
  std::vector<FoldResult> folds;  // fold order
  MeanStd auc;
  MeanStd auprc;
  std::string fingerprint;
  bool complete = true;
  std::string error;  // first failure when incomplete

  /// Recomputes the aggregates from the per-fold rows.
  void aggregate();
  std::string to_csv() const;
  /// Table with "m ± s" cells.
  std::string to_table() const;
};

/// Model trained on one split plus the statistics it was fitted with.
struct FittedModel {
  RunConfig config;
  std::optional<NormalizationStats> normalization;
  TrainState<double> state;  // parameters held at 64 bits whatever the precision
  std::size_t n_train = 0;  // after the validation carve-out
  std::size_t n_val = 0;
  bool diverged = false;
  std::string message;
};

/// Fits normalization on `train` (when enabled), carves a stratified
/// validation split from it, and trains.
FittedModel fit_model(const Dataset& train, const RunConfig& config, std::uint64_t split_seed);

/// Probabilities on raw (unnormalized) data, using the stored statistics.
std::vector<double> score(const FittedModel& model, const Dataset& raw);

/// Runs every fold of `folds` (up to config.workers at once) and reports
/// per-fold test metrics with population-std aggregates. A failing fold
/// stops scheduling new folds and yields an incomplete report.
CrossValReport cross_validate(const Dataset& raw, const FoldManifest& folds, const RunConfig& config);

std::vector<int> labels_of(const Dataset& data);

struct ImputationReport {
  std::vector<RealMatrix> imputed;  // decoder output, T x D per sample
  std::size_t hidden = 0;           // entries held out
  double masked_mse = 0;            // mean over held-out entries vs. observed value
  double zero_mse = 0;              // same for the constant-zero predictor
  std::optional<double> latent_mse;       // vs. the noise-free signal, if given
  std::optional<double> latent_zero_mse;
};

/// Hides `ratio` of the observed entries of each sample (seeded), runs the
/// decoder in eval mode on the corrupted input and scores the held-out
/// entries. `latents`, when given, must be in the same units as `data`.
template <class Real>
ImputationReport evaluate_imputation(const ParameterSet<Real>& params, const ModelConfig& model,
                                     const Dataset& data, double ratio, std::uint64_t seed,
                                     const std::vector<RealMatrix>* latents = nullptr,
                                     std::size_t batch_size = 64);

}  // namespace miam
