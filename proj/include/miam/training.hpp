#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "miam/autodiff.hpp"
#include "miam/data_model.hpp"
#include "miam/model.hpp"

namespace miam {

enum class Precision : std::uint8_t { kFloat32, kFloat64 };

const char* to_string(Precision p);
Precision parse_precision(const std::string& text);

struct TrainConfig {
  double learning_rate = 0.005;
  double lr_decay = 0.2;
  std::size_t decay_every = 10;  // epochs
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double focal_beta = 7.0;
  double focal_gamma = 0.15;
  double lambda_imp = 0.1;
  double lambda_cls = 7.0;
  double mask_ratio = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool radam_sgd_warmup = false;  // hold parameters during the first rho_t <= 4 steps
  std::uint64_t seed = 0;
  Precision precision = Precision::kFloat32;
  /// 0 means no cap; otherwise training stops after this many optimizer steps.
  std::size_t max_steps = 0;
  /// Epoch-end training-split AUC/AUPRC in the history (costs a full pass).
  bool track_train_metrics = false;
  /// Recompute Delta from the corrupted mask rather than keeping the original.
  bool recompute_intervals = false;
  /// Batches are cut from length-sorted chunks of this many batches.
  std::size_t bucket_batches = 8;
  /// Fraction carved from a training split for model selection when no
  /// validation split is supplied.
  double val_fraction = 0.2;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Learning rate for a 0-based epoch: lr * decay^(epoch / decay_every).
double learning_rate_at(const TrainConfig& config, std::size_t epoch);

// Mask plans ----------------------------------------------------------------

/// Entries of a batch hidden from the model for the imputation objective.
struct MaskPlan {
  std::vector<std::uint8_t> hidden;     // B x T x D, 1 = hidden
  std::vector<std::size_t> per_sample;  // hidden count per sample

  std::size_t count() const;
};

struct CorruptedBatch {
  Batch batch;  // hidden entries have value 0 and mask 0
  MaskPlan plan;
};

/// Hides floor(ratio * observed) observed entries per sample, chosen
/// uniformly without replacement.
CorruptedBatch sample_mask_plan(const Batch& batch, double ratio, std::mt19937_64& rng,
                                bool recompute_intervals = false);

// Losses --------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-7;

/// One sample's focal term. y = 1: -beta (1-p)^gamma log p;
/// y = 0: -p^gamma log(1-p). p is clamped to [1e-7, 1 - 1e-7].
double focal_term(double p, int label, double beta, double gamma);

/// Sum of focal terms over the batch; `probabilities` holds one entry per label.
template <class Real>
ad::Var<Real> focal_loss(ad::Var<Real> probabilities, std::span<const int> labels,
                         double beta, double gamma);

/// focal_loss evaluated on pre-sigmoid scores. The value is identical to
/// focal_loss(sigmoid(logits)); the gradient is the exact derivative of the
/// unclamped term in logit space, so saturated wrong predictions still
/// receive a gradient.
template <class Real>
ad::Var<Real> focal_loss_logits(ad::Var<Real> logits, std::span<const int> labels, double beta,
                                double gamma);

/// sum_n sum_{j,d} (M_imp * (X - Xhat))^2 / n_samples, where `target` holds X.
template <class Real>
ad::Var<Real> imputation_loss(ad::Var<Real> imputed, std::span<const double> target,
                              std::span<const std::uint8_t> hidden, std::size_t n_samples);

/// lambda_imp * imp + lambda_cls * cls; `imp` may be absent (decoder off).
template <class Real>
ad::Var<Real> composite_loss(ad::Var<Real> cls, std::optional<ad::Var<Real>> imp,
                             double lambda_cls, double lambda_imp);

// RAdam ---------------------------------------------------------------------

struct RAdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// While the variance estimate is intractable (rho_t <= 4), take the
  /// un-adapted momentum step; when false, leave parameters unchanged.
  bool sgd_warmup = true;
};

/// Length of the approximated simple moving average at step t (1-based).
double radam_rho(std::size_t t, double beta2);
/// Variance rectification term; only meaningful when radam_rho(t) > 4.
double radam_rectifier(std::size_t t, double beta2);

template <class Real>
struct RAdamState {
  ParameterSet<Real> m;
  ParameterSet<Real> v;
  std::size_t step = 0;
  std::size_t skipped = 0;  // steps refused because of non-finite gradients
};

template <class Real>
RAdamState<Real> radam_init(const ParameterSet<Real>& params);

/// One update; returns false (and leaves everything but `skipped` untouched)
/// when any gradient is non-finite.
template <class Real>
bool radam_step(ParameterSet<Real>& params, const ParameterSet<Real>& grads,
                RAdamState<Real>& state, double lr, const RAdamConfig& config);

// Training loop -------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0;
  std::size_t steps = 0;  // cumulative optimizer steps
  double loss = 0;        // mean composite loss per batch
  double cls_loss = 0;
  double imp_loss = 0;
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  double val_auprc = std::numeric_limits<double>::quiet_NaN();
  double train_auc = std::numeric_limits<double>::quiet_NaN();
  double train_auprc = std::numeric_limits<double>::quiet_NaN();
};

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history,
                       const std::string& fingerprint);

/// Everything needed to continue a run exactly where it stopped.
template <class Real>
struct TrainState {
  ParameterSet<Real> params;
  RAdamState<Real> optimizer;
  std::size_t next_epoch = 0;  // 0-based
  ParameterSet<Real> best_params;
  double best_val_auc = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;  // 1-based, 0 = none yet
  std::vector<EpochRecord> history;
};

template <class Real>
struct TrainResult {
  TrainState<Real> state;
  bool diverged = false;
  std::string message;
};

/// Batches for one epoch: shuffle, sort chunks of `bucket_batches` batches
/// by length, cut, and shuffle the batch order.
std::vector<std::vector<std::size_t>> make_epoch_batches(const Dataset& data,
                                                         const TrainConfig& config,
                                                         std::size_t epoch);

/// Stratified train/validation split of `data` (validation gets `fraction`).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const Dataset& data, double fraction, std::uint64_t seed);

/// Runs the epoch loop and keeps the parameters with the best validation
/// AUC. With an empty or single-class validation split the last epoch wins.
template <class Real>
TrainResult<Real> train(const Dataset& train_split, const Dataset& val_split,
                        const ModelConfig& model, const TrainConfig& config,
                        std::optional<TrainState<Real>> resume = std::nullopt,
                        const std::function<void(const TrainState<Real>&)>& on_epoch = {});

/// Composite-loss gradient for one batch under a given mask plan; shared by
/// the optimizer loop and the gradient checker.
template <class Real>
struct BatchLoss {
  double total = 0;
  double cls = 0;
  double imp = 0;
  ParameterSet<Real> grads;
};

template <class Real>
BatchLoss<Real> batch_loss(const ParameterSet<Real>& params, const ModelConfig& model,
                           const TrainConfig& config, const CorruptedBatch& input,
                           const Batch& original, std::mt19937_64* dropout_rng,
                           bool with_grad, const ad::TapeOptions<Real>& tape_options = {});

}  // namespace miam
