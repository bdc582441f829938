#include "miam/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "miam/errors.hpp"
#include "miam/log.hpp"
#include "miam/metrics.hpp"
#include "miam/random.hpp"

namespace miam {

using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {
enum Stream : std::uint64_t { kInitStream = 1, kShuffleStream, kMaskStream, kDropoutStream };
}  // namespace

const char* to_string(Precision p) {
  return p == Precision::kFloat64 ? "float64" : "float32";
}

Precision parse_precision(const std::string& text) {
  if (text == "float32" || text == "fp32" || text == "float" || text == "32")
    return Precision::kFloat32;
  if (text == "float64" || text == "fp64" || text == "double" || text == "64")
    return Precision::kFloat64;
  throw ConfigError("unknown precision '" + text + "' (float32 or float64)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(lr_decay > 0)) throw ConfigError("lr decay must be positive");
  if (decay_every == 0) throw ConfigError("decay_every must be >= 1");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("mask ratio must be in [0, 1)");
  if (!(focal_beta > 0)) throw ConfigError("focal beta must be positive");
  if (!(focal_gamma >= 0)) throw ConfigError("focal gamma must be >= 0");
  if (lambda_imp < 0 || lambda_cls < 0) throw ConfigError("loss weights must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw ConfigError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam eps must be positive");
  if (!(val_fraction >= 0 && val_fraction < 1))
    throw ConfigError("validation fraction must be in [0, 1)");
}

double learning_rate_at(const TrainConfig& config, std::size_t epoch) {
  return config.learning_rate *
         std::pow(config.lr_decay, static_cast<double>(epoch / config.decay_every));
}

std::size_t MaskPlan::count() const {
  return std::accumulate(per_sample.begin(), per_sample.end(), std::size_t{0});
}

CorruptedBatch sample_mask_plan(const Batch& batch, double ratio, std::mt19937_64& rng,
                                bool recompute_intervals) {
  if (!(ratio >= 0 && ratio < 1)) throw ConfigError("mask ratio must be in [0, 1)");
  CorruptedBatch out{batch, {}};
  auto& plan = out.plan;
  plan.hidden.assign(batch.values.size(), 0);
  plan.per_sample.assign(batch.size, 0);
  const std::size_t T = batch.max_len, D = batch.num_variables;
  std::vector<std::size_t> observed;
  for (std::size_t b = 0; b < batch.size; ++b) {
    observed.clear();
    for (std::size_t j = 0; j < batch.lengths[b]; ++j)
      for (std::size_t d = 0; d < D; ++d)
        if (batch.mask[batch.offset(b, j, d)] != 0) observed.push_back(batch.offset(b, j, d));
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(observed.size())));
    // Partial Fisher-Yates: the first k slots become a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, observed.size() - 1);
      std::swap(observed[i], observed[pick(rng)]);
      const auto o = observed[i];
      plan.hidden[o] = 1;
      out.batch.values[o] = 0;
      out.batch.mask[o] = 0;
    }
    plan.per_sample[b] = k;
    if (recompute_intervals && k > 0) {
      for (std::size_t j = 0; j < batch.lengths[b]; ++j) {
        for (std::size_t d = 0; d < D; ++d) {
          double& delta = out.batch.intervals[batch.offset(b, j, d)];
          if (j == 0) {
            delta = 0;
            continue;
          }
          const double gap = batch.timestamps[b * T + j] - batch.timestamps[b * T + j - 1];
          const auto prev = batch.offset(b, j - 1, d);
          delta = out.batch.mask[prev] != 0 ? gap : gap + out.batch.intervals[prev];
        }
      }
    }
  }
  return out;
}

// Losses --------------------------------------------------------------------

namespace {

double clamp_p(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

// d focal_term / dp, zero where the clamp is active.
double focal_grad(double p, int label, double beta, double gamma) {
  if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) return 0;
  if (label == 1) {
    const double q = 1 - p;
    const double dq = gamma == 0 ? 0 : gamma * std::pow(q, gamma - 1) * std::log(p);
    return beta * (dq - std::pow(q, gamma) / p);
  }
  const double dp = gamma == 0 ? 0 : gamma * std::pow(p, gamma - 1) * std::log(1 - p);
  return -dp + std::pow(p, gamma) / (1 - p);
}

}  // namespace

double focal_term(double p, int label, double beta, double gamma) {
  const double c = clamp_p(p);
  if (label == 1) return -beta * std::pow(1 - c, gamma) * std::log(c);
  if (label == 0) return -std::pow(c, gamma) * std::log(1 - c);
  return 0;  // unlabeled
}

template <class Real>
Var<Real> focal_loss(Var<Real> probabilities, std::span<const int> labels, double beta,
                     double gamma) {
  const auto& p = probabilities.value();
  if (p.size() != labels.size()) {
    throw ShapeError("focal_loss: " + std::to_string(p.size()) + " probabilities for " +
                     std::to_string(labels.size()) + " labels");
  }
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    total += focal_term(static_cast<double>(p[i]), labels[i], beta, gamma);
  std::vector<int> y(labels.begin(), labels.end());
  const auto in = probabilities.id;
  return probabilities.tape->record(
      ad::OpKind::kCustom, Tensor<Real>(Shape{}, Real(total)), {in},
      [in, y = std::move(y), beta, gamma](ad::Tape<Real>& t, const typename ad::Tape<Real>::Node& n) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        const auto& pv = t.value(in);
        const double up = static_cast<double>(n.grad[0]);
        for (std::size_t i = 0; i < pv.size(); ++i) {
          if (y[i] != 0 && y[i] != 1) continue;
          (*g)[i] += Real(up * focal_grad(static_cast<double>(pv[i]), y[i], beta, gamma));
        }
      });
}

namespace {

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

}  // namespace

template <class Real>
Var<Real> focal_loss_logits(Var<Real> logits, std::span<const int> labels, double beta,
                            double gamma) {
  const auto& z = logits.value();
  if (z.size() != labels.size()) {
    throw ShapeError("focal_loss: " + std::to_string(z.size()) + " logits for " +
                     std::to_string(labels.size()) + " labels");
  }
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = static_cast<double>(z[i]);
    total += focal_term(std::exp(log_sigmoid(zi)), labels[i], beta, gamma);
  }
  std::vector<int> y(labels.begin(), labels.end());
  const auto in = logits.id;
  return logits.tape->record(
      ad::OpKind::kCustom, Tensor<Real>(Shape{}, Real(total)), {in},
      [in, y = std::move(y), beta, gamma](ad::Tape<Real>& t, const typename ad::Tape<Real>::Node& n) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        const auto& zv = t.value(in);
        const double up = static_cast<double>(n.grad[0]);
        for (std::size_t i = 0; i < zv.size(); ++i) {
          const double zi = static_cast<double>(zv[i]);
          const double lp = log_sigmoid(zi), lq = log_sigmoid(-zi);
          const double p = std::exp(lp), q = std::exp(lq);
          double d = 0;
          if (y[i] == 1) d = beta * std::pow(q, gamma) * (gamma * p * lp - q);
          else if (y[i] == 0) d = std::pow(p, gamma) * (p - gamma * q * lq);
          (*g)[i] += Real(up * d);
        }
      });
}

template <class Real>
Var<Real> imputation_loss(Var<Real> imputed, std::span<const double> target,
                          std::span<const std::uint8_t> hidden, std::size_t n_samples) {
  const auto& xh = imputed.value();
  if (xh.size() != target.size() || xh.size() != hidden.size()) {
    throw ShapeError("imputation_loss: prediction " + ad::shape_string(xh.shape()) +
                     " does not match target/mask size " + std::to_string(target.size()));
  }
  if (n_samples == 0) throw InvalidInputError("imputation_loss: empty batch");
  double total = 0;
  for (std::size_t i = 0; i < xh.size(); ++i) {
    if (!hidden[i]) continue;
    const double e = target[i] - static_cast<double>(xh[i]);
    total += e * e;
  }
  const double inv_n = 1.0 / static_cast<double>(n_samples);
  std::vector<double> tgt(target.begin(), target.end());
  std::vector<std::uint8_t> m(hidden.begin(), hidden.end());
  const auto in = imputed.id;
  return imputed.tape->record(
      ad::OpKind::kCustom, Tensor<Real>(Shape{}, Real(total * inv_n)), {in},
      [in, tgt = std::move(tgt), m = std::move(m), inv_n](ad::Tape<Real>& t,
                                                           const typename ad::Tape<Real>::Node& n) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        const auto& pv = t.value(in);
        const double up = static_cast<double>(n.grad[0]);
        for (std::size_t i = 0; i < pv.size(); ++i) {
          if (!m[i]) continue;
          (*g)[i] += Real(up * 2.0 * inv_n * (static_cast<double>(pv[i]) - tgt[i]));
        }
      });
}

template <class Real>
Var<Real> composite_loss(Var<Real> cls, std::optional<Var<Real>> imp, double lambda_cls,
                         double lambda_imp) {
  auto total = ad::scale(cls, lambda_cls);
  if (imp) total = ad::add(total, ad::scale(*imp, lambda_imp));
  return total;
}

// RAdam ---------------------------------------------------------------------

double radam_rho(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

double radam_rectifier(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double rho = radam_rho(t, beta2);
  return std::sqrt(((rho - 4) * (rho - 2) * rho_inf) / ((rho_inf - 4) * (rho_inf - 2) * rho));
}

template <class Real>
RAdamState<Real> radam_init(const ParameterSet<Real>& params) {
  return {params.zeros_like(), params.zeros_like(), 0, 0};
}

template <class Real>
bool radam_step(ParameterSet<Real>& params, const ParameterSet<Real>& grads,
                RAdamState<Real>& state, double lr, const RAdamConfig& config) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ContractError("radam_step: parameter/gradient/state sets differ");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads.tensor(i).all_finite()) {
      ++state.skipped;
      log(LogLevel::kWarn, "skipping optimizer step: non-finite gradient in " + grads.name(i));
      return false;
    }
  }
  const std::size_t t = ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1 - std::pow(b2, static_cast<double>(t));
  const bool rectified = radam_rho(t, b2) > 4;
  const double r = rectified ? radam_rectifier(t, b2) : 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.tensor(i).data();
    auto g = grads.tensor(i).data();
    auto m = state.m.tensor(i).data();
    auto v = state.v.tensor(i).data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = b1 * static_cast<double>(m[k]) + (1 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1 - b2) * gk * gk;
      m[k] = Real(mk);
      v[k] = Real(vk);
      const double m_hat = mk / bc1;
      double step = m_hat;
      if (rectified) step = r * m_hat / (std::sqrt(vk / bc2) + config.eps);
      else if (!config.sgd_warmup) step = 0;
      p[k] = Real(static_cast<double>(p[k]) - lr * step);
    }
  }
  return true;
}

// Training loop -------------------------------------------------------------

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history,
                       const std::string& fingerprint) {
  os << "# fingerprint=" << fingerprint << '\n';
  os << "epoch,lr,steps,loss,cls_loss,imp_loss,val_auc,val_auprc,train_auc,train_auprc\n";
  char buf[512];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.epoch, r.learning_rate, r.steps, r.loss, r.cls_loss, r.imp_loss, r.val_auc,
                  r.val_auprc, r.train_auc, r.train_auprc);
    os << buf;
  }
}

std::vector<std::vector<std::size_t>> make_epoch_batches(const Dataset& data,
                                                         const TrainConfig& config,
                                                         std::size_t epoch) {
  std::mt19937_64 rng(derive_seed(config.seed, {kShuffleStream, epoch}));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t bs = config.batch_size;
  if (config.bucket_batches > 1) {
    const std::size_t chunk = bs * config.bucket_batches;
    for (std::size_t start = 0; start < order.size(); start += chunk) {
      auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
      auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + chunk));
      std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
        return data.samples[a].length() < data.samples[b].length();
      });
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0 && fraction < 1)) throw ConfigError("validation fraction must be in [0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, val;
  for (int cls : {1, 0, -1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.samples[i].label.value_or(-1) == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

template <class Real>
BatchLoss<Real> batch_loss(const ParameterSet<Real>& params, const ModelConfig& model,
                           const TrainConfig& config, const CorruptedBatch& input,
                           const Batch& original, std::mt19937_64* dropout_rng, bool with_grad,
                           const ad::TapeOptions<Real>& tape_options) {
  ad::Tape<Real> tape(tape_options);
  BoundParams<Real> bound(tape, params, with_grad);
  ForwardContext<Real> ctx{tape, model, bound, Mode::kTrain, dropout_rng};
  auto out = forward(ctx, input.batch);
  auto cls = focal_loss_logits(out.logits, input.batch.labels, config.focal_beta,
                               config.focal_gamma);
  std::optional<Var<Real>> imp;
  if (out.imputed) {
    imp = imputation_loss(*out.imputed, original.values, input.plan.hidden, input.batch.size);
  }
  auto total = composite_loss(cls, imp, config.lambda_cls, config.lambda_imp);
  BatchLoss<Real> result;
  result.total = static_cast<double>(total.value().item());
  result.cls = static_cast<double>(cls.value().item());
  result.imp = imp ? static_cast<double>(imp->value().item()) : 0.0;
  if (with_grad) {
    tape.backward(total);
    result.grads = bound.gradients(params);
  }
  return result;
}

template <class Real>
TrainResult<Real> train(const Dataset& train_split, const Dataset& val_split,
                        const ModelConfig& model, const TrainConfig& config,
                        std::optional<TrainState<Real>> resume,
                        const std::function<void(const TrainState<Real>&)>& on_epoch) {
  config.validate();
  model.validate();
  if (train_split.size() == 0) throw InvalidInputError("training split is empty");
  if (train_split.num_variables != model.num_variables) {
    throw ConfigError("model expects " + std::to_string(model.num_variables) +
                      " variables but the data has " + std::to_string(train_split.num_variables));
  }
  TrainResult<Real> result;
  auto& st = result.state;
  if (resume) {
    st = std::move(*resume);
  } else {
    st.params = init_params<Real>(model, derive_seed(config.seed, {kInitStream}));
    st.optimizer = radam_init(st.params);
    st.best_params = st.params;
  }
  const RAdamConfig adam{config.adam_beta1, config.adam_beta2, config.adam_eps,
                         config.radam_sgd_warmup};
  std::vector<int> val_labels, train_labels;
  for (const auto& s : val_split.samples) val_labels.push_back(s.label.value_or(-1));
  for (const auto& s : train_split.samples) train_labels.push_back(s.label.value_or(-1));
  const bool val_labelled =
      std::none_of(val_labels.begin(), val_labels.end(), [](int y) { return y < 0; });

  ad::TapeOptions<Real> tape_options;
  tape_options.check_finite = false;  // divergence is detected on the loss instead

  auto steps_taken = [&] { return st.optimizer.step + st.optimizer.skipped; };
  bool capped = config.max_steps > 0 && steps_taken() >= config.max_steps;

  for (std::size_t epoch = st.next_epoch; epoch < config.epochs && !capped; ++epoch) {
    const double lr = learning_rate_at(config, epoch);
    std::mt19937_64 mask_rng(derive_seed(config.seed, {kMaskStream, epoch}));
    std::mt19937_64 dropout_rng(derive_seed(config.seed, {kDropoutStream, epoch}));
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = lr;
    std::size_t n_batches = 0;
    for (const auto& idx : make_epoch_batches(train_split, config, epoch)) {
      if (config.max_steps > 0 && steps_taken() >= config.max_steps) {
        capped = true;
        break;
      }
      const Batch batch = make_batch(train_split, idx);
      const auto corrupted = sample_mask_plan(batch, config.mask_ratio, mask_rng,
                                              config.recompute_intervals);
      BatchLoss<Real> loss;
      try {
        loss = batch_loss(st.params, model, config, corrupted, batch, &dropout_rng, true,
                          tape_options);
      } catch (const NumericError& e) {
        loss.total = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(loss.total)) {
        result.diverged = true;
        result.message = "loss became non-finite at epoch " + std::to_string(epoch + 1) +
                         ", step " + std::to_string(steps_taken() + 1);
        log(LogLevel::kWarn, result.message);
        return result;
      }
      radam_step(st.params, loss.grads, st.optimizer, lr, adam);
      rec.loss += loss.total;
      rec.cls_loss += loss.cls;
      rec.imp_loss += loss.imp;
      ++n_batches;
    }
    if (n_batches == 0) break;
    rec.loss /= static_cast<double>(n_batches);
    rec.cls_loss /= static_cast<double>(n_batches);
    rec.imp_loss /= static_cast<double>(n_batches);
    rec.steps = st.optimizer.step;
    if (val_split.size() > 0 && val_labelled) {
      const auto probs = predict(st.params, model, val_split, config.batch_size);
      rec.val_auc = auc_or_nan(probs, val_labels);
      rec.val_auprc = auprc_or_nan(probs, val_labels);
    }
    if (config.track_train_metrics) {
      const auto probs = predict(st.params, model, train_split, config.batch_size);
      rec.train_auc = auc_or_nan(probs, train_labels);
      rec.train_auprc = auprc_or_nan(probs, train_labels);
    }
    // An untrained classifier (lambda_cls = 0) gives no basis for
    // selection, so the latest epoch is kept.
    const bool no_selection_yet = !std::isfinite(st.best_val_auc);
    if (config.lambda_cls == 0 || (std::isfinite(rec.val_auc) && rec.val_auc > st.best_val_auc) ||
        (std::isnan(rec.val_auc) && no_selection_yet)) {
      if (std::isfinite(rec.val_auc)) st.best_val_auc = rec.val_auc;
      st.best_params = st.params;
      st.best_epoch = rec.epoch;
    }
    st.history.push_back(rec);
    st.next_epoch = epoch + 1;
    {
      char buf[256];
      std::snprintf(buf, sizeof buf, "epoch %zu lr %.3g loss %.5f val_auc %.4f", rec.epoch, lr,
                    rec.loss, rec.val_auc);
      log(LogLevel::kInfo, buf);
    }
    if (on_epoch) on_epoch(st);
  }
  return result;
}

#define MIAM_INSTANTIATE(Real)                                                                 \
  template Var<Real> focal_loss(Var<Real>, std::span<const int>, double, double);              \
  template Var<Real> focal_loss_logits(Var<Real>, std::span<const int>, double, double);       \
  template Var<Real> imputation_loss(Var<Real>, std::span<const double>,                       \
                                     std::span<const std::uint8_t>, std::size_t);              \
  template Var<Real> composite_loss(Var<Real>, std::optional<Var<Real>>, double, double);      \
  template RAdamState<Real> radam_init(const ParameterSet<Real>&);                             \
  template bool radam_step(ParameterSet<Real>&, const ParameterSet<Real>&, RAdamState<Real>&,  \
                           double, const RAdamConfig&);                                        \
  template BatchLoss<Real> batch_loss(const ParameterSet<Real>&, const ModelConfig&,           \
                                      const TrainConfig&, const CorruptedBatch&, const Batch&, \
                                      std::mt19937_64*, bool, const ad::TapeOptions<Real>&);   \
  template TrainResult<Real> train(const Dataset&, const Dataset&, const ModelConfig&,         \
                                   const TrainConfig&, std::optional<TrainState<Real>>,        \
                                   const std::function<void(const TrainState<Real>&)>&);

MIAM_INSTANTIATE(float)
MIAM_INSTANTIATE(double)

#undef MIAM_INSTANTIATE

}  // namespace miam
