#include "miam/evaluation.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "miam/errors.hpp"
#include "miam/io.hpp"
#include "miam/log.hpp"
#include "miam/random.hpp"

namespace miam {

std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const auto& s : data.samples) y.push_back(s.label.value_or(-1));
  return y;
}

void CrossValReport::aggregate() {
  std::vector<double> a, p;
  for (const auto& f : folds) {
    a.push_back(f.test.auc);
    p.push_back(f.test.auprc);
  }
  auc = mean_std(a);
  auprc = mean_std(p);
}

std::string CrossValReport::to_csv() const {
  std::ostringstream os;
  os << "# fingerprint=" << fingerprint << "\n";
  os << "# auprc=average_precision std=population\n";
  os << "fold,n_train,n_val,n_test,positives,best_epoch,best_val_auc,steps,auc,auprc\n";
  char buf[512];
  for (const auto& f : folds) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%zu,%zu,%.17g,%zu,%.17g,%.17g\n", f.fold,
                  f.n_train, f.n_val, f.test.n, f.test.positives, f.best_epoch, f.best_val_auc,
                  f.steps, f.test.auc, f.test.auprc);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,,,,,,,,%.17g,%.17g\nstd,,,,,,,,%.17g,%.17g\n", auc.mean,
                auprc.mean, auc.std, auprc.std);
  os << buf;
  return os.str();
}

std::string CrossValReport::to_table() const {
  std::ostringstream os;
  char buf[256];
  os << "fold   n_test  pos   AUC     AUPRC\n";
  for (const auto& f : folds) {
    std::snprintf(buf, sizeof buf, "%-6zu %-7zu %-5zu %.4f  %.4f\n", f.fold, f.test.n,
                  f.test.positives, f.test.auc, f.test.auprc);
    os << buf;
  }
  os << "AUC    " << format_mean_std(auc) << "\n";
  os << "AUPRC  " << format_mean_std(auprc) << "\n";
  if (!complete) os << "INCOMPLETE: " << error << "\n";
  os << "(AUPRC = average precision; std over folds, population)\n";
  os << "fingerprint " << fingerprint << "\n";
  return os.str();
}

namespace {

template <class Real>
void train_into(FittedModel& out, const Dataset& tr, const Dataset& val) {
  auto result = train<Real>(tr, val, out.config.model, out.config.train);
  out.state = cast_state<double>(result.state);
  out.diverged = result.diverged;
  out.message = result.message;
}

}  // namespace

FittedModel fit_model(const Dataset& train_data, const RunConfig& config, std::uint64_t split_seed) {
  config.validate();
  FittedModel out;
  out.config = config;
  out.config.model.num_variables = train_data.num_variables;
  auto [tr_idx, val_idx] = split_validation(train_data, config.train.val_fraction, split_seed);
  Dataset tr = train_data.subset(tr_idx);
  Dataset val = train_data.subset(val_idx);
  out.n_train = tr.size();
  out.n_val = val.size();
  if (config.normalize) {
    out.normalization = fit_normalization(tr, config.winsor_low, config.winsor_high);
    tr = apply_normalization(tr, *out.normalization);
    val = apply_normalization(val, *out.normalization);
  }
  if (config.train.precision == Precision::kFloat64) {
    train_into<double>(out, tr, val);
  } else {
    train_into<float>(out, tr, val);
  }
  return out;
}

std::vector<double> score(const FittedModel& model, const Dataset& raw) {
  const Dataset data = model.normalization ? apply_normalization(raw, *model.normalization) : raw;
  const auto& cfg = model.config;
  if (cfg.train.precision == Precision::kFloat64)
    return predict(model.state.best_params, cfg.model, data, cfg.train.batch_size);
  return predict(model.state.best_params.cast<float>(), cfg.model, data, cfg.train.batch_size);
}

CrossValReport cross_validate(const Dataset& raw, const FoldManifest& folds, const RunConfig& config) {
  config.validate();
  CrossValReport report;
  report.fingerprint = config.fingerprint();
  const std::size_t k = folds.k;
  std::vector<std::optional<FoldResult>> results(k);
  std::vector<std::string> errors(k);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};

  auto run_fold = [&](std::size_t f) {
    auto [test_idx, train_idx] = folds.split(raw, f);
    const Dataset train_data = raw.subset(train_idx);
    const Dataset test = raw.subset(test_idx);
    auto fitted = fit_model(train_data, config, derive_seed(config.fold_seed, {f}));
    if (fitted.diverged) throw NumericError("fold " + std::to_string(f) + ": " + fitted.message);
    const auto probs = score(fitted, test);
    FoldResult r;
    r.fold = f;
    r.test = evaluate_scores(probs, labels_of(test));
    r.n_train = fitted.n_train;
    r.n_val = fitted.n_val;
    r.best_epoch = fitted.state.best_epoch;
    r.best_val_auc = fitted.state.best_val_auc;
    r.steps = fitted.state.optimizer.step;
    char buf[128];
    std::snprintf(buf, sizeof buf, "fold %zu: AUC %.4f AUPRC %.4f", f, r.test.auc, r.test.auprc);
    log(LogLevel::kInfo, buf);
    return r;
  };
  auto worker = [&] {
    for (std::size_t f; !failed && (f = next++) < k;) {
      try {
        results[f] = run_fold(f);
      } catch (const std::exception& e) {
        errors[f] = e.what();
        failed = true;
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, k));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (std::size_t f = 0; f < k; ++f) {
    if (results[f]) report.folds.push_back(*results[f]);
    if (!errors[f].empty() && report.complete) {
      report.complete = false;
      report.error = errors[f];
    }
  }
  if (report.folds.size() != k && report.complete) {
    report.complete = false;
    report.error = "not every fold ran";
  }
  report.aggregate();
  return report;
}

template <class Real>
ImputationReport evaluate_imputation(const ParameterSet<Real>& params, const ModelConfig& model,
                                     const Dataset& data, double ratio, std::uint64_t seed,
                                     const std::vector<RealMatrix>* latents,
                                     std::size_t batch_size) {
  if (!model.use_decoder) throw ConfigError("model has no imputation decoder");
  if (latents && latents->size() != data.size())
    throw ShapeError("latent count does not match the dataset");
  if (batch_size == 0) batch_size = 64;
  std::mt19937_64 rng(seed);
  ImputationReport rep;
  const std::size_t D = data.num_variables;
  double se = 0, se0 = 0, lse = 0, lse0 = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, idx);
    const auto corrupted = sample_mask_plan(batch, ratio, rng);
    ad::Tape<Real> tape;
    BoundParams<Real> bound(tape, params, false);
    ForwardContext<Real> ctx{tape, model, bound, Mode::kEval};
    const auto out = forward(ctx, corrupted.batch, true);
    const auto& xh = out.imputed->value();
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto& s = data.samples[idx[b]];
      RealMatrix m(s.length(), D);
      for (std::size_t j = 0; j < s.length(); ++j) {
        for (std::size_t d = 0; d < D; ++d) {
          const auto o = batch.offset(b, j, d);
          m(j, d) = static_cast<double>(xh[o]);
          if (!corrupted.plan.hidden[o]) continue;
          ++rep.hidden;
          const double e = m(j, d) - batch.values[o];
          se += e * e;
          se0 += batch.values[o] * batch.values[o];
          if (latents) {
            const double z = (*latents)[idx[b]](j, d);
            lse += (m(j, d) - z) * (m(j, d) - z);
            lse0 += z * z;
          }
        }
      }
      rep.imputed.push_back(std::move(m));
    }
  }
  if (rep.hidden > 0) {
    const double n = static_cast<double>(rep.hidden);
    rep.masked_mse = se / n;
    rep.zero_mse = se0 / n;
    if (latents) {
      rep.latent_mse = lse / n;
      rep.latent_zero_mse = lse0 / n;
    }
  }
  return rep;
}

template ImputationReport evaluate_imputation(const ParameterSet<float>&, const ModelConfig&,
                                              const Dataset&, double, std::uint64_t,
                                              const std::vector<RealMatrix>*, std::size_t);
template ImputationReport evaluate_imputation(const ParameterSet<double>&, const ModelConfig&,
                                              const Dataset&, double, std::uint64_t,
                                              const std::vector<RealMatrix>*, std::size_t);

}  // namespace miam
