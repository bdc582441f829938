#include "miam/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "miam/errors.hpp"
#include "miam/evaluation.hpp"
#include "miam/gradcheck.hpp"
#include "miam/ingestion.hpp"
#include "miam/io.hpp"
#include "miam/log.hpp"
#include "miam/random.hpp"
#include "miam/run_config.hpp"
#include "miam/synthetic.hpp"
#include "miam/training.hpp"

namespace fs = std::filesystem;

namespace miam::cli {
namespace {

constexpr const char* kDataRootEnv = "MIAM_DATA_ROOT";

class UsageError : public Error {
 public:
  using Error::Error;
};

// Relative input paths are looked up under $MIAM_DATA_ROOT when it is set.
fs::path data_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kDataRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

struct ConfigFlags {
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value config file");
    app->add_option("--set", overrides, "override one key (key=value); repeatable");
  }

  // defaults < file < --set
  RunConfig resolve(RunConfig base = {}) const {
    if (!file.empty()) base.apply(read_key_values(data_path(file).string()));
    base.apply(overrides_kv());
    return base;
  }

  KeyValues overrides_kv() const {
    KeyValues kv;
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
      kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
    return kv;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string manifest_json(const FoldManifest& m, const std::string& fingerprint) {
  auto j = nlohmann::ordered_json::parse(m.to_json());
  nlohmann::ordered_json out;
  out["fingerprint"] = fingerprint;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value();
  return out.dump(1) + "\n";
}

// Synth ----------------------------------------------------------------------

struct SynthArgs {
  SyntheticConfig config;
  std::string regime = "mcar";
  std::string label_rule = "latent-amplitude";
  std::string out;
  std::string latents;
};

std::string synth_fingerprint(const SyntheticConfig& c) {
  std::ostringstream os;
  os << "synth.n_samples=" << c.n_samples << "\nsynth.num_variables=" << c.num_variables
     << "\nsynth.t_min=" << c.t_min << "\nsynth.t_max=" << c.t_max
     << "\nsynth.horizon=" << format_real(c.horizon) << "\nsynth.n_factors=" << c.n_factors
     << "\nsynth.freq=" << format_real(c.freq_min) << "," << format_real(c.freq_max)
     << "\nsynth.amp=" << format_real(c.amp_min) << "," << format_real(c.amp_max)
     << "\nsynth.noise_std=" << format_real(c.noise_std) << "\nsynth.regime=" << to_string(c.regime)
     << "\nsynth.missing_p=" << format_real(c.missing_p) << "," << format_real(c.missing_p_neg)
     << "," << format_real(c.missing_p_pos) << "\nsynth.threshold=" << format_real(c.threshold)
     << "\nsynth.observe=" << format_real(c.observe_low) << "," << format_real(c.observe_high)
     << "\nsynth.label_rule=" << to_string(c.label_rule)
     << "\nsynth.prevalence=" << format_real(c.prevalence)
     << "\nsynth.label_temperature=" << format_real(c.label_temperature)
     << "\nsynth.hide_mask_in_values=" << c.hide_mask_in_values << "\nsynth.seed=" << c.seed
     << "\n";
  return fnv1a_hex(os.str());
}

void add_synth(CLI::App& root, SynthArgs& a, std::function<int()>& action) {
  auto* cmd = root.add_subcommand("synth", "generate a synthetic dataset with known latents");
  auto& c = a.config;
  cmd->add_option("--out", a.out, "dataset file to write")->required();
  cmd->add_option("--latents", a.latents, "also write the noise-free latent signals");
  cmd->add_option("--samples", c.n_samples, "number of samples")->capture_default_str();
  cmd->add_option("--variables", c.num_variables, "number of variables D")->capture_default_str();
  cmd->add_option("--t-min", c.t_min, "fewest time points per sample")->capture_default_str();
  cmd->add_option("--t-max", c.t_max, "most time points per sample")->capture_default_str();
  cmd->add_option("--horizon", c.horizon, "observation window in hours")->capture_default_str();
  cmd->add_option("--factors", c.n_factors, "latent sinusoid factors")->capture_default_str();
  cmd->add_option("--noise", c.noise_std, "observation noise std")->capture_default_str();
  cmd->add_option("--regime", a.regime, "mcar | informative")->capture_default_str();
  cmd->add_option("--label-rule", a.label_rule, "latent-amplitude | missing-rate")->capture_default_str();
  cmd->add_option("--missing-p", c.missing_p, "mcar missing probability")->capture_default_str();
  cmd->add_option("--missing-p-neg", c.missing_p_neg, "missing-rate rule, class 0")->capture_default_str();
  cmd->add_option("--missing-p-pos", c.missing_p_pos, "missing-rate rule, class 1")->capture_default_str();
  cmd->add_option("--threshold", c.threshold, "informative regime |z| threshold")->capture_default_str();
  cmd->add_option("--observe-low", c.observe_low, "informative: P(observe) below threshold")->capture_default_str();
  cmd->add_option("--observe-high", c.observe_high, "informative: P(observe) above threshold")->capture_default_str();
  cmd->add_option("--prevalence", c.prevalence, "missing-rate rule: P(y = 1)")->capture_default_str();
  cmd->add_option("--label-temperature", c.label_temperature, "0 gives a hard threshold")->capture_default_str();
  cmd->add_flag("--hide-mask-in-values", c.hide_mask_in_values,
                "zero observed values so the values carry no missingness signal");
  cmd->add_option("--seed", c.seed, "generator seed")->capture_default_str();
  cmd->callback([&] {
    action = [&]() -> int {
      a.config.regime = parse_missing_regime(a.regime);
      a.config.label_rule = parse_label_rule(a.label_rule);
      const auto fp = synth_fingerprint(a.config);
      const auto syn = generate(a.config);
      save_dataset(a.out, syn.dataset, fp);
      if (!a.latents.empty()) save_latents(a.latents, syn.latents);
      std::printf("wrote %zu samples (%zu positive) to %s\nfingerprint %s\n", syn.dataset.size(),
                  syn.dataset.positives(), a.out.c_str(), fp.c_str());
      return kOk;
    };
  });
}

// Data sources shared by train and evaluate ---------------------------------

struct DataArgs {
  std::string data;
  std::string physionet;
  std::string outcomes;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data, "dataset file (from synth or preprocess)");
    cmd->add_option("--physionet", physionet, "directory of PhysioNet 2012 record files");
    cmd->add_option("--outcomes", outcomes, "outcomes table for --physionet");
  }

  Dataset load(std::size_t workers) const {
    if (!data.empty() && !physionet.empty())
      throw UsageError("--data and --physionet are mutually exclusive");
    if (data.empty() && physionet.empty()) throw UsageError("one of --data or --physionet is required");
    if (!data.empty()) return load_dataset(data_path(data));
    std::optional<fs::path> out;
    if (!outcomes.empty()) out = data_path(outcomes);
    auto loaded = load_physionet(data_path(physionet), out, workers);
    if (loaded.dataset.empty()) throw IoError("no usable records under " + physionet);
    return std::move(loaded.dataset);
  }
};

// Preprocess -------------------------------------------------------------------

struct PreprocessArgs {
  ConfigFlags config;
  std::string physionet;
  std::string outcomes;
  std::string csv;
  std::string labels;
  std::string out;
};

void add_preprocess(CLI::App& root, PreprocessArgs& a, std::function<int()>& action) {
  auto* cmd = root.add_subcommand(
      "preprocess", "ingest raw records into a dataset file, fold manifest and per-fold statistics");
  a.config.attach(cmd);
  cmd->add_option("--physionet", a.physionet, "directory of PhysioNet 2012 record files");
  cmd->add_option("--outcomes", a.outcomes, "outcomes table (RecordID, In-hospital_death)");
  cmd->add_option("--csv", a.csv, "long-format CSV: subject_id,time_hours,variable,value");
  cmd->add_option("--labels", a.labels, "outcomes table for --csv");
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->callback([&] {
    action = [&]() -> int {
      if (a.physionet.empty() == a.csv.empty())
        throw UsageError("exactly one of --physionet or --csv is required");
      const RunConfig cfg = a.config.resolve();
      cfg.validate();
      Dataset data;
      DropReport report;
      if (!a.physionet.empty()) {
        std::optional<fs::path> outcomes;
        if (!a.outcomes.empty()) outcomes = data_path(a.outcomes);
        auto loaded = load_physionet(data_path(a.physionet), outcomes, cfg.workers);
        data = std::move(loaded.dataset);
        report = std::move(loaded.report);
      } else {
        const auto events = parse_long_csv(read_text_file(data_path(a.csv)));
        std::map<std::string, int> labels;
        if (!a.labels.empty()) labels = parse_outcomes(read_text_file(data_path(a.labels)));
        std::vector<std::string> vocab;
        std::set<std::string> seen;
        for (const auto& e : events)
          if (seen.insert(e.variable).second) vocab.push_back(e.variable);
        data = assemble_samples(events, labels, vocab, &report);
      }
      if (data.empty()) throw IoError("no usable subjects in the input");
      const fs::path dir(a.out);
      ensure_dir(dir);
      const auto fp = cfg.fingerprint();
      save_dataset(dir / "dataset.bin", data, fp);
      write_text_file(dir / "report.txt", "# fingerprint=" + fp + "\n" + report.to_text());
      std::size_t labelled = 0;
      for (const auto& s : data.samples) labelled += s.label.has_value();
      if (labelled == data.size()) {
        const auto folds = make_folds(data, cfg.folds, cfg.fold_seed);
        write_text_file(dir / "folds.json", manifest_json(folds, fp));
        for (std::size_t f = 0; f < folds.k; ++f) {
          const auto train_idx = folds.split(data, f).second;
          const auto stats = fit_normalization(data.subset(train_idx), cfg.winsor_low, cfg.winsor_high);
          auto j = nlohmann::ordered_json::parse(stats_to_json(stats));
          j["fingerprint"] = fp;
          write_text_file(dir / ("stats_fold" + std::to_string(f) + ".json"), j.dump(1) + "\n");
        }
      } else {
        log(LogLevel::kWarn, "unlabelled subjects present; fold manifest not written");
      }
      std::printf("%zu subjects (%zu positive, %zu unlabelled), %zu variables\nfingerprint %s\n",
                  data.size(), data.positives(), data.size() - labelled, data.num_variables,
                  fp.c_str());
      return kOk;
    };
  });
}

// Train ------------------------------------------------------------------------

struct TrainArgs {
  ConfigFlags config;
  DataArgs data;
  std::string out;
  bool resume = false;
};

// Keys that may change between a run and its resumption.
RunConfig without_schedule_length(RunConfig c) {
  c.train.epochs = 0;
  c.train.max_steps = 0;
  c.workers = 1;
  return c;
}

template <class Real>
int train_with(const Dataset& tr, const Dataset& val, Checkpoint ckpt, bool resume,
               const fs::path& dir) {
  const auto& cfg = ckpt.config;
  const auto ckpt_path = dir / "checkpoint.bin";
  const auto fp = cfg.fingerprint();
  std::optional<TrainState<Real>> start;
  if (resume) start = cast_state<Real>(ckpt.state);
  auto save = [&](const TrainState<Real>& st) {
    ckpt.state = cast_state<double>(st);
    save_checkpoint(ckpt_path, ckpt);
    std::ofstream os(dir / "history.csv", std::ios::binary);
    write_history_csv(os, st.history, fp);
    if (!os) throw IoError("cannot write " + (dir / "history.csv").string());
  };
  auto result = train<Real>(tr, val, cfg.model, cfg.train, std::move(start), save);
  if (result.diverged) {
    std::fprintf(stderr, "diverged: %s (last good checkpoint kept)\n", result.message.c_str());
    return kDiverged;
  }
  save(result.state);
  const auto& st = result.state;
  std::printf("trained %zu epochs, %zu steps; best epoch %zu (val AUC %.4f)\nfingerprint %s\n",
              st.history.size(), st.optimizer.step, st.best_epoch, st.best_val_auc, fp.c_str());
  return kOk;
}

void add_train(CLI::App& root, TrainArgs& a, std::function<int()>& action) {
  auto* cmd = root.add_subcommand("train", "train a model and write checkpoint.bin and history.csv");
  a.config.attach(cmd);
  a.data.attach(cmd);
  cmd->add_option("--out", a.out, "run directory")->required();
  cmd->add_flag("--resume", a.resume, "continue from the checkpoint in the run directory");
  cmd->callback([&] {
    action = [&]() -> int {
      const fs::path dir(a.out);
      Checkpoint ckpt;
      if (a.resume) {
        const auto path = dir / "checkpoint.bin";
        if (!fs::exists(path)) throw IoError("no checkpoint to resume at " + path.string());
        ckpt = load_checkpoint(path);
        RunConfig cfg = a.config.resolve(ckpt.config);
        if (without_schedule_length(cfg) != without_schedule_length(ckpt.config))
          throw UsageError("resume: configuration differs from the checkpoint beyond epochs/max_steps");
        ckpt.config = cfg;
      } else {
        ckpt.config = a.config.resolve();
      }
      ckpt.config.validate();
      const Dataset raw = a.data.load(ckpt.config.workers);
      if (a.resume && raw.vocabulary != ckpt.vocabulary)
        throw UsageError("resume: dataset vocabulary differs from the checkpoint");
      auto& cfg = ckpt.config;
      if (cfg.model.num_variables != 0 && cfg.model.num_variables != raw.num_variables)
        throw UsageError("model.num_variables does not match the dataset");
      cfg.model.num_variables = raw.num_variables;
      ckpt.vocabulary = raw.vocabulary;
      auto [tr_idx, val_idx] = split_validation(raw, cfg.train.val_fraction, cfg.train.seed);
      Dataset tr = raw.subset(tr_idx), val = raw.subset(val_idx);
      if (cfg.normalize) {
        if (!a.resume) ckpt.normalization = fit_normalization(tr, cfg.winsor_low, cfg.winsor_high);
        tr = apply_normalization(tr, *ckpt.normalization);
        val = apply_normalization(val, *ckpt.normalization);
      }
      ensure_dir(dir);
      if (cfg.train.precision == Precision::kFloat64)
        return train_with<double>(tr, val, std::move(ckpt), a.resume, dir);
      return train_with<float>(tr, val, std::move(ckpt), a.resume, dir);
    };
  });
}

// Evaluate -----------------------------------------------------------------------

struct EvaluateArgs {
  ConfigFlags config;
  DataArgs data;
  std::string checkpoint;
  std::string folds;
  bool cv = false;
  std::string out;
};

FittedModel from_checkpoint(const Checkpoint& c) {
  FittedModel m;
  m.config = c.config;
  m.normalization = c.normalization;
  m.state = c.state;
  return m;
}

Checkpoint load_checkpoint_arg(const std::string& path) {
  const auto p = data_path(path);
  if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
  return load_checkpoint(p);
}

void add_evaluate(CLI::App& root, EvaluateArgs& a, std::function<int()>& action) {
  auto* cmd = root.add_subcommand(
      "evaluate", "score a checkpoint on a dataset, or run k-fold cross-validation with --cv");
  a.config.attach(cmd);
  a.data.attach(cmd);
  cmd->add_option("--checkpoint", a.checkpoint, "checkpoint to score");
  cmd->add_flag("--cv", a.cv, "train and test every fold");
  cmd->add_option("--folds", a.folds, "fold manifest (default: stratified from cv.folds, cv.seed)");
  cmd->add_option("--out", a.out, "report file (CSV)");
  cmd->callback([&] {
    action = [&]() -> int {
      if (a.cv == !a.checkpoint.empty()) throw UsageError("give exactly one of --checkpoint or --cv");
      std::string text;
      if (a.cv) {
        const RunConfig cfg = a.config.resolve();
        cfg.validate();
        const Dataset raw = a.data.load(cfg.workers);
        const auto manifest = a.folds.empty() ? make_folds(raw, cfg.folds, cfg.fold_seed)
                                              : FoldManifest::from_json(read_text_file(data_path(a.folds)));
        auto report = cross_validate(raw, manifest, cfg);
        std::cout << report.to_table();
        text = report.to_csv();
        if (!a.out.empty()) write_text_file(a.out, text);
        if (!report.complete) {
          std::fprintf(stderr, "cross-validation incomplete: %s\n", report.error.c_str());
          return report.error.find("diverged") != std::string::npos ? int(kDiverged) : int(kIo);
        }
        return kOk;
      }
      const auto ckpt = load_checkpoint_arg(a.checkpoint);
      const Dataset raw = a.data.load(ckpt.config.workers);
      if (raw.vocabulary != ckpt.vocabulary) throw UsageError("dataset vocabulary differs from the checkpoint");
      const auto probs = score(from_checkpoint(ckpt), raw);
      const auto m = evaluate_scores(probs, labels_of(raw));
      const auto fp = ckpt.config.fingerprint();
      char buf[256];
      std::snprintf(buf, sizeof buf, "# fingerprint=%s\nn,positives,auc,auprc\n%zu,%zu,%.17g,%.17g\n",
                    fp.c_str(), m.n, m.positives, m.auc, m.auprc);
      text = buf;
      std::printf("n %zu  positives %zu  AUC %.4f  AUPRC %.4f\nfingerprint %s\n", m.n, m.positives,
                  m.auc, m.auprc, fp.c_str());
      if (!a.out.empty()) write_text_file(a.out, text);
      return kOk;
    };
  });
}

// Impute -------------------------------------------------------------------------

struct ImputeArgs {
  std::string checkpoint;
  std::string data;
  std::string latents;
  std::string out;
  double ratio = 0.1;
  std::uint64_t seed = 0;
};

void add_impute(CLI::App& root, ImputeArgs& a, std::function<int()>& action) {
  auto* cmd = root.add_subcommand(
      "impute", "hide observed entries, reconstruct them with the decoder and report masked MSE");
  cmd->add_option("--checkpoint", a.checkpoint, "checkpoint with decoder weights")->required();
  cmd->add_option("--data", a.data, "dataset file")->required();
  cmd->add_option("--latents", a.latents, "latent signals from synth, for MSE against the clean signal");
  cmd->add_option("--out", a.out, "imputed matrices (T x D per sample)")->required();
  cmd->add_option("--ratio", a.ratio, "fraction of observed entries hidden per sample")->capture_default_str();
  cmd->add_option("--seed", a.seed, "seed for the hidden-entry draw")->capture_default_str();
  cmd->callback([&] {
    action = [&]() -> int {
      const auto ckpt = load_checkpoint_arg(a.checkpoint);
      if (!ckpt.config.model.use_decoder || !ckpt.state.best_params.contains("dec.out.w"))
        throw IoError("checkpoint has no imputation decoder");
      Dataset data = load_dataset(data_path(a.data));
      if (data.vocabulary != ckpt.vocabulary) throw UsageError("dataset vocabulary differs from the checkpoint");
      std::optional<std::vector<RealMatrix>> latents;
      if (!a.latents.empty()) latents = load_latents(data_path(a.latents));
      if (ckpt.normalization) {
        data = apply_normalization(data, *ckpt.normalization);
        if (latents) {
          const auto& st = *ckpt.normalization;
          for (auto& z : *latents)
            for (std::size_t j = 0; j < z.rows; ++j)
              for (std::size_t d = 0; d < z.cols; ++d) z(j, d) = (z(j, d) - st.mean[d]) / st.std[d];
        }
      }
      const auto& cfg = ckpt.config;
      const auto* lp = latents ? &*latents : nullptr;
      const auto rep = cfg.train.precision == Precision::kFloat64
          ? evaluate_imputation(ckpt.state.best_params, cfg.model, data, a.ratio, a.seed, lp,
                                cfg.train.batch_size)
          : evaluate_imputation(ckpt.state.best_params.cast<float>(), cfg.model, data, a.ratio,
                                a.seed, lp, cfg.train.batch_size);
      save_latents(a.out, rep.imputed);
      const auto fp = cfg.fingerprint();
      std::ostringstream os;
      char buf[256];
      os << "# fingerprint=" << fp << "\n";
      std::snprintf(buf, sizeof buf, "hidden %zu\nmasked_mse %.17g\nzero_mse %.17g\n", rep.hidden,
                    rep.masked_mse, rep.zero_mse);
      os << buf;
      if (rep.latent_mse) {
        std::snprintf(buf, sizeof buf, "latent_mse %.17g\nlatent_zero_mse %.17g\n", *rep.latent_mse,
                      *rep.latent_zero_mse);
        os << buf;
      }
      write_text_file(a.out + ".summary.txt", os.str());
      std::cout << os.str();
      return kOk;
    };
  });
}

// Gradcheck ------------------------------------------------------------------------

void add_gradcheck(CLI::App& root, GradcheckOptions& o, std::function<int()>& action) {
  auto* cmd = root.add_subcommand(
      "gradcheck", "compare tape gradients with central differences on a tiny random model");
  cmd->add_option("--seed", o.seed, "seed for data and parameters")->capture_default_str();
  cmd->add_option("--step", o.step, "finite-difference half width")->capture_default_str();
  cmd->add_option("--tolerance", o.tolerance, "pass threshold on the max relative error")->capture_default_str();
  cmd->add_flag("--inject-bug", o.inject_bug, "negate one backward rule (negative control)");
  cmd->callback([&] {
    action = [&]() -> int {
      const auto report = gradcheck(o);
      std::cout << report.to_text();
      return report.passed ? kOk : kCheckFailed;
    };
  });
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"MIAM: multi-view integration attention for irregular clinical time series"};
  app.require_subcommand(1);
  std::string level = "warn";
  app.add_option("--log-level", level, "quiet | warn | info | debug")->capture_default_str();

  std::function<int()> action;
  SynthArgs synth;
  PreprocessArgs pre;
  TrainArgs tr;
  EvaluateArgs ev;
  ImputeArgs imp;
  GradcheckOptions gc;
  add_synth(app, synth, action);
  add_preprocess(app, pre, action);
  add_train(app, tr, action);
  add_evaluate(app, ev, action);
  add_impute(app, imp, action);
  add_gradcheck(app, gc, action);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (level == "quiet") set_log_level(LogLevel::kQuiet);
    else if (level == "warn") set_log_level(LogLevel::kWarn);
    else if (level == "info") set_log_level(LogLevel::kInfo);
    else if (level == "debug") set_log_level(LogLevel::kDebug);
    else throw UsageError("unknown log level '" + level + "'");
    return action ? action() : int(kUsage);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
}

}  // namespace miam::cli
