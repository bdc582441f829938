#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "miam/data_model.hpp"
#include "miam/run_config.hpp"
#include "miam/training.hpp"

namespace miam {

// Dataset container: "MIAMDS01", u64 header length, JSON header, then per
// sample the id, label and length-prefixed little-endian blocks for
// timestamps, X, M and Delta.

void write_dataset(std::ostream& os, const Dataset& data, const std::string& fingerprint = "");
Dataset read_dataset(std::istream& is, std::string* fingerprint = nullptr);
void save_dataset(const std::filesystem::path& path, const Dataset& data,
                  const std::string& fingerprint = "");
Dataset load_dataset(const std::filesystem::path& path, std::string* fingerprint = nullptr);

/// Dense latent signals (one T x D matrix per sample) from the generator.
void save_latents(const std::filesystem::path& path, const std::vector<RealMatrix>& latents);
std::vector<RealMatrix> load_latents(const std::filesystem::path& path);

/// JSON with infinite bounds written as "inf" / "-inf".
std::string stats_to_json(const NormalizationStats& stats);
NormalizationStats stats_from_json(const std::string& text);

/// Everything `train` needs to resume or `evaluate` needs to score. Tensors
/// are stored as 64-bit values whatever the training precision.
struct Checkpoint {
  RunConfig config;
  std::vector<std::string> vocabulary;
  std::optional<NormalizationStats> normalization;
  TrainState<double> state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <class To, class From>
TrainState<To> cast_state(const TrainState<From>& s) {
  TrainState<To> out;
  out.params = s.params.template cast<To>();
  out.optimizer.m = s.optimizer.m.template cast<To>();
  out.optimizer.v = s.optimizer.v.template cast<To>();
  out.optimizer.step = s.optimizer.step;
  out.optimizer.skipped = s.optimizer.skipped;
  out.next_epoch = s.next_epoch;
  out.best_params = s.best_params.template cast<To>();
  out.best_val_auc = s.best_val_auc;
  out.best_epoch = s.best_epoch;
  out.history = s.history;
  return out;
}

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace miam
