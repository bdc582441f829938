#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "miam/model.hpp"
#include "miam/training.hpp"

namespace miam {

using KeyValues = std::map<std::string, std::string>;

/// Everything a run depends on. Resolved as defaults < config file < flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;
  double winsor_low = 1.0;
  double winsor_high = 99.0;
  /// Fit winsor/z-score statistics on each training split.
  bool normalize = true;
  std::size_t workers = 1;

  /// Sets one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  void apply(const KeyValues& kv);
  /// Every key with its current value, values formatted to round-trip.
  KeyValues to_key_values() const;
  /// 16 hex digits of FNV-1a over the sorted "key=value" lines, without
  /// run.workers.
  std::string fingerprint() const;
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// "key = value" lines; '#' starts a comment; blank lines are ignored.
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::string& path);

std::string fnv1a_hex(std::string_view bytes);

/// Shortest text that parses back to the same double.
std::string format_real(double v);

}  // namespace miam
