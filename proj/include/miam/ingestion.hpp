#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "miam/data_model.hpp"

namespace miam {

/// One long-format measurement.
struct RawEvent {
  std::string subject_id;
  double time = 0;  // hours
  std::string variable;
  double value = 0;

  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

/// The 35 time-series variables of the 2012 challenge, in column order.
const std::vector<std::string>& physionet_vocabulary();

/// General descriptors from the top of a challenge record.
struct SubjectDescriptor {
  std::string record_id;
  std::optional<double> age, gender, height, icu_type, weight;
};

struct SkipReport {
  std::map<std::string, std::size_t> unknown_parameters;  // name -> rows
  std::size_t missing_values = 0;                         // rows with value -1
  std::size_t descriptor_rows = 0;

  void merge(const SkipReport& other);
  std::string to_text() const;
};

struct PhysionetRecord {
  SubjectDescriptor descriptor;
  std::vector<RawEvent> events;
  SkipReport skipped;
};

/// Parses one "Time,Parameter,Value" record. The subject id is the RecordID
/// descriptor, or `fallback_id` when the record has none.
PhysionetRecord parse_physionet_record(std::string_view text,
                                       const std::vector<std::string>& vocabulary =
                                           physionet_vocabulary(),
                                       const std::string& fallback_id = "");

/// "HH:MM" to fractional hours; throws ParseError tagged with `line`.
double parse_hhmm(std::string_view field, std::size_t line);

struct LongCsvSchema {
  std::string subject = "subject_id";
  std::string time = "time_hours";
  std::string variable = "variable";
  std::string value = "value";
};

/// Rows of a header-led CSV in file order. Extra columns are ignored.
std::vector<RawEvent> parse_long_csv(std::string_view text, const LongCsvSchema& schema = {});

/// RecordID -> In-hospital_death from an outcomes table.
std::map<std::string, int> parse_outcomes(std::string_view text);

struct DropReport {
  std::vector<std::string> empty_subjects;  // no usable event
  std::vector<std::string> unlabelled_subjects;
  SkipReport skipped;  // events whose variable is outside the vocabulary

  std::string to_text() const;
};

/// Groups events per subject (first-appearance order), one row per distinct
/// timestamp; a repeated (time, variable) keeps the last value. When `labels`
/// is non-empty, subjects missing from it are kept unlabelled and listed.
Dataset assemble_samples(const std::vector<RawEvent>& events,
                         const std::map<std::string, int>& labels,
                         const std::vector<std::string>& vocabulary,
                         DropReport* report = nullptr);

struct PhysionetLoad {
  Dataset dataset;
  DropReport report;
};

/// Reads every *.txt record under `records_dir` (sorted by file name) and,
/// if given, the outcomes file. Records are parsed on `workers` threads.
PhysionetLoad load_physionet(const std::filesystem::path& records_dir,
                             const std::optional<std::filesystem::path>& outcomes,
                             std::size_t workers = 1);

/// Linear-interpolation percentile of an ascending list, q in [0, 100].
double percentile_sorted(const std::vector<double>& sorted, double q);

/// Winsor bounds and moments over observed entries of the training split.
NormalizationStats fit_normalization(const Dataset& train, double low_percentile = 1.0,
                                     double high_percentile = 99.0);

inline constexpr double kStdFloor = 1e-6;

/// Clips observed entries to the winsor bounds and z-scores them; missing
/// entries stay 0. The result carries `stats` as its normalization.
Dataset apply_normalization(const Dataset& data, const NormalizationStats& stats);

/// x * std + mean on observed entries (clipping cannot be undone).
Dataset invert_normalization(const Dataset& data, const NormalizationStats& stats);

struct FoldManifest {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::size_t>> assignments;  // dataset order

  std::size_t fold_of(const std::string& subject_id) const;
  /// Indices of `data` in fold `fold` (test) and in the others (train).
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(const Dataset& data,
                                                                      std::size_t fold) const;
  std::string to_json() const;
  static FoldManifest from_json(std::string_view text);
};

/// Stratified k-fold assignment, deterministic in `seed`.
FoldManifest make_folds(const Dataset& data, std::size_t k, std::uint64_t seed);

}  // namespace miam
