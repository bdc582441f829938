#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miam/errors.hpp"

namespace miam {

/// Dense row-major matrix used on the data side of the pipeline.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{})
      : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  bool same_shape(std::size_t r, std::size_t c) const {
    return rows == r && cols == c;
  }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

using RealMatrix = Matrix<double>;
using MaskMatrix = Matrix<std::uint8_t>;

/// One subject: observation values X, mask M, interval matrix Delta, all T x D.
struct TimeSeriesSample {
  std::string subject_id;
  std::vector<double> timestamps;  // hours, strictly increasing
  RealMatrix values;               // 0 where mask is 0
  MaskMatrix mask;                 // 1 observed, 0 missing
  RealMatrix intervals;            // hours since last observation
  std::optional<int> label;        // 0/1 mortality, absent for inference

  std::size_t length() const { return timestamps.size(); }
  std::size_t num_variables() const { return values.cols; }
  std::size_t observed_count() const;

  friend bool operator==(const TimeSeriesSample&,
                         const TimeSeriesSample&) = default;
};

enum class NormalizationFlag : std::uint8_t { kOk = 0, kDegenerate = 1, kUnobserved = 2 };

/// Per-variable winsorization bounds and z-normalization moments.
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<double> winsor_low;
  std::vector<double> winsor_high;
  std::vector<NormalizationFlag> flags;
  std::size_t fit_sample_count = 0;
  double low_percentile = 1.0;
  double high_percentile = 99.0;

  std::size_t size() const { return mean.size(); }
  static NormalizationStats identity(std::size_t d);
  friend bool operator==(const NormalizationStats&,
                         const NormalizationStats&) = default;
};

struct Dataset {
  std::vector<TimeSeriesSample> samples;
  std::vector<std::string> vocabulary;
  std::size_t num_variables = 0;
  std::optional<NormalizationStats> normalization;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t positives() const;
  /// Subset with the same vocabulary and normalization, in index order.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws ShapeError if any sample's width differs from num_variables.
  void check_consistent() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Per-variable elapsed time since the previous observation. Row 0 is zero;
/// afterwards the gap accumulates across rows where the variable was missing
/// at the previous time point.
RealMatrix compute_intervals(std::span<const double> timestamps,
                             const MaskMatrix& mask);

/// Builds a sample from timestamps, values and mask; zeroes values at missing
/// positions and derives intervals.
TimeSeriesSample make_sample(std::string subject_id,
                             std::vector<double> timestamps, RealMatrix values,
                             MaskMatrix mask,
                             std::optional<int> label = std::nullopt);

enum class ViolationKind {
  kShapeMismatch,
  kNonIncreasingTimestamps,
  kNonBinaryMask,
  kValueAtMissing,
  kNonFiniteValue,
  kFirstIntervalNonZero,
  kNegativeInterval,
  kIntervalRecursion,
  kBadLabel,
  kEmpty,
};

struct Violation {
  ViolationKind kind;
  std::size_t row = 0;
  std::size_t col = 0;
  std::string message;
};

const char* to_string(ViolationKind kind);

/// Lists every violated sample invariant; an empty result means valid.
std::vector<Violation> validate_sample(const TimeSeriesSample& sample);

}  // namespace miam
