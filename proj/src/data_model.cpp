#include "miam/data_model.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace miam {

std::size_t TimeSeriesSample::observed_count() const {
  std::size_t n = 0;
  for (auto m : mask.data) n += m != 0;
  return n;
}

NormalizationStats NormalizationStats::identity(std::size_t d) {
  NormalizationStats s;
  s.mean.assign(d, 0.0);
  s.std.assign(d, 1.0);
  s.winsor_low.assign(d, -std::numeric_limits<double>::infinity());
  s.winsor_high.assign(d, std::numeric_limits<double>::infinity());
  s.flags.assign(d, NormalizationFlag::kOk);
  return s;
}

std::size_t Dataset::positives() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.label.value_or(0) == 1;
  return n;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.vocabulary = vocabulary;
  out.num_variables = num_variables;
  out.normalization = normalization;
  out.samples.reserve(indices.size());
  for (auto i : indices) {
    if (i >= samples.size()) throw InvalidInputError("subset index out of range");
    out.samples.push_back(samples[i]);
  }
  return out;
}

void Dataset::check_consistent() const {
  for (const auto& s : samples) {
    if (s.num_variables() != num_variables) {
      throw ShapeError("sample '" + s.subject_id + "' has " +
                       std::to_string(s.num_variables()) +
                       " variables, dataset has " +
                       std::to_string(num_variables));
    }
  }
  if (normalization && normalization->size() != num_variables) {
    throw ShapeError("normalization stats width does not match dataset");
  }
}

RealMatrix compute_intervals(std::span<const double> timestamps,
                             const MaskMatrix& mask) {
  const std::size_t t_len = timestamps.size();
  if (mask.rows != t_len) {
    throw ShapeError("compute_intervals: " + std::to_string(t_len) +
                     " timestamps vs mask with " + std::to_string(mask.rows) +
                     " rows");
  }
  for (std::size_t j = 1; j < t_len; ++j) {
    if (!(timestamps[j] > timestamps[j - 1])) {
      throw InvalidInputError("compute_intervals: timestamps not strictly "
                              "increasing at index " + std::to_string(j));
    }
  }
  const std::size_t d_len = mask.cols;
  RealMatrix delta(t_len, d_len, 0.0);
  for (std::size_t j = 1; j < t_len; ++j) {
    const double gap = timestamps[j] - timestamps[j - 1];
    for (std::size_t d = 0; d < d_len; ++d) {
      delta(j, d) = mask(j - 1, d) ? gap : gap + delta(j - 1, d);
    }
  }
  return delta;
}

TimeSeriesSample make_sample(std::string subject_id,
                             std::vector<double> timestamps, RealMatrix values,
                             MaskMatrix mask, std::optional<int> label) {
  if (!values.same_shape(mask.rows, mask.cols) ||
      values.rows != timestamps.size()) {
    throw ShapeError("make_sample: values " + std::to_string(values.rows) +
                     "x" + std::to_string(values.cols) + ", mask " +
                     std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + ", " +
                     std::to_string(timestamps.size()) + " timestamps");
  }
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (!mask.data[i]) values.data[i] = 0.0;
  }
  TimeSeriesSample s;
  s.intervals = compute_intervals(timestamps, mask);
  s.subject_id = std::move(subject_id);
  s.timestamps = std::move(timestamps);
  s.values = std::move(values);
  s.mask = std::move(mask);
  s.label = label;
  return s;
}

const char* to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::kShapeMismatch: return "shape-mismatch";
    case ViolationKind::kNonIncreasingTimestamps: return "non-increasing-timestamps";
    case ViolationKind::kNonBinaryMask: return "non-binary-mask";
    case ViolationKind::kValueAtMissing: return "value-at-missing";
    case ViolationKind::kNonFiniteValue: return "non-finite-value";
    case ViolationKind::kFirstIntervalNonZero: return "first-interval-nonzero";
    case ViolationKind::kNegativeInterval: return "negative-interval";
    case ViolationKind::kIntervalRecursion: return "interval-recursion";
    case ViolationKind::kBadLabel: return "bad-label";
    case ViolationKind::kEmpty: return "empty";
  }
  return "unknown";
}

namespace {

std::string at(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << "(" << r << "," << c << ")";
  return os.str();
}

}  // namespace

std::vector<Violation> validate_sample(const TimeSeriesSample& s) {
  std::vector<Violation> out;
  const std::size_t t_len = s.timestamps.size();
  const std::size_t d_len = s.values.cols;
  if (t_len == 0) {
    out.push_back({ViolationKind::kEmpty, 0, 0, "sample has no time points"});
  }
  if (!s.values.same_shape(t_len, d_len) || !s.mask.same_shape(t_len, d_len) ||
      !s.intervals.same_shape(t_len, d_len)) {
    out.push_back({ViolationKind::kShapeMismatch, 0, 0,
                   "values, mask and intervals must all be T x D"});
    return out;  // element checks below would index out of bounds
  }
  for (std::size_t j = 1; j < t_len; ++j) {
    if (!(s.timestamps[j] > s.timestamps[j - 1])) {
      out.push_back({ViolationKind::kNonIncreasingTimestamps, j, 0,
                     "timestamp " + std::to_string(j) +
                         " does not exceed its predecessor"});
    }
  }
  for (std::size_t j = 0; j < t_len; ++j) {
    if (!std::isfinite(s.timestamps[j])) {
      out.push_back({ViolationKind::kNonFiniteValue, j, 0, "non-finite timestamp"});
    }
    for (std::size_t d = 0; d < d_len; ++d) {
      const auto m = s.mask(j, d);
      const double x = s.values(j, d);
      const double dt = s.intervals(j, d);
      if (m > 1) {
        out.push_back({ViolationKind::kNonBinaryMask, j, d,
                       "mask entry at " + at(j, d) + " is not 0/1"});
      }
      if (!std::isfinite(x) || !std::isfinite(dt)) {
        out.push_back({ViolationKind::kNonFiniteValue, j, d,
                       "non-finite entry at " + at(j, d)});
      }
      if (m == 0 && x != 0.0) {
        out.push_back({ViolationKind::kValueAtMissing, j, d,
                       "non-zero value at missing position " + at(j, d)});
      }
      if (dt < 0.0) {
        out.push_back({ViolationKind::kNegativeInterval, j, d,
                       "negative interval at " + at(j, d)});
      }
      if (j == 0 && dt != 0.0) {
        out.push_back({ViolationKind::kFirstIntervalNonZero, j, d,
                       "first-row interval at " + at(j, d) + " is not zero"});
      }
      if (j > 0) {
        const double gap = s.timestamps[j] - s.timestamps[j - 1];
        const double expect = s.mask(j - 1, d) ? gap : gap + s.intervals(j - 1, d);
        if (dt != expect) {
          out.push_back({ViolationKind::kIntervalRecursion, j, d,
                         "interval at " + at(j, d) +
                             " does not follow from the previous row"});
        }
      }
    }
  }
  if (s.label && *s.label != 0 && *s.label != 1) {
    out.push_back({ViolationKind::kBadLabel, 0, 0, "label must be 0 or 1"});
  }
  return out;
}

}  // namespace miam
