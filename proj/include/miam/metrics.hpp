#pragma once

#include <span>
#include <string>
#include <vector>

namespace miam {

/// Area under the ROC curve (Mann-Whitney statistic, ties count one half).
/// Throws UndefinedMetricError when either class is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Average precision: sum over distinct thresholds of (R_k - R_{k-1}) P_k,
/// with tied scores entering together. Throws UndefinedMetricError without
/// positives.
double auprc(std::span<const double> scores, std::span<const int> labels);

/// Same as auc()/auprc() but NaN instead of throwing.
double auc_or_nan(std::span<const double> scores, std::span<const int> labels);
double auprc_or_nan(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  double auc = 0;
  double auprc = 0;
  std::size_t n = 0;
  std::size_t positives = 0;
};

MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels);

struct MeanStd {
  double mean = 0;
  double std = 0;  // population
};

MeanStd mean_std(std::span<const double> values);

/// "0.8512 ± 0.0123" style cell.
std::string format_mean_std(const MeanStd& v, int digits = 4);

}  // namespace miam
