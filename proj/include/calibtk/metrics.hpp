#pragma once

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "calibtk/predictions.hpp"
#include "json.hpp"

namespace calibtk {

// Probabilities are clipped to this range before taking logs in NLL.
inline constexpr double kNllClipLo = 0.001;
inline constexpr double kNllClipHi = 0.999;

struct MetricsReport {
  double nll = 0.0;
  double brier = 0.0;
  double label_error = 0.0;
  double ece = 0.0;
  std::optional<double> e99;  // absent when no row reaches the threshold
  int e99_count = 0;
  int n = 0;
};

struct EceBin {
  int count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct EceBreakdown {
  std::vector<EceBin> bins;
};

// Mean negative log of the clipped true-label confidence.
double nll(const ProbabilitySet& probs);

// RMS of (1 - true-label confidence); bounded by 1.
double brier(const ProbabilitySet& probs);

// Fraction of rows whose argmax (ties -> lowest class index) misses the label.
double label_error(const ProbabilitySet& probs);

// Expected calibration error over equal-count confidence quantile bins.
// Rows are stably sorted by max-probability; with N = q*bins + r, the first
// r bins take q+1 rows.
std::pair<double, EceBreakdown> ece(const ProbabilitySet& probs, int bins = 10);

// Error rate among rows with max probability >= threshold, plus the count of
// qualifying rows; (absent, 0) when none qualify.
std::pair<std::optional<double>, int> e99(const ProbabilitySet& probs,
                                          double threshold = 0.99);

MetricsReport evaluate(const ProbabilitySet& probs, int ece_bins = 10);

// One report per labeled group present in the set.
std::map<GroupTag, MetricsReport> evaluate_by_group(const ProbabilitySet& probs,
                                                    int ece_bins = 10);

// 100 * (baseline - method) / baseline; negative when the method is worse.
double percent_reduction(double baseline, double method);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EceBreakdown& breakdown);

}  // namespace calibtk
