#include "calibtk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calibtk/errors.hpp"

namespace calibtk {
namespace {

void require_labeled(const ProbabilitySet& probs) {
  if (probs.empty()) throw InputError("metric on empty probability set");
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs.labels()[i] < 0)
      throw InputError("metric on unlabeled row (id=" + probs.ids()[i] + ")");
}

// Argmax with ties broken by the lowest class index.
int argmax_row(const Eigen::MatrixXd& rows, Eigen::Index i) {
  int best = 0;
  for (Eigen::Index c = 1; c < rows.cols(); ++c)
    if (rows(i, c) > rows(i, best)) best = static_cast<int>(c);
  return best;
}

}  // namespace

double nll(const ProbabilitySet& probs) {
  require_labeled(probs);
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.rows()(static_cast<Eigen::Index>(i),
                                  probs.labels()[i]);
    sum += std::log(std::clamp(p, kNllClipLo, kNllClipHi));
  }
  return -sum / static_cast<double>(probs.size());
}

double brier(const ProbabilitySet& probs) {
  require_labeled(probs);
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.rows()(static_cast<Eigen::Index>(i),
                                  probs.labels()[i]);
    sum += (1.0 - p) * (1.0 - p);
  }
  return std::sqrt(sum / static_cast<double>(probs.size()));
}

double label_error(const ProbabilitySet& probs) {
  require_labeled(probs);
  int wrong = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (argmax_row(probs.rows(), static_cast<Eigen::Index>(i)) !=
        probs.labels()[i])
      ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(probs.size());
}

std::pair<double, EceBreakdown> ece(const ProbabilitySet& probs, int bins) {
  require_labeled(probs);
  if (bins < 1) throw InputError("ece needs bins >= 1");
  const auto n = static_cast<int>(probs.size());

  struct Row {
    double confidence;
    bool correct;
  };
  std::vector<Row> rows(n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n; ++i) {
    const int am = argmax_row(probs.rows(), i);
    rows[i] = {probs.rows()(i, am), am == probs.labels()[i]};
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return rows[a].confidence < rows[b].confidence;
  });

  // Equal-count bins; the first (n % bins) bins take the extra row.
  const int base = n / bins;
  const int extra = n % bins;
  EceBreakdown breakdown;
  double weighted_gap = 0.0;
  int pos = 0;
  for (int b = 0; b < bins; ++b) {
    const int count = base + (b < extra ? 1 : 0);
    EceBin bin;
    bin.count = count;
    double conf = 0.0, acc = 0.0;
    for (int k = 0; k < count; ++k, ++pos) {
      conf += rows[order[pos]].confidence;
      acc += rows[order[pos]].correct ? 1.0 : 0.0;
    }
    if (count > 0) {
      bin.mean_confidence = conf / count;
      bin.accuracy = acc / count;
      weighted_gap += (static_cast<double>(count) / n) *
                      std::abs(bin.accuracy - bin.mean_confidence);
    }
    breakdown.bins.push_back(bin);
  }
  return {weighted_gap, std::move(breakdown)};
}

std::pair<std::optional<double>, int> e99(const ProbabilitySet& probs,
                                          double threshold) {
  if (probs.empty()) return {std::nullopt, 0};
  require_labeled(probs);
  int qualifying = 0;
  int wrong = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto idx = static_cast<Eigen::Index>(i);
    const int am = argmax_row(probs.rows(), idx);
    if (probs.rows()(idx, am) >= threshold) {
      ++qualifying;
      if (am != probs.labels()[i]) ++wrong;
    }
  }
  if (qualifying == 0) return {std::nullopt, 0};
  return {static_cast<double>(wrong) / qualifying, qualifying};
}

MetricsReport evaluate(const ProbabilitySet& probs, int ece_bins) {
  require_labeled(probs);
  MetricsReport report;
  report.nll = nll(probs);
  report.brier = brier(probs);
  report.label_error = label_error(probs);
  report.ece = ece(probs, ece_bins).first;
  auto [rate, count] = e99(probs);
  report.e99 = rate;
  report.e99_count = count;
  report.n = static_cast<int>(probs.size());
  return report;
}

std::map<GroupTag, MetricsReport> evaluate_by_group(const ProbabilitySet& probs,
                                                    int ece_bins) {
  std::map<GroupTag, MetricsReport> out;
  for (GroupTag tag : kAllGroups) {
    if (tag == GroupTag::unsup) continue;
    auto subset = filter_by_group(probs, tag);
    if (!subset.empty()) out[tag] = evaluate(subset, ece_bins);
  }
  return out;
}

double percent_reduction(double baseline, double method) {
  if (!(baseline > 0.0))
    throw InputError("percent_reduction needs baseline > 0");
  return 100.0 * (baseline - method) / baseline;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["nll"] = report.nll;
  j["brier"] = report.brier;
  j["label_error"] = report.label_error;
  j["ece"] = report.ece;
  j["e99"] = report.e99 ? nlohmann::json(*report.e99) : nlohmann::json(nullptr);
  j["e99_count"] = report.e99_count;
  j["n"] = report.n;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport report;
  report.nll = j.at("nll").get<double>();
  report.brier = j.at("brier").get<double>();
  report.label_error = j.at("label_error").get<double>();
  report.ece = j.at("ece").get<double>();
  if (j.contains("e99") && !j["e99"].is_null())
    report.e99 = j["e99"].get<double>();
  report.e99_count = j.value("e99_count", 0);
  report.n = j.value("n", 0);
  if (report.e99.has_value() != (report.e99_count > 0))
    throw InputError("report: e99 must be present iff e99_count > 0");
  return report;
}

nlohmann::json to_json(const EceBreakdown& breakdown) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& bin : breakdown.bins)
    arr.push_back({{"count", bin.count},
                   {"mean_confidence", bin.mean_confidence},
                   {"accuracy", bin.accuracy}});
  return arr;
}

}  // namespace calibtk
