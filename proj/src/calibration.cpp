#include "calibtk/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"

namespace calibtk {
namespace {

ProbabilitySet apply_temperatures(const PredictionSet& set,
                                  const std::vector<double>& temperatures) {
  const int c = set.class_count();
  Eigen::MatrixXd rows(set.size(), c);
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<GroupTag> groups;
  ids.reserve(set.size());
  labels.reserve(set.size());
  groups.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& r = set[i];
    Eigen::VectorXd scaled =
        Eigen::Map<const Eigen::VectorXd>(r.logits.data(), c) /
        temperatures[i];
    rows.row(static_cast<Eigen::Index>(i)) = softmax_row(scaled);
    ids.push_back(r.id);
    labels.push_back(r.label);
    groups.push_back(r.group);
  }
  return ProbabilitySet(std::move(rows), std::move(ids), std::move(labels),
                        std::move(groups));
}

double val_nll_at(const PredictionSet& val, double t) {
  return nll(Calibrator::fixed(t).apply(val));
}

}  // namespace

Calibrator Calibrator::fixed(double t) {
  if (!(t > 0.0)) throw InputError("fixed temperature must be > 0");
  return Calibrator(FixedTemperature{t});
}

Calibrator Calibrator::novelty_linear(double t0, double t1, double p5,
                                      double p95) {
  if (!(t0 > 0.0) || !(t0 + t1 > 0.0))
    throw InputError(
        "novelty-linear temperature must stay positive over the normalized "
        "range");
  if (p5 > p95) throw InputError("novelty percentiles must satisfy p5 <= p95");
  return Calibrator(NoveltyLinearTemperature{t0, t1, p5, p95});
}

const FixedTemperature& Calibrator::as_fixed() const {
  if (!is_fixed()) throw InputError("calibrator is not fixed-temperature");
  return std::get<FixedTemperature>(v_);
}

const NoveltyLinearTemperature& Calibrator::as_novelty_linear() const {
  if (is_fixed()) throw InputError("calibrator is not novelty-linear");
  return std::get<NoveltyLinearTemperature>(v_);
}

double Calibrator::temperature_for(const PredictionRecord& record) const {
  if (is_fixed()) return std::get<FixedTemperature>(v_).t;
  const auto& nl = std::get<NoveltyLinearTemperature>(v_);
  if (!record.novelty)
    throw InputError("record '" + record.id +
                     "' has no novelty score for novelty-linear scaling");
  return nl.t0 + nl.t1 * normalize_novelty(*record.novelty, nl.p5, nl.p95);
}

ProbabilitySet Calibrator::apply(const PredictionSet& set) const {
  std::vector<double> temperatures(set.size());
  for (std::size_t i = 0; i < set.size(); ++i)
    temperatures[i] = temperature_for(set[i]);
  return apply_temperatures(set, temperatures);
}

nlohmann::json Calibrator::to_json() const {
  if (is_fixed()) {
    const auto& f = std::get<FixedTemperature>(v_);
    return {{"kind", "fixed"}, {"t", f.t}};
  }
  const auto& nl = std::get<NoveltyLinearTemperature>(v_);
  return {{"kind", "novelty_linear"},
          {"t0", nl.t0},
          {"t1", nl.t1},
          {"p5", nl.p5},
          {"p95", nl.p95}};
}

Calibrator Calibrator::from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "fixed") return fixed(j.at("t").get<double>());
  if (kind == "novelty_linear")
    return novelty_linear(j.at("t0").get<double>(), j.at("t1").get<double>(),
                          j.at("p5").get<double>(), j.at("p95").get<double>());
  throw InputError("unknown calibrator kind '" + kind + "'");
}

double minimize_temperature(const std::function<double(double)>& objective) {
  const double log_lo = std::log(kTemperatureMin);
  const double log_hi = std::log(kTemperatureMax);
  double best_t = kTemperatureMin;
  double best_f = objective(best_t);
  int best_i = 0;
  std::vector<double> grid(kTemperatureGridPoints);
  for (int i = 0; i < kTemperatureGridPoints; ++i) {
    grid[i] = std::exp(log_lo + (log_hi - log_lo) * i /
                                    (kTemperatureGridPoints - 1));
    const double f = objective(grid[i]);
    if (f < best_f) {
      best_f = f;
      best_t = grid[i];
      best_i = i;
    }
  }

  // Golden-section refinement around the best grid point.
  double a = grid[std::max(0, best_i - 1)];
  double b = grid[std::min(kTemperatureGridPoints - 1, best_i + 1)];
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = objective(x1);
  double f2 = objective(x2);
  while (b - a > 1e-4) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = objective(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = objective(x2);
    }
    if (f1 < best_f) {
      best_f = f1;
      best_t = x1;
    }
    if (f2 < best_f) {
      best_f = f2;
      best_t = x2;
    }
  }
  return best_t;
}

Calibrator fit_temperature(const PredictionSet& val) {
  if (val.empty()) throw InputError("fit_temperature on empty validation set");
  const double t =
      minimize_temperature([&](double t) { return val_nll_at(val, t); });
  return Calibrator::fixed(t);
}

double normalize_novelty(double raw, double p5, double p95) {
  if (p5 == p95) return 0.5;
  if (p5 > p95) throw InputError("normalize_novelty needs p5 <= p95");
  return std::clamp((raw - p5) / (p95 - p5), 0.0, 1.0);
}

std::pair<double, double> fit_novelty_percentiles(
    std::span<const double> train_scores) {
  if (train_scores.size() < 2)
    throw InputError("need at least 2 novelty scores for percentiles");
  std::vector<double> sorted(train_scores.begin(), train_scores.end());
  std::sort(sorted.begin(), sorted.end());
  auto percentile = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
  };
  return {percentile(0.05), percentile(0.95)};
}

Calibrator fit_novelty_scaling(const PredictionSet& val,
                               std::pair<double, double> percentiles) {
  if (val.empty())
    throw InputError("fit_novelty_scaling on empty validation set");
  const auto [p5, p95] = percentiles;
  std::vector<double> normalized(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    if (!val[i].novelty)
      throw InputError("record '" + val[i].id +
                       "' has no novelty score for novelty-linear fitting");
    normalized[i] = normalize_novelty(*val[i].novelty, p5, p95);
  }

  double best_nll = std::numeric_limits<double>::infinity();
  double best_t0 = 1.0, best_t1 = 0.0;
  std::vector<double> temperatures(val.size());
  // T1 outer so that strict-improvement replacement lands on the smallest
  // (T1, T0) pair among ties.
  for (int i1 = 0; i1 <= 16; ++i1) {
    const double t1 = 0.25 * i1;
    for (int i0 = 1; i0 <= 16; ++i0) {
      const double t0 = 0.25 * i0;
      for (std::size_t i = 0; i < val.size(); ++i)
        temperatures[i] = t0 + t1 * normalized[i];
      const double f = nll(apply_temperatures(val, temperatures));
      if (f < best_nll) {
        best_nll = f;
        best_t0 = t0;
        best_t1 = t1;
      }
    }
  }
  return Calibrator::novelty_linear(best_t0, best_t1, p5, p95);
}

}  // namespace calibtk
