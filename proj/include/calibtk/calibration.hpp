#pragma once

#include <functional>
#include <span>
#include <utility>
#include <variant>

#include "calibtk/predictions.hpp"
#include "json.hpp"

namespace calibtk {

struct FixedTemperature {
  double t = 1.0;
};

// Per-sample temperature T0 + T1 * normalized novelty, with novelty mapped
// into [0,1] by the training-set 5th/95th percentiles.
struct NoveltyLinearTemperature {
  double t0 = 1.0;
  double t1 = 0.0;
  double p5 = 0.0;
  double p95 = 1.0;
};

class Calibrator {
 public:
  static Calibrator fixed(double t);
  static Calibrator novelty_linear(double t0, double t1, double p5, double p95);

  bool is_fixed() const {
    return std::holds_alternative<FixedTemperature>(v_);
  }
  const FixedTemperature& as_fixed() const;
  const NoveltyLinearTemperature& as_novelty_linear() const;

  // Effective temperature for one record; errors if a novelty-linear
  // calibrator meets a record without a novelty score.
  double temperature_for(const PredictionRecord& record) const;

  // softmax(logits / T_i) per row; preserves within-row ordering.
  ProbabilitySet apply(const PredictionSet& set) const;

  nlohmann::json to_json() const;
  static Calibrator from_json(const nlohmann::json& j);

 private:
  explicit Calibrator(std::variant<FixedTemperature, NoveltyLinearTemperature> v)
      : v_(std::move(v)) {}
  std::variant<FixedTemperature, NoveltyLinearTemperature> v_;
};

// Search protocol shared by the temperature fitters: log-spaced grid over
// [0.05, 10] followed by golden-section refinement to |dT| < 1e-4. Returns
// the best temperature seen (never worse than the best grid point).
double minimize_temperature(const std::function<double(double)>& objective);

inline constexpr double kTemperatureMin = 0.05;
inline constexpr double kTemperatureMax = 10.0;
inline constexpr int kTemperatureGridPoints = 200;

// Single T minimizing validation NLL.
Calibrator fit_temperature(const PredictionSet& val);

// clip((raw - p5) / (p95 - p5), 0, 1); p5 == p95 maps everything to 0.5.
double normalize_novelty(double raw, double p5, double p95);

// Empirical percentiles by linear interpolation between order statistics.
std::pair<double, double> fit_novelty_percentiles(
    std::span<const double> train_scores);

// Exhaustive grid over T0 in {0.25..4.0}, T1 in {0, 0.25..4.0} (step 0.25)
// minimizing validation NLL; ties broken by smaller T1, then smaller T0.
Calibrator fit_novelty_scaling(const PredictionSet& val,
                               std::pair<double, double> percentiles);

}  // namespace calibtk
