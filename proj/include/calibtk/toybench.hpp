#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "calibtk/metrics.hpp"
#include "calibtk/mlp.hpp"
#include "calibtk/predictions.hpp"
#include "json.hpp"

namespace calibtk {

// 2D benchmark: train/val drawn from a half-plane slice of a synthetic
// generator, evaluation on a dense grid split into familiar and novel
// partitions, ground truth from the generator's analytic decision rule.
struct ToySpec {
  std::string generator = "blobs";  // blobs | moons | xor | rings
  int n_train = 1200;
  int n_val = 1200;
  int n_unsup = 1200;  // unsupervised pool drawn without the region restriction
  int grid_resolution = 100;  // points per axis
  double label_noise = 0.0;   // train/val label flip probability
  std::optional<double> noise;  // generator spread; unset = per-generator default
  std::array<double, 2> familiar_normal = {1.0, 0.0};
  double familiar_offset = 0.0;  // familiar <=> normal . x <= offset
  std::uint64_t seed = 0;

  // Model/training knobs, recorded in run metadata so runs are
  // self-describing. Three equal hidden layers, desk-scale width.
  std::vector<int> hidden_widths = {128, 128, 128};
  double dropout_rate = 0.2;
  double learning_rate = 3e-3;
  int batch_size = 128;
  int max_epochs = 24;
  int ensemble_size = 10;
  bool retrain_on_train_val = false;
  double score_temperature = 1000.0;  // novelty-score softmax temperature

  double resolved_noise() const;
  bool familiar(double x0, double x1) const;
  void validate() const;
  nlohmann::json to_json() const;
  static ToySpec from_json(const nlohmann::json& j);
};

// Most likely class under the generator's distribution at (x0, x1); defined
// on the whole plane, so novel points carry the same P(y|x) rule.
int rule_label(const std::string& generator, double noise, double x0,
               double x1);

struct TaggedDataset {
  Eigen::MatrixXd inputs;
  std::vector<int> labels;
  std::vector<GroupTag> groups;
  std::vector<std::string> ids;
  int size() const { return static_cast<int>(inputs.rows()); }
};

struct ToyData {
  Dataset train;
  Dataset val;
  TaggedDataset grid;
};

// Rejection-samples train/val inside the familiar region and lays the
// labeled grid over the sample bounding box with a 10% margin per side.
// Errors when region acceptance falls below 1%.
ToyData generate(const ToySpec& spec);

// Unrestricted generator draws with labels discarded (the distillation pool).
Dataset generate_pool(const ToySpec& spec, int count, std::uint64_t seed);

// 1 - max softmax(logits / score_temperature); higher = more novel.
std::vector<double> novelty_score(const MlpModel& model,
                                  const Eigen::MatrixXd& inputs,
                                  double score_temperature = 1000.0);

inline const std::vector<std::string> kFullRoster = {
    "single",  "single_tscale", "ensemble", "ensemble_tscale",
    "distill", "gdistill",      "bayes",    "novelty_scale"};

struct MethodEval {
  std::optional<MetricsReport> familiar;
  std::optional<MetricsReport> novel;
  nlohmann::json details;  // calibration parameters, clamps, schedules
  std::string error;       // non-empty when the method failed for this seed
};

struct SweepCurve {
  std::vector<double> temperatures;
  std::vector<double> familiar_nll;
  std::vector<double> novel_nll;
  double familiar_best_t = 1.0;
  double novel_best_t = 1.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::map<std::string, MethodEval> methods;
  SweepCurve sweep;  // single-model NLL(T) curves over the grid partitions
  nlohmann::json audits;
};

struct HeatPoint {
  double x0 = 0.0;
  double x1 = 0.0;
  GroupTag group = GroupTag::familiar_test;
  std::string method;
  double nll = 0.0;
};

struct ToyRun {
  ToySpec spec;
  std::vector<std::string> roster;
  std::vector<std::uint64_t> seeds;
  std::vector<SeedResult> results;
  nlohmann::json aggregates;  // method -> region -> metric -> {mean, stddev, n}
  std::vector<HeatPoint> heatmap;  // first seed only
  nlohmann::json to_json() const;
};

// Full protocol per seed: regenerate data, train the members the roster
// needs, fit per-member temperatures on val, build the ensembles, distill
// the students against the calibrated ensemble, train the sampled-logit
// model, fit novelty scaling from the first member's scores, evaluate
// everything on the familiar/novel grid partitions, and sweep NLL(T) for
// the first member. Method failures are recorded per seed; other methods
// and seeds continue.
ToyRun run_experiment(const ToySpec& spec,
                      std::vector<std::string> roster = kFullRoster,
                      std::vector<std::uint64_t> seeds = {});

// One row per grid point and method: x0,x1,group,method,nll.
void write_heatmap_csv(const ToyRun& run, const std::filesystem::path& path);

}  // namespace calibtk
