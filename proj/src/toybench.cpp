#include "calibtk/toybench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#include "calibtk/calibration.hpp"
#include "calibtk/distillation.hpp"
#include "calibtk/ensemble.hpp"
#include "calibtk/errors.hpp"
#include "calibtk/uncertainty.hpp"

namespace calibtk {

namespace {

enum class Gen { blobs, moons, xor_grid, rings };

// Substream labels hashed with the run seed, one per independent purpose.
constexpr std::uint64_t kStreamData = 1;
constexpr std::uint64_t kStreamPool = 2;
constexpr std::uint64_t kStreamMemberInit = 3;
constexpr std::uint64_t kStreamMemberTrain = 4;
constexpr std::uint64_t kStreamRetrain = 5;
constexpr std::uint64_t kStreamDistill = 6;
constexpr std::uint64_t kStreamGdistill = 7;
constexpr std::uint64_t kStreamBayes = 8;
constexpr std::uint64_t kStreamBayesPredict = 9;
constexpr std::uint64_t kStreamSupport = 10;

Gen parse_generator(const std::string& name) {
  if (name == "blobs") return Gen::blobs;
  if (name == "moons") return Gen::moons;
  if (name == "xor") return Gen::xor_grid;
  if (name == "rings") return Gen::rings;
  throw InputError("toy: unknown generator '" + name +
                   "' (expected blobs, moons, xor, or rings)");
}

double default_noise(Gen g) {
  switch (g) {
    case Gen::blobs: return 1.0;
    case Gen::moons: return 0.3;
    case Gen::xor_grid: return 1.0;
    case Gen::rings: return 0.35;
  }
  return 1.0;
}

struct RawSample {
  double x0 = 0.0;
  double x1 = 0.0;
  int label = 0;
};

// blobs: one Gaussian pair per class laid out in a cross.
constexpr double kBlobCenters[4][2] = {
    {-2.5, 0.0}, {2.5, 0.0}, {0.0, -2.5}, {0.0, 2.5}};
constexpr int kBlobLabels[4] = {0, 0, 1, 1};

// xor: quadrant blobs with alternating labels.
constexpr double kXorCenters[4][2] = {
    {2.0, 2.0}, {-2.0, -2.0}, {2.0, -2.0}, {-2.0, 2.0}};
constexpr int kXorLabels[4] = {0, 0, 1, 1};

// moons: two interleaved unit semicircles, centered so the overall
// centroid sits at the origin.
constexpr double kMoonCenter0[2] = {-0.5, 0.0};  // upper arc
constexpr double kMoonCenter1[2] = {0.5, 0.5};   // lower arc

constexpr double kRingRadius[2] = {1.2, 2.8};

RawSample sample_raw(Gen g, double noise, Rng& rng) {
  RawSample s;
  switch (g) {
    case Gen::blobs: {
      const auto pick = static_cast<std::size_t>(rng.below(4));
      s.x0 = kBlobCenters[pick][0] + noise * rng.normal();
      s.x1 = kBlobCenters[pick][1] + noise * rng.normal();
      s.label = kBlobLabels[pick];
      break;
    }
    case Gen::xor_grid: {
      const auto pick = static_cast<std::size_t>(rng.below(4));
      s.x0 = kXorCenters[pick][0] + noise * rng.normal();
      s.x1 = kXorCenters[pick][1] + noise * rng.normal();
      s.label = kXorLabels[pick];
      break;
    }
    case Gen::moons: {
      const auto arc = static_cast<int>(rng.below(2));
      const double t = rng.uniform(0.0, std::numbers::pi);
      if (arc == 0) {
        s.x0 = std::cos(t) + kMoonCenter0[0];
        s.x1 = std::sin(t) + kMoonCenter0[1];
      } else {
        s.x0 = kMoonCenter1[0] - std::cos(t);
        s.x1 = kMoonCenter1[1] - std::sin(t);
      }
      s.x0 += noise * rng.normal();
      s.x1 += noise * rng.normal();
      s.label = arc;
      break;
    }
    case Gen::rings: {
      const auto ring = static_cast<int>(rng.below(2));
      const double r = kRingRadius[ring] + noise * rng.normal();
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      s.x0 = r * std::cos(theta);
      s.x1 = r * std::sin(theta);
      s.label = ring;
      break;
    }
  }
  return s;
}

double gaussian_pair_density(const double centers[2][2], double noise,
                             double x0, double x1) {
  double total = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double dx = x0 - centers[i][0];
    const double dy = x1 - centers[i][1];
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * noise * noise));
  }
  return total;
}

// Distance to a unit semicircular arc (upper: y >= cy half; lower: y <= cy).
double arc_distance(double px, double py, double cx, double cy, bool upper) {
  const double dx = px - cx;
  const double dy = py - cy;
  const bool in_range = upper ? dy >= 0.0 : dy <= 0.0;
  if (in_range) return std::abs(std::hypot(dx, dy) - 1.0);
  const double d1 = std::hypot(px - (cx + 1.0), py - cy);
  const double d2 = std::hypot(px - (cx - 1.0), py - cy);
  return std::min(d1, d2);
}

int rule_label_impl(Gen g, double noise, double x0, double x1) {
  switch (g) {
    case Gen::blobs: {
      const double class0[2][2] = {{kBlobCenters[0][0], kBlobCenters[0][1]},
                                   {kBlobCenters[1][0], kBlobCenters[1][1]}};
      const double class1[2][2] = {{kBlobCenters[2][0], kBlobCenters[2][1]},
                                   {kBlobCenters[3][0], kBlobCenters[3][1]}};
      return gaussian_pair_density(class0, noise, x0, x1) >=
                     gaussian_pair_density(class1, noise, x0, x1)
                 ? 0
                 : 1;
    }
    case Gen::xor_grid:
      return x0 * x1 >= 0.0 ? 0 : 1;
    case Gen::moons: {
      const double d0 =
          arc_distance(x0, x1, kMoonCenter0[0], kMoonCenter0[1], true);
      const double d1 =
          arc_distance(x0, x1, kMoonCenter1[0], kMoonCenter1[1], false);
      return d0 <= d1 ? 0 : 1;
    }
    case Gen::rings: {
      const double r = std::hypot(x0, x1);
      return std::abs(r - kRingRadius[0]) <= std::abs(r - kRingRadius[1]) ? 0
                                                                          : 1;
    }
  }
  return 0;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

PredictionSet model_predictions(const MlpModel& model,
                                const Eigen::MatrixXd& inputs,
                                const std::vector<std::string>& ids,
                                const std::vector<int>& labels,
                                const std::vector<GroupTag>* groups,
                                GroupTag tag,
                                const std::vector<double>* novelty = nullptr) {
  const int classes = model.config().class_count;
  const Eigen::MatrixXd out = forward_eval(model, inputs);
  std::vector<PredictionRecord> records;
  records.reserve(ids.size());
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    PredictionRecord rec;
    rec.id = ids[i];
    rec.logits.resize(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
      rec.logits[static_cast<std::size_t>(c)] = out(r, c);
    }
    rec.label = labels.empty() ? kUnlabeled : labels[i];
    rec.group = groups != nullptr ? (*groups)[i] : tag;
    if (novelty != nullptr) rec.novelty = (*novelty)[i];
    records.push_back(std::move(rec));
  }
  return PredictionSet(std::move(records), classes);
}

std::vector<std::string> indexed_ids(const std::string& prefix, int n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return ids;
}

nlohmann::json stat_json(std::vector<double> values) {
  nlohmann::json j;
  const auto n = values.size();
  j["n"] = n;
  if (n == 0) {
    j["mean"] = nullptr;
    j["stddev"] = nullptr;
    return j;
  }
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const double v : values) var += (v - mean) * (v - mean);
  const double stddev =
      n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  j["mean"] = mean;
  j["stddev"] = stddev;
  return j;
}

nlohmann::json method_eval_json(const MethodEval& ev) {
  nlohmann::json j;
  if (!ev.error.empty()) {
    j["error"] = ev.error;
    return j;
  }
  j["familiar"] = ev.familiar ? to_json(*ev.familiar) : nlohmann::json();
  j["novel"] = ev.novel ? to_json(*ev.novel) : nlohmann::json();
  j["details"] = ev.details;
  return j;
}

}  // namespace

double ToySpec::resolved_noise() const {
  if (noise.has_value()) return *noise;
  return default_noise(parse_generator(generator));
}

bool ToySpec::familiar(double x0, double x1) const {
  return familiar_normal[0] * x0 + familiar_normal[1] * x1 <=
         familiar_offset + 1e-12;
}

void ToySpec::validate() const {
  parse_generator(generator);
  if (n_train < 1 || n_val < 1) {
    throw InputError("toy spec: n_train and n_val must be >= 1");
  }
  if (n_unsup < 0) throw InputError("toy spec: n_unsup must be >= 0");
  if (grid_resolution < 2) {
    throw InputError("toy spec: grid_resolution must be >= 2");
  }
  if (label_noise < 0.0 || label_noise >= 1.0) {
    throw InputError("toy spec: label_noise must be in [0, 1)");
  }
  if (noise.has_value() && *noise <= 0.0) {
    throw InputError("toy spec: noise must be positive");
  }
  const double norm =
      std::hypot(familiar_normal[0], familiar_normal[1]);
  if (std::abs(norm - 1.0) > 1e-6) {
    throw InputError("toy spec: familiar_normal must be a unit vector");
  }
  if (hidden_widths.empty()) {
    throw InputError("toy spec: hidden_widths must be non-empty");
  }
  for (const int w : hidden_widths) {
    if (w < 1) throw InputError("toy spec: hidden widths must be >= 1");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw InputError("toy spec: dropout_rate must be in [0, 1)");
  }
  if (learning_rate <= 0.0) {
    throw InputError("toy spec: learning_rate must be positive");
  }
  if (batch_size < 1) throw InputError("toy spec: batch_size must be >= 1");
  if (max_epochs < 1) throw InputError("toy spec: max_epochs must be >= 1");
  if (ensemble_size < 1) {
    throw InputError("toy spec: ensemble_size must be >= 1");
  }
  if (score_temperature <= 0.0) {
    throw InputError("toy spec: score_temperature must be positive");
  }
}

nlohmann::json ToySpec::to_json() const {
  nlohmann::json j;
  j["generator"] = generator;
  j["n_train"] = n_train;
  j["n_val"] = n_val;
  j["n_unsup"] = n_unsup;
  j["grid_resolution"] = grid_resolution;
  j["label_noise"] = label_noise;
  j["noise"] = noise.has_value() ? nlohmann::json(*noise) : nlohmann::json();
  j["familiar_normal"] = familiar_normal;
  j["familiar_offset"] = familiar_offset;
  j["seed"] = seed;
  j["hidden_widths"] = hidden_widths;
  j["dropout_rate"] = dropout_rate;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["max_epochs"] = max_epochs;
  j["ensemble_size"] = ensemble_size;
  j["retrain_on_train_val"] = retrain_on_train_val;
  j["score_temperature"] = score_temperature;
  return j;
}

ToySpec ToySpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("toy spec: expected a JSON object");
  static const std::set<std::string> known = {
      "generator",      "n_train",        "n_val",
      "n_unsup",        "grid_resolution", "label_noise",
      "noise",          "familiar_normal", "familiar_offset",
      "seed",           "hidden_widths",   "dropout_rate",
      "learning_rate",  "batch_size",      "max_epochs",
      "ensemble_size",  "retrain_on_train_val", "score_temperature"};
  for (const auto& [key, value] : j.items()) {
    if (known.find(key) == known.end()) {
      throw InputError("toy spec: unknown field '" + key + "'");
    }
  }
  ToySpec spec;
  try {
    spec.generator = j.value("generator", spec.generator);
    spec.n_train = j.value("n_train", spec.n_train);
    spec.n_val = j.value("n_val", spec.n_val);
    spec.n_unsup = j.value("n_unsup", spec.n_unsup);
    spec.grid_resolution = j.value("grid_resolution", spec.grid_resolution);
    spec.label_noise = j.value("label_noise", spec.label_noise);
    if (j.contains("noise") && !j.at("noise").is_null()) {
      spec.noise = j.at("noise").get<double>();
    }
    if (j.contains("familiar_normal")) {
      spec.familiar_normal =
          j.at("familiar_normal").get<std::array<double, 2>>();
    }
    spec.familiar_offset = j.value("familiar_offset", spec.familiar_offset);
    spec.seed = j.value("seed", spec.seed);
    spec.hidden_widths = j.value("hidden_widths", spec.hidden_widths);
    spec.dropout_rate = j.value("dropout_rate", spec.dropout_rate);
    spec.learning_rate = j.value("learning_rate", spec.learning_rate);
    spec.batch_size = j.value("batch_size", spec.batch_size);
    spec.max_epochs = j.value("max_epochs", spec.max_epochs);
    spec.ensemble_size = j.value("ensemble_size", spec.ensemble_size);
    spec.retrain_on_train_val =
        j.value("retrain_on_train_val", spec.retrain_on_train_val);
    spec.score_temperature =
        j.value("score_temperature", spec.score_temperature);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("toy spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

int rule_label(const std::string& generator, double noise, double x0,
               double x1) {
  return rule_label_impl(parse_generator(generator), noise, x0, x1);
}

ToyData generate(const ToySpec& spec) {
  spec.validate();
  const Gen gen = parse_generator(spec.generator);
  const double noise = spec.resolved_noise();
  Rng rng(derive_seed(spec.seed, kStreamData));

  const int wanted = spec.n_train + spec.n_val;
  std::vector<RawSample> samples;
  samples.reserve(static_cast<std::size_t>(wanted));
  long long attempts = 0;
  while (static_cast<int>(samples.size()) < wanted) {
    ++attempts;
    if (attempts >= 1000 &&
        static_cast<long long>(samples.size()) * 100 < attempts) {
      throw InputError(
          "toy: familiar-region acceptance rate below 1%; region is "
          "degenerate for this generator");
    }
    RawSample s = sample_raw(gen, noise, rng);
    if (!spec.familiar(s.x0, s.x1)) continue;
    if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise) {
      s.label = 1 - s.label;
    }
    samples.push_back(s);
  }

  double lo0 = samples[0].x0, hi0 = samples[0].x0;
  double lo1 = samples[0].x1, hi1 = samples[0].x1;
  for (const RawSample& s : samples) {
    lo0 = std::min(lo0, s.x0);
    hi0 = std::max(hi0, s.x0);
    lo1 = std::min(lo1, s.x1);
    hi1 = std::max(hi1, s.x1);
  }
  // The test grid is densely sampled over the generator's full support, not
  // just the familiar slice, so widen the box with an unrestricted reference
  // draw before padding. Separate stream keeps train/val draws unchanged.
  Rng support_rng(derive_seed(spec.seed, kStreamSupport));
  for (int i = 0; i < wanted; ++i) {
    const RawSample s = sample_raw(gen, noise, support_rng);
    lo0 = std::min(lo0, s.x0);
    hi0 = std::max(hi0, s.x0);
    lo1 = std::min(lo1, s.x1);
    hi1 = std::max(hi1, s.x1);
  }
  const double pad0 = std::max(0.1 * (hi0 - lo0), 1e-6);
  const double pad1 = std::max(0.1 * (hi1 - lo1), 1e-6);
  lo0 -= pad0;
  hi0 += pad0;
  lo1 -= pad1;
  hi1 += pad1;

  ToyData data;
  data.train.inputs.resize(spec.n_train, 2);
  data.train.labels.resize(static_cast<std::size_t>(spec.n_train));
  data.train.ids = indexed_ids("tr_", spec.n_train);
  data.val.inputs.resize(spec.n_val, 2);
  data.val.labels.resize(static_cast<std::size_t>(spec.n_val));
  data.val.ids = indexed_ids("va_", spec.n_val);
  for (int i = 0; i < spec.n_train; ++i) {
    data.train.inputs(i, 0) = samples[static_cast<std::size_t>(i)].x0;
    data.train.inputs(i, 1) = samples[static_cast<std::size_t>(i)].x1;
    data.train.labels[static_cast<std::size_t>(i)] =
        samples[static_cast<std::size_t>(i)].label;
  }
  for (int i = 0; i < spec.n_val; ++i) {
    const auto k = static_cast<std::size_t>(spec.n_train + i);
    data.val.inputs(i, 0) = samples[k].x0;
    data.val.inputs(i, 1) = samples[k].x1;
    data.val.labels[static_cast<std::size_t>(i)] = samples[k].label;
  }

  const int res = spec.grid_resolution;
  const int points = res * res;
  data.grid.inputs.resize(points, 2);
  data.grid.labels.resize(static_cast<std::size_t>(points));
  data.grid.groups.resize(static_cast<std::size_t>(points));
  data.grid.ids = indexed_ids("gd_", points);
  const double step0 = (hi0 - lo0) / (res - 1);
  const double step1 = (hi1 - lo1) / (res - 1);
  for (int iy = 0; iy < res; ++iy) {
    for (int ix = 0; ix < res; ++ix) {
      const int idx = iy * res + ix;
      const double x0 = lo0 + step0 * ix;
      const double x1 = lo1 + step1 * iy;
      data.grid.inputs(idx, 0) = x0;
      data.grid.inputs(idx, 1) = x1;
      data.grid.labels[static_cast<std::size_t>(idx)] =
          rule_label_impl(gen, noise, x0, x1);
      data.grid.groups[static_cast<std::size_t>(idx)] =
          spec.familiar(x0, x1) ? GroupTag::familiar_test
                                : GroupTag::novel_test;
    }
  }
  return data;
}

Dataset generate_pool(const ToySpec& spec, int count, std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw InputError("toy: pool size must be >= 1");
  const Gen gen = parse_generator(spec.generator);
  const double noise = spec.resolved_noise();
  Rng rng(derive_seed(seed, kStreamPool));
  Dataset pool;
  pool.inputs.resize(count, 2);
  pool.labels.assign(static_cast<std::size_t>(count), kUnlabeled);
  pool.ids = indexed_ids("un_", count);
  for (int i = 0; i < count; ++i) {
    const RawSample s = sample_raw(gen, noise, rng);
    pool.inputs(i, 0) = s.x0;
    pool.inputs(i, 1) = s.x1;
  }
  return pool;
}

std::vector<double> novelty_score(const MlpModel& model,
                                  const Eigen::MatrixXd& inputs,
                                  double score_temperature) {
  if (score_temperature <= 0.0) {
    throw InputError("novelty score: temperature must be positive");
  }
  const int classes = model.config().class_count;
  const Eigen::MatrixXd out = forward_eval(model, inputs);
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(inputs.rows()));
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    const Eigen::VectorXd probs = softmax_row(
        out.row(r).head(classes).transpose() / score_temperature);
    scores.push_back(1.0 - probs.maxCoeff());
  }
  return scores;
}

namespace {

struct SeedContext {
  ToySpec spec;
  ToyData data;
  std::vector<MlpModel> members;
  std::vector<double> member_t;
  std::vector<PredictionSet> member_grid;  // aligned on grid ids
};

bool roster_has(const std::vector<std::string>& roster,
                const std::string& name) {
  return std::find(roster.begin(), roster.end(), name) != roster.end();
}

void append_heatmap(std::vector<HeatPoint>* sink, const SeedContext& ctx,
                    const std::string& method, const ProbabilitySet& probs) {
  if (sink == nullptr) return;
  const Eigen::MatrixXd& x = ctx.data.grid.inputs;
  for (Eigen::Index r = 0; r < probs.rows().rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    const int label = probs.labels()[i];
    const double p = std::clamp(probs.rows()(r, label), kNllClipLo,
                                kNllClipHi);
    sink->push_back(
        {x(r, 0), x(r, 1), probs.groups()[i], method, -std::log(p)});
  }
}

MethodEval evaluate_method(const ProbabilitySet& probs, nlohmann::json details) {
  MethodEval ev;
  ev.details = std::move(details);
  const auto by_group = evaluate_by_group(probs);
  if (const auto it = by_group.find(GroupTag::familiar_test);
      it != by_group.end()) {
    ev.familiar = it->second;
  }
  if (const auto it = by_group.find(GroupTag::novel_test);
      it != by_group.end()) {
    ev.novel = it->second;
  }
  return ev;
}

SweepCurve sweep_single(const SeedContext& ctx) {
  SweepCurve curve;
  const PredictionSet& grid_set = ctx.member_grid.front();
  bool has_both = false;
  {
    const ProbabilitySet p = to_probabilities(grid_set);
    has_both = !filter_by_group(p, GroupTag::familiar_test).empty() &&
               !filter_by_group(p, GroupTag::novel_test).empty();
  }
  if (!has_both) return curve;
  double best_fam = std::numeric_limits<double>::infinity();
  double best_nov = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= 40; ++k) {
    const double t = 0.25 * k;
    const ProbabilitySet scaled = Calibrator::fixed(t).apply(grid_set);
    const double fam = nll(filter_by_group(scaled, GroupTag::familiar_test));
    const double nov = nll(filter_by_group(scaled, GroupTag::novel_test));
    curve.temperatures.push_back(t);
    curve.familiar_nll.push_back(fam);
    curve.novel_nll.push_back(nov);
    if (fam < best_fam) {
      best_fam = fam;
      curve.familiar_best_t = t;
    }
    if (nov < best_nov) {
      best_nov = nov;
      curve.novel_best_t = t;
    }
  }
  return curve;
}

nlohmann::json run_audits(const SeedContext& ctx, const Dataset* pool) {
  std::unordered_set<std::string> sample_ids;
  for (const std::string& id : ctx.data.train.ids) sample_ids.insert(id);
  for (const std::string& id : ctx.data.val.ids) sample_ids.insert(id);
  int novel_overlap = 0;
  std::unordered_set<std::string> grid_ids;
  int familiar_count = 0;
  int novel_count = 0;
  for (std::size_t i = 0; i < ctx.data.grid.ids.size(); ++i) {
    grid_ids.insert(ctx.data.grid.ids[i]);
    if (ctx.data.grid.groups[i] == GroupTag::novel_test) {
      ++novel_count;
      if (sample_ids.count(ctx.data.grid.ids[i]) > 0) ++novel_overlap;
    } else {
      ++familiar_count;
    }
  }
  bool inside = true;
  for (int i = 0; i < ctx.data.train.size() && inside; ++i) {
    inside = ctx.spec.familiar(ctx.data.train.inputs(i, 0),
                               ctx.data.train.inputs(i, 1));
  }
  for (int i = 0; i < ctx.data.val.size() && inside; ++i) {
    inside = ctx.spec.familiar(ctx.data.val.inputs(i, 0),
                               ctx.data.val.inputs(i, 1));
  }
  int pool_overlap = 0;
  if (pool != nullptr) {
    for (const std::string& id : pool->ids) {
      if (grid_ids.count(id) > 0) ++pool_overlap;
    }
  }
  nlohmann::json audits;
  audits["train_val_inside_familiar"] = inside;
  audits["novel_ids_in_train_or_val"] = novel_overlap;
  audits["pool_ids_in_grid"] =
      pool != nullptr ? nlohmann::json(pool_overlap) : nlohmann::json();
  audits["grid_partition_complete"] =
      familiar_count + novel_count == ctx.data.grid.size();
  const bool pass = inside && novel_overlap == 0 && pool_overlap == 0 &&
                    familiar_count + novel_count == ctx.data.grid.size();
  audits["pass"] = pass;
  if (!pass) {
    throw InputError("toy: data partition audit failed: " + audits.dump());
  }
  return audits;
}

SeedResult run_seed(const ToySpec& base_spec,
                    const std::vector<std::string>& roster,
                    std::uint64_t seed, std::vector<HeatPoint>* heatmap) {
  SeedContext ctx;
  ctx.spec = base_spec;
  ctx.spec.seed = seed;
  ctx.data = generate(ctx.spec);
  const ToySpec& spec = ctx.spec;

  SeedResult out;
  out.seed = seed;

  const bool needs_ensemble =
      roster_has(roster, "ensemble") || roster_has(roster, "ensemble_tscale") ||
      roster_has(roster, "distill") || roster_has(roster, "gdistill");
  const bool needs_single = needs_ensemble || roster_has(roster, "single") ||
                            roster_has(roster, "single_tscale") ||
                            roster_has(roster, "novelty_scale");
  const int member_count =
      needs_ensemble ? spec.ensemble_size : (needs_single ? 1 : 0);
  const bool needs_students =
      roster_has(roster, "distill") || roster_has(roster, "gdistill");

  MlpConfig config;
  config.input_dim = 2;
  config.hidden_widths = spec.hidden_widths;
  config.class_count = 2;
  config.dropout_rate = spec.dropout_rate;
  config.use_batchnorm = true;

  TrainConfig tc_base;
  tc_base.learning_rate = spec.learning_rate;
  tc_base.batch_size = spec.batch_size;
  tc_base.max_epochs = spec.max_epochs;

  // Combined train+val set for the optional post-fit retrain.
  Dataset train_val;
  if (spec.retrain_on_train_val) {
    train_val.inputs.resize(ctx.data.train.size() + ctx.data.val.size(), 2);
    train_val.inputs.topRows(ctx.data.train.size()) = ctx.data.train.inputs;
    train_val.inputs.bottomRows(ctx.data.val.size()) = ctx.data.val.inputs;
    train_val.labels = ctx.data.train.labels;
    train_val.labels.insert(train_val.labels.end(),
                            ctx.data.val.labels.begin(),
                            ctx.data.val.labels.end());
  }

  std::vector<nlohmann::json> member_info;
  for (int j = 0; j < member_count; ++j) {
    const std::uint64_t init_seed = derive_seed(seed, kStreamMemberInit,
                                                static_cast<std::uint64_t>(j));
    TrainConfig tc = tc_base;
    tc.seed = derive_seed(seed, kStreamMemberTrain,
                          static_cast<std::uint64_t>(j));
    TrainResult res = train(MlpModel::init(config, init_seed), ctx.data.train,
                            ctx.data.val, tc);
    // Temperature is fit on validation with the pre-retrain model.
    const PredictionSet val_pred = model_predictions(
        res.model, ctx.data.val.inputs, ctx.data.val.ids,
        ctx.data.val.labels, nullptr, GroupTag::val);
    const double tj = fit_temperature(val_pred).as_fixed().t;
    nlohmann::json info;
    info["epochs"] = res.log.epochs.size();
    info["lr_drops"] = res.log.lr_drops;
    info["t"] = tj;
    MlpModel final_model = std::move(res.model);
    if (spec.retrain_on_train_val) {
      TrainConfig rc = tc_base;
      rc.seed = derive_seed(seed, kStreamRetrain,
                            static_cast<std::uint64_t>(j));
      final_model =
          train_fixed_schedule(MlpModel::init(config, init_seed), train_val,
                               rc, schedule_from_log(res.log));
      info["retrained"] = true;
    }
    ctx.member_grid.push_back(model_predictions(
        final_model, ctx.data.grid.inputs, ctx.data.grid.ids,
        ctx.data.grid.labels, &ctx.data.grid.groups, GroupTag::familiar_test));
    ctx.members.push_back(std::move(final_model));
    ctx.member_t.push_back(tj);
    member_info.push_back(std::move(info));
  }

  auto run_method = [&](const std::string& name, auto&& fn) {
    if (!roster_has(roster, name)) return;
    try {
      auto [probs, details] = fn();
      out.methods[name] = evaluate_method(probs, std::move(details));
      append_heatmap(heatmap, ctx, name, probs);
    } catch (const std::exception& e) {
      MethodEval ev;
      ev.error = e.what();
      out.methods[name] = std::move(ev);
    }
  };

  run_method("single", [&] {
    return std::pair(to_probabilities(ctx.member_grid.at(0)),
                     member_info.at(0));
  });
  run_method("single_tscale", [&] {
    const double t = ctx.member_t.at(0);
    return std::pair(Calibrator::fixed(t).apply(ctx.member_grid.at(0)),
                     nlohmann::json{{"t", t}});
  });
  run_method("ensemble", [&] {
    std::vector<ProbabilitySet> parts;
    for (const PredictionSet& g : ctx.member_grid) {
      parts.push_back(to_probabilities(g));
    }
    return std::pair(combine(parts),
                     nlohmann::json{{"members", ctx.member_grid.size()}});
  });
  run_method("ensemble_tscale", [&] {
    std::vector<ProbabilitySet> parts;
    for (std::size_t j = 0; j < ctx.member_grid.size(); ++j) {
      parts.push_back(
          Calibrator::fixed(ctx.member_t[j]).apply(ctx.member_grid[j]));
    }
    return std::pair(combine(parts),
                     nlohmann::json{{"member_t", ctx.member_t}});
  });

  // Calibrated-ensemble teacher over the student inputs.
  Eigen::MatrixXd teacher_train;
  Dataset pool;
  Eigen::MatrixXd teacher_pool;
  const bool has_pool = roster_has(roster, "gdistill") && spec.n_unsup > 0;
  if (needs_students && !ctx.members.empty()) {
    std::vector<ProbabilitySet> parts;
    for (std::size_t j = 0; j < ctx.members.size(); ++j) {
      parts.push_back(Calibrator::fixed(ctx.member_t[j])
                          .apply(model_predictions(
                              ctx.members[j], ctx.data.train.inputs,
                              ctx.data.train.ids, ctx.data.train.labels,
                              nullptr, GroupTag::train)));
    }
    teacher_train = combine(parts).rows();
    if (has_pool) {
      pool = generate_pool(spec, spec.n_unsup, seed);
      std::vector<ProbabilitySet> pool_parts;
      for (std::size_t j = 0; j < ctx.members.size(); ++j) {
        pool_parts.push_back(Calibrator::fixed(ctx.member_t[j])
                                 .apply(model_predictions(
                                     ctx.members[j], pool.inputs, pool.ids,
                                     pool.labels, nullptr, GroupTag::unsup)));
      }
      teacher_pool = combine(pool_parts).rows();
    }
  }

  // Distilled students use calibration only when the fitted T >= 1.
  auto student_probs = [&](const MlpModel& student, nlohmann::json* details) {
    const PredictionSet val_pred = model_predictions(
        student, ctx.data.val.inputs, ctx.data.val.ids, ctx.data.val.labels,
        nullptr, GroupTag::val);
    const double t_raw = fit_temperature(val_pred).as_fixed().t;
    const double t = std::max(1.0, t_raw);
    (*details)["t_raw"] = t_raw;
    (*details)["t"] = t;
    (*details)["clamped"] = t_raw < 1.0;
    const PredictionSet grid_pred = model_predictions(
        student, ctx.data.grid.inputs, ctx.data.grid.ids,
        ctx.data.grid.labels, &ctx.data.grid.groups,
        GroupTag::familiar_test);
    return Calibrator::fixed(t).apply(grid_pred);
  };

  run_method("distill", [&] {
    DistillConfig dcfg;
    TrainConfig tc = tc_base;
    tc.seed = derive_seed(seed, kStreamDistill);
    TrainResult res =
        train_distilled(config, ctx.data.train, teacher_train, ctx.data.val,
                        tc, dcfg);
    nlohmann::json details{{"epochs", res.log.epochs.size()},
                           {"lr_drops", res.log.lr_drops},
                           {"distill_t", dcfg.temperature},
                           {"lambda_cls", dcfg.lambda_cls}};
    ProbabilitySet probs = student_probs(res.model, &details);
    return std::pair(std::move(probs), std::move(details));
  });
  run_method("gdistill", [&] {
    if (!has_pool) {
      throw InputError("gdistill requires n_unsup > 0");
    }
    DistillConfig dcfg;
    TrainConfig tc = tc_base;
    tc.seed = derive_seed(seed, kStreamGdistill);
    TrainResult res = train_g_distilled(config, ctx.data.train, teacher_train,
                                        pool, teacher_pool, ctx.data.val, tc,
                                        dcfg);
    nlohmann::json details{{"epochs", res.log.epochs.size()},
                           {"lr_drops", res.log.lr_drops},
                           {"distill_t", dcfg.temperature},
                           {"lambda_cls", dcfg.lambda_cls},
                           {"pool_size", pool.size()}};
    ProbabilitySet probs = student_probs(res.model, &details);
    return std::pair(std::move(probs), std::move(details));
  });

  run_method("bayes", [&] {
    BayesConfig bcfg;
    TrainConfig tc = tc_base;
    tc.seed = derive_seed(seed, kStreamBayes);
    TrainResult res =
        train_bayes(config, ctx.data.train, ctx.data.val, tc, bcfg);
    // Calibration on the mean logits, then the full sampled prediction.
    const PredictionSet val_pred = model_predictions(
        res.model, ctx.data.val.inputs, ctx.data.val.ids, ctx.data.val.labels,
        nullptr, GroupTag::val);
    const double t = fit_temperature(val_pred).as_fixed().t;
    ProbabilitySet probs = bayes_predict(
        res.model, ctx.data.grid.inputs, bcfg,
        derive_seed(seed, kStreamBayesPredict), t, GroupTag::familiar_test,
        ctx.data.grid.ids, ctx.data.grid.labels, ctx.data.grid.groups);
    nlohmann::json details{{"epochs", res.log.epochs.size()},
                           {"lr_drops", res.log.lr_drops},
                           {"t", t},
                           {"dropout_rate", bcfg.dropout_rate},
                           {"dropout_samples", bcfg.predict_dropout_samples},
                           {"noise_samples", bcfg.predict_noise_samples}};
    return std::pair(std::move(probs), std::move(details));
  });

  run_method("novelty_scale", [&] {
    const MlpModel& detector = ctx.members.at(0);
    const std::vector<double> train_scores = novelty_score(
        detector, ctx.data.train.inputs, spec.score_temperature);
    const auto percentiles = fit_novelty_percentiles(train_scores);
    const std::vector<double> val_scores = novelty_score(
        detector, ctx.data.val.inputs, spec.score_temperature);
    const PredictionSet val_pred = model_predictions(
        detector, ctx.data.val.inputs, ctx.data.val.ids, ctx.data.val.labels,
        nullptr, GroupTag::val, &val_scores);
    const Calibrator cal = fit_novelty_scaling(val_pred, percentiles);
    const std::vector<double> grid_scores = novelty_score(
        detector, ctx.data.grid.inputs, spec.score_temperature);
    const PredictionSet grid_pred = model_predictions(
        detector, ctx.data.grid.inputs, ctx.data.grid.ids,
        ctx.data.grid.labels, &ctx.data.grid.groups, GroupTag::familiar_test,
        &grid_scores);
    const NoveltyLinearTemperature& nt = cal.as_novelty_linear();
    nlohmann::json details{{"t0", nt.t0},
                           {"t1", nt.t1},
                           {"p5", nt.p5},
                           {"p95", nt.p95},
                           {"score_temperature", spec.score_temperature}};
    return std::pair(cal.apply(grid_pred), std::move(details));
  });

  if (!ctx.member_grid.empty()) {
    out.sweep = sweep_single(ctx);
  }
  out.audits = run_audits(ctx, has_pool && pool.size() > 0 ? &pool : nullptr);
  return out;
}

nlohmann::json aggregate_results(const ToyRun& run) {
  nlohmann::json agg = nlohmann::json::object();
  for (const std::string& method : run.roster) {
    nlohmann::json per_region = nlohmann::json::object();
    for (const char* region : {"familiar", "novel"}) {
      const bool familiar = std::string_view(region) == "familiar";
      std::map<std::string, std::vector<double>> values;
      for (const SeedResult& sr : run.results) {
        const auto it = sr.methods.find(method);
        if (it == sr.methods.end() || !it->second.error.empty()) continue;
        const auto& report = familiar ? it->second.familiar : it->second.novel;
        if (!report.has_value()) continue;
        values["nll"].push_back(report->nll);
        values["brier"].push_back(report->brier);
        values["label_error"].push_back(report->label_error);
        values["ece"].push_back(report->ece);
        if (report->e99.has_value()) values["e99"].push_back(*report->e99);
      }
      nlohmann::json metrics = nlohmann::json::object();
      for (const char* metric : {"nll", "brier", "label_error", "ece", "e99"}) {
        metrics[metric] = stat_json(values[metric]);
      }
      per_region[region] = std::move(metrics);
    }
    agg[method] = std::move(per_region);
  }
  return agg;
}

}  // namespace

ToyRun run_experiment(const ToySpec& spec, std::vector<std::string> roster,
                      std::vector<std::uint64_t> seeds) {
  spec.validate();
  if (roster.empty()) throw InputError("toy: empty method roster");
  std::set<std::string> seen;
  for (const std::string& name : roster) {
    if (!roster_has(kFullRoster, name)) {
      throw InputError("toy: unknown method '" + name + "'");
    }
    if (!seen.insert(name).second) {
      throw InputError("toy: duplicate method '" + name + "'");
    }
  }
  if (seeds.empty()) seeds = {spec.seed};

  ToyRun run;
  run.spec = spec;
  run.roster = std::move(roster);
  run.seeds = seeds;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    run.results.push_back(run_seed(spec, run.roster, seeds[i],
                                   i == 0 ? &run.heatmap : nullptr));
  }
  run.aggregates = aggregate_results(run);
  return run;
}

nlohmann::json ToyRun::to_json() const {
  nlohmann::json j;
  j["spec"] = spec.to_json();
  j["roster"] = roster;
  j["seeds"] = seeds;
  nlohmann::json results_json = nlohmann::json::array();
  for (const SeedResult& sr : results) {
    nlohmann::json rj;
    rj["seed"] = sr.seed;
    nlohmann::json methods = nlohmann::json::object();
    for (const auto& [name, ev] : sr.methods) {
      methods[name] = method_eval_json(ev);
    }
    rj["methods"] = std::move(methods);
    rj["sweep"] = {{"temperatures", sr.sweep.temperatures},
                   {"familiar_nll", sr.sweep.familiar_nll},
                   {"novel_nll", sr.sweep.novel_nll},
                   {"familiar_best_t", sr.sweep.familiar_best_t},
                   {"novel_best_t", sr.sweep.novel_best_t}};
    rj["audits"] = sr.audits;
    results_json.push_back(std::move(rj));
  }
  j["results"] = std::move(results_json);
  j["aggregates"] = aggregates;
  return j;
}

void write_heatmap_csv(const ToyRun& run, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "x0,x1,group,method,nll\n";
  for (const HeatPoint& p : run.heatmap) {
    out << fmt_double(p.x0) << ',' << fmt_double(p.x1) << ','
        << to_string(p.group) << ',' << p.method << ',' << fmt_double(p.nll)
        << '\n';
  }
  if (!out.good()) throw InputError("failed writing " + path.string());
}

}  // namespace calibtk
