#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"
#include "calibtk/predictions.hpp"
#include "calibtk/toybench.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace calibtk;

namespace {

// Small-but-real settings so a full protocol run stays in test time.
ToySpec tiny_spec() {
  ToySpec spec;
  spec.n_train = 80;
  spec.n_val = 60;
  spec.n_unsup = 40;
  spec.grid_resolution = 10;
  spec.hidden_widths = {8};
  spec.learning_rate = 5e-3;
  spec.batch_size = 32;
  spec.max_epochs = 3;
  spec.ensemble_size = 2;
  spec.seed = 5;
  return spec;
}

}  // namespace

TEST_CASE("toy spec json round trip") {
  ToySpec spec;
  spec.generator = "moons";
  spec.n_train = 321;
  spec.label_noise = 0.05;
  spec.noise = 0.4;
  spec.familiar_normal = {0.0, 1.0};
  spec.familiar_offset = -0.25;
  spec.seed = 99;
  spec.hidden_widths = {32, 16};
  spec.retrain_on_train_val = true;

  const ToySpec back = ToySpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK(back.generator == "moons");
  CHECK(back.noise.has_value());
  CHECK(*back.noise == 0.4);
  CHECK(back.familiar_normal[1] == 1.0);
  CHECK(back.retrain_on_train_val);

  // Unset generator spread stays unset through JSON null.
  const ToySpec defaults = ToySpec::from_json(ToySpec{}.to_json());
  CHECK_FALSE(defaults.noise.has_value());
  CHECK(defaults.resolved_noise() == 1.0);
  CHECK(ToySpec{"moons"}.resolved_noise() == 0.3);
  CHECK(ToySpec{"rings"}.resolved_noise() == 0.35);

  CHECK_THROWS_AS(ToySpec::from_json({{"bogus", 1}}), InputError);
  CHECK_THROWS_AS(ToySpec::from_json({{"n_train", "many"}}), InputError);
  CHECK_THROWS_AS(ToySpec::from_json(nlohmann::json::array()), InputError);
}

TEST_CASE("toy spec validation") {
  ToySpec spec;
  CHECK_NOTHROW(spec.validate());

  auto expect_bad = [](auto&& mutate) {
    ToySpec s;
    mutate(s);
    CHECK_THROWS_AS(s.validate(), InputError);
  };
  expect_bad([](ToySpec& s) { s.generator = "spiral"; });
  expect_bad([](ToySpec& s) { s.n_train = 0; });
  expect_bad([](ToySpec& s) { s.n_unsup = -1; });
  expect_bad([](ToySpec& s) { s.grid_resolution = 1; });
  expect_bad([](ToySpec& s) { s.label_noise = 1.0; });
  expect_bad([](ToySpec& s) { s.noise = 0.0; });
  expect_bad([](ToySpec& s) { s.familiar_normal = {1.0, 1.0}; });
  expect_bad([](ToySpec& s) { s.hidden_widths = {}; });
  expect_bad([](ToySpec& s) { s.dropout_rate = 1.0; });
  expect_bad([](ToySpec& s) { s.ensemble_size = 0; });
  expect_bad([](ToySpec& s) { s.score_temperature = 0.0; });
}

TEST_CASE("analytic decision rules at hand-picked points") {
  // blobs: class 0 on the horizontal axis, class 1 on the vertical.
  CHECK(rule_label("blobs", 1.0, -2.5, 0.0) == 0);
  CHECK(rule_label("blobs", 1.0, 2.5, 0.0) == 0);
  CHECK(rule_label("blobs", 1.0, 0.0, 2.5) == 1);
  CHECK(rule_label("blobs", 1.0, 0.0, -2.5) == 1);

  // xor: label by quadrant product, boundary goes to class 0.
  CHECK(rule_label("xor", 1.0, 2.0, 2.0) == 0);
  CHECK(rule_label("xor", 1.0, -2.0, -2.0) == 0);
  CHECK(rule_label("xor", 1.0, 2.0, -2.0) == 1);
  CHECK(rule_label("xor", 1.0, -2.0, 2.0) == 1);
  CHECK(rule_label("xor", 1.0, 0.0, 3.0) == 0);

  // rings: nearest radius wins either side of the r = 2 midline.
  CHECK(rule_label("rings", 0.35, 1.2, 0.0) == 0);
  CHECK(rule_label("rings", 0.35, 0.0, 2.8) == 1);
  CHECK(rule_label("rings", 0.35, 1.99, 0.0) == 0);
  CHECK(rule_label("rings", 0.35, 2.01, 0.0) == 1);

  // moons: points on each arc belong to that arc.
  CHECK(rule_label("moons", 0.3, -0.5, 1.0) == 0);
  CHECK(rule_label("moons", 0.3, 0.5, -0.5) == 1);

  CHECK_THROWS_AS(rule_label("spiral", 1.0, 0.0, 0.0), InputError);
}

TEST_CASE("generated data respects the familiar region and grid layout") {
  ToySpec spec = tiny_spec();
  spec.grid_resolution = 12;
  const ToyData data = generate(spec);

  CHECK(data.train.size() == spec.n_train);
  CHECK(data.val.size() == spec.n_val);
  CHECK(data.grid.size() == 12 * 12);
  CHECK(data.train.ids.front() == "tr_0");
  CHECK(data.val.ids.front() == "va_0");
  CHECK(data.grid.ids.back() == "gd_143");

  double sample_max_x0 = -1e300, sample_min_x0 = 1e300;
  for (int i = 0; i < data.train.size(); ++i) {
    CHECK(spec.familiar(data.train.inputs(i, 0), data.train.inputs(i, 1)));
    sample_max_x0 = std::max(sample_max_x0, data.train.inputs(i, 0));
    sample_min_x0 = std::min(sample_min_x0, data.train.inputs(i, 0));
  }
  for (int i = 0; i < data.val.size(); ++i) {
    CHECK(spec.familiar(data.val.inputs(i, 0), data.val.inputs(i, 1)));
    sample_max_x0 = std::max(sample_max_x0, data.val.inputs(i, 0));
    sample_min_x0 = std::min(sample_min_x0, data.val.inputs(i, 0));
  }

  // Row-major grid: x0 advances within a row, x1 between rows.
  CHECK(data.grid.inputs(1, 0) > data.grid.inputs(0, 0));
  CHECK(data.grid.inputs(1, 1) == data.grid.inputs(0, 1));
  CHECK(data.grid.inputs(12, 0) == data.grid.inputs(0, 0));
  CHECK(data.grid.inputs(12, 1) > data.grid.inputs(0, 1));

  // Margin pushes the grid strictly beyond the sample bounding box, which
  // is how novel points exist on the x0 > 0 side at all.
  double grid_min_x0 = 1e300, grid_max_x0 = -1e300;
  for (int i = 0; i < data.grid.size(); ++i) {
    grid_min_x0 = std::min(grid_min_x0, data.grid.inputs(i, 0));
    grid_max_x0 = std::max(grid_max_x0, data.grid.inputs(i, 0));
  }
  CHECK(grid_min_x0 < sample_min_x0);
  CHECK(grid_max_x0 > sample_max_x0);
  CHECK(grid_max_x0 > 0.0);

  int familiar_count = 0, novel_count = 0;
  const double noise = spec.resolved_noise();
  for (int i = 0; i < data.grid.size(); ++i) {
    const double x0 = data.grid.inputs(i, 0);
    const double x1 = data.grid.inputs(i, 1);
    const auto k = static_cast<std::size_t>(i);
    CHECK(data.grid.labels[k] == rule_label(spec.generator, noise, x0, x1));
    const bool fam = spec.familiar(x0, x1);
    CHECK(data.grid.groups[k] ==
          (fam ? GroupTag::familiar_test : GroupTag::novel_test));
    (fam ? familiar_count : novel_count) += 1;
  }
  CHECK(familiar_count > 0);
  CHECK(novel_count > 0);

  // Regeneration is exact; another seed moves the samples.
  const ToyData again = generate(spec);
  CHECK((again.train.inputs - data.train.inputs).cwiseAbs().maxCoeff() == 0.0);
  ToySpec other = spec;
  other.seed = spec.seed + 1;
  CHECK((generate(other).train.inputs - data.train.inputs)
            .cwiseAbs()
            .maxCoeff() > 0.0);
}

TEST_CASE("label noise flips training labels but never grid truth") {
  ToySpec spec;
  spec.n_train = 3000;
  spec.n_val = 10;
  spec.grid_resolution = 8;
  spec.seed = 11;

  // Generated labels mostly agree with the analytic rule when clean.
  const ToyData clean = generate(spec);
  auto disagreement = [&](const ToyData& data) {
    int flips = 0;
    for (int i = 0; i < data.train.size(); ++i) {
      const int rule = rule_label(spec.generator, spec.resolved_noise(),
                                  data.train.inputs(i, 0),
                                  data.train.inputs(i, 1));
      if (rule != data.train.labels[static_cast<std::size_t>(i)]) ++flips;
    }
    return static_cast<double>(flips) / data.train.size();
  };
  // The generator's own Bayes disagreement with the rule is small.
  const double bayes_rate = disagreement(clean);
  CHECK(bayes_rate < 0.12);

  spec.label_noise = 0.3;
  const ToyData noisy = generate(spec);
  // flip(0.3) on top of the Bayes rate b lands near 0.3(1-b) + 0.7b.
  const double rate = disagreement(noisy);
  CHECK(rate > 0.24);
  CHECK(rate < 0.42);
  const double noise = spec.resolved_noise();
  for (int i = 0; i < noisy.grid.size(); ++i) {
    CHECK(noisy.grid.labels[static_cast<std::size_t>(i)] ==
          rule_label(spec.generator, noise, noisy.grid.inputs(i, 0),
                     noisy.grid.inputs(i, 1)));
  }
}

TEST_CASE("a familiar region the generator cannot reach is an error") {
  ToySpec spec = tiny_spec();
  spec.familiar_offset = -1e6;
  CHECK_THROWS_AS(generate(spec), InputError);
}

TEST_CASE("unsupervised pool draws without the region restriction") {
  const ToySpec spec = tiny_spec();
  const Dataset pool = generate_pool(spec, 400, 7);
  CHECK(pool.size() == 400);
  CHECK(pool.ids.front() == "un_0");
  for (const int label : pool.labels) CHECK(label == kUnlabeled);
  int outside = 0;
  for (int i = 0; i < pool.size(); ++i) {
    if (!spec.familiar(pool.inputs(i, 0), pool.inputs(i, 1))) ++outside;
  }
  CHECK(outside > 0);

  const Dataset same = generate_pool(spec, 400, 7);
  CHECK((same.inputs - pool.inputs).cwiseAbs().maxCoeff() == 0.0);
  const Dataset moved = generate_pool(spec, 400, 8);
  CHECK((moved.inputs - pool.inputs).cwiseAbs().maxCoeff() > 0.0);
  CHECK_THROWS_AS(generate_pool(spec, 0, 7), InputError);
}

TEST_CASE("novelty score is one minus the cooled top probability") {
  MlpConfig config;
  config.input_dim = 2;
  config.hidden_widths = {6};
  config.class_count = 2;
  const MlpModel model = MlpModel::init(config, 41);
  Rng rng(42);
  Eigen::MatrixXd inputs(25, 2);
  for (Eigen::Index i = 0; i < inputs.size(); ++i)
    inputs(i / 2, i % 2) = rng.uniform(-3.0, 3.0);

  for (const double t : {2.5, 1000.0}) {
    const std::vector<double> scores = novelty_score(model, inputs, t);
    const Eigen::MatrixXd out = forward_eval(model, inputs);
    REQUIRE(scores.size() == 25);
    for (Eigen::Index r = 0; r < 25; ++r) {
      const std::vector<double> probs =
          oracle::softmax({out(r, 0), out(r, 1)}, t);
      const double expected = 1.0 - std::max(probs[0], probs[1]);
      CHECK(std::abs(scores[static_cast<std::size_t>(r)] - expected) < 1e-12);
      CHECK(scores[static_cast<std::size_t>(r)] >= 0.0);
      CHECK(scores[static_cast<std::size_t>(r)] <= 0.5 + 1e-12);
    }
  }
  // Extreme cooling flattens everything toward 1 - 1/C.
  for (const double s : novelty_score(model, inputs, 1e9)) {
    CHECK(s == doctest::Approx(0.5).epsilon(1e-6));
  }
  CHECK_THROWS_AS(novelty_score(model, inputs, 0.0), InputError);
}

TEST_CASE("full roster protocol run on a tiny blobs instance") {
  const ToySpec spec = tiny_spec();
  const ToyRun run = run_experiment(spec);

  REQUIRE(run.results.size() == 1);
  CHECK(run.seeds == std::vector<std::uint64_t>{5});
  const SeedResult& sr = run.results.front();
  CHECK(sr.audits.at("pass").get<bool>());

  const int grid_points = spec.grid_resolution * spec.grid_resolution;
  for (const std::string& name : kFullRoster) {
    CAPTURE(name);
    REQUIRE(sr.methods.count(name) == 1);
    const MethodEval& ev = sr.methods.at(name);
    REQUIRE(ev.error.empty());
    REQUIRE(ev.familiar.has_value());
    REQUIRE(ev.novel.has_value());
    CHECK(ev.familiar->n + ev.novel->n == grid_points);
    CHECK(std::isfinite(ev.familiar->nll));
    CHECK(std::isfinite(ev.novel->nll));
  }
  CHECK(sr.methods.at("single_tscale").details.contains("t"));
  CHECK(sr.methods.at("ensemble_tscale").details.at("member_t").size() == 2);
  CHECK(sr.methods.at("gdistill").details.at("pool_size").get<int>() ==
        spec.n_unsup);
  CHECK(sr.methods.at("distill").details.at("t").get<double>() >= 1.0);
  const auto& nov = sr.methods.at("novelty_scale").details;
  CHECK(nov.contains("t0"));
  CHECK(nov.contains("t1"));
  CHECK(nov.at("p5").get<double>() <= nov.at("p95").get<double>());

  REQUIRE(sr.sweep.temperatures.size() == 40);
  CHECK(sr.sweep.temperatures.front() == 0.25);
  CHECK(sr.sweep.temperatures.back() == 10.0);
  CHECK(sr.sweep.familiar_best_t >= 0.25);
  CHECK(sr.sweep.novel_best_t <= 10.0);
  // The recorded best really is the curve minimum.
  const auto fam_min = std::min_element(sr.sweep.familiar_nll.begin(),
                                        sr.sweep.familiar_nll.end());
  CHECK(sr.sweep.familiar_best_t ==
        sr.sweep.temperatures[static_cast<std::size_t>(
            fam_min - sr.sweep.familiar_nll.begin())]);

  CHECK(run.heatmap.size() ==
        kFullRoster.size() * static_cast<std::size_t>(grid_points));
}

TEST_CASE("aggregates and heatmap across seeds") {
  ToySpec spec = tiny_spec();
  spec.ensemble_size = 1;
  spec.n_unsup = 0;
  const std::vector<std::string> roster{"single", "single_tscale"};
  const ToyRun run = run_experiment(spec, roster, {3, 4});

  REQUIRE(run.results.size() == 2);
  CHECK(run.results[0].seed == 3);
  CHECK(run.results[1].seed == 4);

  const auto& agg = run.aggregates;
  for (const std::string& name : roster) {
    for (const char* region : {"familiar", "novel"}) {
      const auto& stats = agg.at(name).at(region).at("nll");
      CHECK(stats.at("n").get<int>() == 2);
      CHECK(stats.at("mean").is_number());
      CHECK(stats.at("stddev").get<double>() >= 0.0);
    }
  }
  // e99 can be empty for some seeds; its slot must still be well-formed.
  const auto& e99 = agg.at("single").at("novel").at("e99");
  CHECK(e99.contains("n"));
  if (e99.at("n").get<int>() == 0) CHECK(e99.at("mean").is_null());

  // Heatmap keeps the first seed only.
  const std::size_t grid_points =
      static_cast<std::size_t>(spec.grid_resolution) * spec.grid_resolution;
  CHECK(run.heatmap.size() == roster.size() * grid_points);

  const auto dir = std::filesystem::temp_directory_path() / "calibtk_toy_test";
  std::filesystem::create_directories(dir);
  const auto csv = dir / "heatmap.csv";
  write_heatmap_csv(run, csv);
  std::ifstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "x0,x1,group,method,nll");
  std::size_t rows = 0;
  std::set<std::string> methods_seen;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // x0
    std::getline(ss, cell, ',');  // x1
    std::getline(ss, cell, ',');  // group
    CHECK((cell == "familiar_test" || cell == "novel_test"));
    std::getline(ss, cell, ',');  // method
    methods_seen.insert(cell);
  }
  CHECK(rows == run.heatmap.size());
  CHECK(methods_seen == std::set<std::string>{"single", "single_tscale"});
  std::filesystem::remove_all(dir);

  const nlohmann::json j = run.to_json();
  CHECK(j.at("results").size() == 2);
  CHECK(j.at("aggregates") == agg);
  CHECK(j.at("spec").at("ensemble_size").get<int>() == 1);
}

TEST_CASE("per-method failures are recorded, not fatal") {
  ToySpec spec = tiny_spec();
  spec.ensemble_size = 1;
  spec.n_unsup = 0;  // gdistill has no pool to draw from
  const ToyRun run = run_experiment(spec, {"single", "gdistill"});
  const SeedResult& sr = run.results.front();
  CHECK(sr.methods.at("single").error.empty());
  const MethodEval& failed = sr.methods.at("gdistill");
  CHECK_FALSE(failed.error.empty());
  CHECK_FALSE(failed.familiar.has_value());
  // The failed method contributes nothing to the aggregates.
  CHECK(run.aggregates.at("gdistill").at("novel").at("nll").at("n")
            .get<int>() == 0);
}

TEST_CASE("roster validation") {
  const ToySpec spec = tiny_spec();
  CHECK_THROWS_AS(run_experiment(spec, {}), InputError);
  CHECK_THROWS_AS(run_experiment(spec, {"single", "single"}), InputError);
  CHECK_THROWS_AS(run_experiment(spec, {"quantum"}), InputError);
}
