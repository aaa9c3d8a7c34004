#include <cmath>

#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"
#include "calibtk/rng.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace calibtk;
using testutil::make_probs;

namespace {

// Random row-stochastic set mixing plain rows with confident (>= 0.99) ones
// so that e99 paths get exercised.
ProbabilitySet random_probs(Rng& rng, std::vector<std::vector<double>>* rows,
                            std::vector<int>* labels) {
  const int n = 1 + static_cast<int>(rng.below(60));
  const int c = 2 + static_cast<int>(rng.below(5));
  rows->clear();
  labels->clear();
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(c));
    if (rng.uniform() < 0.3) {
      const auto hot = static_cast<std::size_t>(rng.below(c));
      for (auto& v : row) v = 0.005 / (c - 1);
      row[hot] = 0.995;
    } else {
      double sum = 0.0;
      for (auto& v : row) sum += (v = rng.uniform(0.05, 1.0));
      for (auto& v : row) v /= sum;
    }
    rows->push_back(std::move(row));
    labels->push_back(static_cast<int>(rng.below(c)));
  }
  return make_probs(*rows, *labels);
}

}  // namespace

TEST_CASE("frozen fixtures: nll, brier, label error") {
  // rows (0.9,0.1),(0.3,0.7),(0.5,0.5) with labels 0,0,1
  const ProbabilitySet probs =
      make_probs({{0.9, 0.1}, {0.3, 0.7}, {0.5, 0.5}}, {0, 0, 1});
  CHECK(nll(probs) == doctest::Approx(0.66749350018123588).epsilon(1e-6));
  CHECK(brier(probs) == doctest::Approx(0.5).epsilon(1e-6));
  // row 1 misses; row 2 is a tie, argmax takes class 0, label is 1
  CHECK(label_error(probs) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(!e99(probs).first.has_value());
}

TEST_CASE("frozen fixtures: probability clipping in nll") {
  const ProbabilitySet sure_right = make_probs({{1.0, 0.0}}, {0});
  CHECK(nll(sure_right) ==
        doctest::Approx(0.0010005003335835344).epsilon(1e-6));
  const ProbabilitySet sure_wrong = make_probs({{1.0, 0.0}}, {1});
  CHECK(nll(sure_wrong) == doctest::Approx(6.9077552789821368).epsilon(1e-6));
  CHECK(brier(sure_wrong) == doctest::Approx(1.0).epsilon(1e-6));
  const auto [rate, count] = e99(sure_wrong);
  REQUIRE(rate.has_value());
  CHECK(*rate == doctest::Approx(1.0));
  CHECK(count == 1);
}

TEST_CASE("frozen fixture: equal-count ece") {
  // sorted confidences .6(T) .7(F) | .8(T) .9(T); gaps .15 and .15
  const ProbabilitySet probs = make_probs(
      {{0.6, 0.4}, {0.3, 0.7}, {0.8, 0.2}, {0.9, 0.1}}, {0, 0, 0, 0});
  const auto [score, breakdown] = ece(probs, 2);
  CHECK(score == doctest::Approx(0.15).epsilon(1e-6));
  REQUIRE(breakdown.bins.size() == 2);
  CHECK(breakdown.bins[0].count == 2);
  CHECK(breakdown.bins[0].mean_confidence == doctest::Approx(0.65));
  CHECK(breakdown.bins[0].accuracy == doctest::Approx(0.5));
  CHECK(breakdown.bins[1].mean_confidence == doctest::Approx(0.85));
  CHECK(breakdown.bins[1].accuracy == doctest::Approx(1.0));
}

TEST_CASE("ece splits the remainder across the leading bins") {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < 7; ++i) {
    rows.push_back({0.5 + 0.05 * i, 0.5 - 0.05 * i});
    labels.push_back(0);
  }
  const auto [score, breakdown] = ece(make_probs(rows, labels), 3);
  REQUIRE(breakdown.bins.size() == 3);
  CHECK(breakdown.bins[0].count == 3);
  CHECK(breakdown.bins[1].count == 2);
  CHECK(breakdown.bins[2].count == 2);
  CHECK(score ==
        doctest::Approx(oracle::ece(rows, labels, 3)).epsilon(1e-12));
}

TEST_CASE("metrics match the oracle on 200 randomised sets") {
  Rng rng(951203);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int trial = 0; trial < 200; ++trial) {
    const ProbabilitySet probs = random_probs(rng, &rows, &labels);
    CHECK(std::abs(nll(probs) - oracle::nll(rows, labels)) <= 1e-12);
    CHECK(std::abs(brier(probs) - oracle::brier(rows, labels)) <= 1e-12);
    CHECK(std::abs(label_error(probs) - oracle::label_error(rows, labels)) <=
          1e-12);
    CHECK(std::abs(ece(probs).first - oracle::ece(rows, labels)) <= 1e-12);
    const auto got = e99(probs).first;
    const auto want = oracle::e99(rows, labels);
    REQUIRE(got.has_value() == want.has_value());
    if (got) CHECK(std::abs(*got - *want) <= 1e-12);
  }
}

TEST_CASE("metric invariants on random sets") {
  Rng rng(77001);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int trial = 0; trial < 50; ++trial) {
    const ProbabilitySet probs = random_probs(rng, &rows, &labels);
    CHECK(nll(probs) > 0.0);
    CHECK(nll(probs) <= -std::log(0.001) + 1e-12);
    CHECK(brier(probs) >= 0.0);
    CHECK(brier(probs) <= 1.0 + 1e-12);
    CHECK(label_error(probs) >= 0.0);
    CHECK(label_error(probs) <= 1.0);
    const double e = ece(probs).first;
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
  }
}

TEST_CASE("metrics reject unusable input") {
  const ProbabilitySet empty;
  CHECK_THROWS_AS(nll(empty), InputError);
  CHECK_THROWS_AS(brier(empty), InputError);
  CHECK_THROWS_AS(label_error(empty), InputError);
  CHECK_THROWS_AS(ece(empty), InputError);

  const ProbabilitySet unlabeled =
      make_probs({{0.5, 0.5}}, {kUnlabeled}, {GroupTag::unsup});
  CHECK_THROWS_AS(nll(unlabeled), InputError);
  CHECK_THROWS_AS(e99(unlabeled), InputError);

  const ProbabilitySet ok = make_probs({{0.5, 0.5}}, {0});
  CHECK_THROWS_AS(ece(ok, 0), InputError);
}

TEST_CASE("evaluate bundles the individual metrics") {
  Rng rng(31337);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  const ProbabilitySet probs = random_probs(rng, &rows, &labels);
  const MetricsReport report = evaluate(probs);
  CHECK(report.n == static_cast<int>(probs.size()));
  CHECK(report.nll == nll(probs));
  CHECK(report.brier == brier(probs));
  CHECK(report.label_error == label_error(probs));
  CHECK(report.ece == ece(probs).first);
  CHECK(report.e99 == e99(probs).first);
  CHECK(report.e99_count == e99(probs).second);

  const nlohmann::json j = to_json(report);
  const MetricsReport back = report_from_json(j);
  CHECK(back.nll == report.nll);
  CHECK(back.brier == report.brier);
  CHECK(back.label_error == report.label_error);
  CHECK(back.ece == report.ece);
  CHECK(back.e99 == report.e99);
  CHECK(back.e99_count == report.e99_count);
  CHECK(back.n == report.n);
}

TEST_CASE("evaluate_by_group covers labeled groups only") {
  const ProbabilitySet probs = make_probs(
      {{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}, {0.6, 0.4}},
      {0, 0, 1, kUnlabeled},
      {GroupTag::val, GroupTag::familiar_test, GroupTag::familiar_test,
       GroupTag::unsup});
  const auto grouped = evaluate_by_group(probs);
  REQUIRE(grouped.size() == 2);
  CHECK(grouped.count(GroupTag::val) == 1);
  CHECK(grouped.count(GroupTag::familiar_test) == 1);
  CHECK(grouped.at(GroupTag::val).n == 1);
  CHECK(grouped.at(GroupTag::familiar_test).n == 2);
}

TEST_CASE("percent reduction") {
  CHECK(percent_reduction(0.5, 0.4) == doctest::Approx(20.0));
  CHECK(percent_reduction(0.5, 0.6) == doctest::Approx(-20.0));
  CHECK(percent_reduction(2.0, 0.0) == doctest::Approx(100.0));
  CHECK_THROWS_AS(percent_reduction(0.0, 0.1), InputError);
}

TEST_CASE("hand-derived fixture sheet across all five metrics") {
  // nll: clipped single-row extremes and a mixed three-row set.
  CHECK(nll(make_probs({{1.0, 0.0}}, {0})) ==
        doctest::Approx(0.0010005003335835344).epsilon(1e-12));
  CHECK(nll(make_probs({{0.5, 0.5}}, {0})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const double mixed =
      nll(make_probs({{0.9, 0.1}, {0.6, 0.4}, {0.0005, 0.9995}}, {0, 0, 0}));
  CHECK(mixed == doctest::Approx(2.507980472801985).epsilon(1e-12));
  CHECK(std::abs(mixed - 2.507981) < 1e-6);

  // brier: bounds and sqrt(0.05).
  CHECK(brier(make_probs({{1.0, 0.0}, {1.0, 0.0}}, {0, 0})) == 0.0);
  CHECK(brier(make_probs({{0.0, 1.0}}, {0})) == 1.0);
  const double two_row = brier(make_probs({{0.7, 0.3}, {0.9, 0.1}}, {0, 0}));
  CHECK(two_row == doctest::Approx(std::sqrt(0.05)).epsilon(1e-12));
  CHECK(std::abs(two_row - 0.223607) < 1e-6);

  // label error: 3 of 4 correct.
  CHECK(label_error(make_probs(
            {{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}, {0.2, 0.8}},
            {0, 0, 1, 1})) == doctest::Approx(0.25).epsilon(1e-12));

  // ece ladder: confidences 0.55..1.00; every bin is fully correct, so any
  // bin count yields 1 - mean(conf) = 0.225.
  std::vector<std::vector<double>> ladder;
  std::vector<int> ladder_labels;
  for (int i = 0; i < 10; ++i) {
    const double conf = 0.55 + 0.05 * i;
    ladder.push_back({conf, 1.0 - conf});
    ladder_labels.push_back(0);
  }
  const ProbabilitySet ladder_probs = make_probs(ladder, ladder_labels);
  CHECK(ece(ladder_probs).first == doctest::Approx(0.225).epsilon(1e-12));
  CHECK(ece(ladder_probs, 1).first == doctest::Approx(0.225).epsilon(1e-12));

  // Ten identical 0.8-confidence rows, 8 correct: one bin sees acc == conf
  // and scores zero; ten equal-count bins isolate rows and score 0.32.
  std::vector<std::vector<double>> flat(10, {0.8, 0.2});
  std::vector<int> flat_labels(10, 0);
  flat_labels[3] = 1;
  flat_labels[7] = 1;
  const ProbabilitySet flat_probs = make_probs(flat, flat_labels);
  CHECK(ece(flat_probs, 1).first == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ece(flat_probs, 10).first == doctest::Approx(0.32).epsilon(1e-12));

  // e99 on the {0.995 wrong, 0.999 correct, 0.5 unqualified} subset.
  const auto [rate, count] = e99(make_probs(
      {{0.995, 0.005}, {0.999, 0.001}, {0.5, 0.5}}, {1, 0, 0}));
  REQUIRE(rate.has_value());
  CHECK(*rate == 0.5);
  CHECK(count == 2);

  // Composite report for perfect predictions.
  const MetricsReport perfect =
      evaluate(make_probs({{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}}, {0, 0, 0}));
  CHECK(perfect.nll == doctest::Approx(0.0010005003335835344).epsilon(1e-12));
  CHECK(perfect.brier == 0.0);
  CHECK(perfect.label_error == 0.0);
  CHECK(perfect.ece == 0.0);
  REQUIRE(perfect.e99.has_value());
  CHECK(*perfect.e99 == 0.0);
  CHECK(perfect.e99_count == 3);
}
