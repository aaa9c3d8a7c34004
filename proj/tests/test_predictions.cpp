#include <cstdio>
#include <filesystem>
#include <fstream>

#include "calibtk/errors.hpp"
#include "calibtk/predictions.hpp"
#include "calibtk/rng.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace calibtk;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const char* name) {
  const fs::path dir = fs::temp_directory_path() / "calibtk_test_predictions";
  fs::create_directories(dir);
  return dir / name;
}

PredictionSet sample_set() {
  std::vector<PredictionRecord> records;
  records.push_back({"a", {1.5, -0.5, 0.25}, 0, GroupTag::train, 0.12});
  records.push_back({"b", {0.0, 2.0, -1.0}, 1, GroupTag::val, std::nullopt});
  records.push_back({"c", {-3.0, 0.5, 0.5}, 2, GroupTag::familiar_test, 0.8});
  records.push_back({"d", {0.1, 0.2, 0.3}, 1, GroupTag::novel_test, 1.5});
  records.push_back({"e", {9.0, -9.0, 0.0}, kUnlabeled, GroupTag::unsup,
                     std::nullopt});
  return PredictionSet(std::move(records), 3);
}

}  // namespace

TEST_CASE("group tags round-trip through their names") {
  for (GroupTag tag : kAllGroups) {
    auto back = group_from_string(to_string(tag));
    REQUIRE(back.has_value());
    CHECK(*back == tag);
  }
  CHECK(!group_from_string("test").has_value());
  CHECK(!group_from_string("").has_value());
}

TEST_CASE("prediction set validation") {
  CHECK_NOTHROW(sample_set());

  SUBCASE("class_count below 2") {
    std::vector<PredictionRecord> r{{"a", {0.5}, 0, GroupTag::train, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 1), InputError);
  }
  SUBCASE("logit arity mismatch") {
    std::vector<PredictionRecord> r{{"a", {0.5, 0.5}, 0, GroupTag::train, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 3), InputError);
  }
  SUBCASE("label out of range") {
    std::vector<PredictionRecord> r{{"a", {0.5, 0.5}, 2, GroupTag::val, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 2), InputError);
  }
  SUBCASE("labeled unsup row") {
    std::vector<PredictionRecord> r{{"a", {0.5, 0.5}, 0, GroupTag::unsup, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 2), InputError);
  }
  SUBCASE("unlabeled non-unsup row") {
    std::vector<PredictionRecord> r{
        {"a", {0.5, 0.5}, kUnlabeled, GroupTag::train, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 2), InputError);
  }
  SUBCASE("duplicate ids") {
    std::vector<PredictionRecord> r{{"a", {0.5, 0.5}, 0, GroupTag::train, {}},
                                    {"a", {0.1, 0.9}, 1, GroupTag::train, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 2), InputError);
  }
  SUBCASE("non-finite logit") {
    std::vector<PredictionRecord> r{
        {"a", {0.5, std::nan("")}, 0, GroupTag::train, {}}};
    CHECK_THROWS_AS(PredictionSet(std::move(r), 2), InputError);
  }
}

TEST_CASE("csv and json round-trips preserve every field") {
  const PredictionSet set = sample_set();
  for (FileFormat format : {FileFormat::csv, FileFormat::json}) {
    const fs::path path = scratch_file(
        format == FileFormat::csv ? "roundtrip.csv" : "roundtrip.json");
    save_predictions(set, path, format);
    const PredictionSet back = load_predictions(path, format);
    REQUIRE(back.size() == set.size());
    REQUIRE(back.class_count() == set.class_count());
    for (std::size_t i = 0; i < set.size(); ++i) {
      CHECK(back[i].id == set[i].id);
      CHECK(back[i].label == set[i].label);
      CHECK(back[i].group == set[i].group);
      CHECK(back[i].novelty == set[i].novelty);
      REQUIRE(back[i].logits.size() == set[i].logits.size());
      for (std::size_t c = 0; c < set[i].logits.size(); ++c)
        CHECK(back[i].logits[c] == set[i].logits[c]);  // %.17g is lossless
    }
  }
}

TEST_CASE("format is inferred from the extension") {
  CHECK(format_from_path("preds.json") == FileFormat::json);
  CHECK(format_from_path("preds.csv") == FileFormat::csv);
  CHECK(format_from_path("preds.txt") == FileFormat::csv);
}

TEST_CASE("csv loader rejects malformed input") {
  auto write = [](const char* name, const std::string& text) {
    const fs::path p = scratch_file(name);
    std::ofstream(p) << text;
    return p;
  };
  CHECK_THROWS_AS(
      load_predictions(write("bad_header.csv",
                             "id,label,novelty,group,logit_0,logit_1\n"),
                       FileFormat::csv),
      InputError);
  CHECK_THROWS_AS(
      load_predictions(
          write("bad_group.csv", "id,label,group,novelty,logit_0,logit_1\n"
                                 "a,0,test,,1.0,2.0\n"),
          FileFormat::csv),
      InputError);
  CHECK_THROWS_AS(
      load_predictions(
          write("bad_arity.csv", "id,label,group,novelty,logit_0,logit_1\n"
                                 "a,0,train,,1.0\n"),
          FileFormat::csv),
      InputError);
  CHECK_THROWS_AS(
      load_predictions(
          write("bad_number.csv", "id,label,group,novelty,logit_0,logit_1\n"
                                  "a,0,train,,1.0,zap\n"),
          FileFormat::csv),
      InputError);
  CHECK_THROWS_AS(load_predictions(scratch_file("missing.csv"),
                                   FileFormat::csv),
                  InputError);

  // Missing novelty stays missing, and blank lines are skipped.
  const fs::path ok = write("ok.csv", "id,label,group,novelty,logit_0,logit_1\n"
                                      "a,0,train,,1.0,2.0\n"
                                      "\n"
                                      "b,1,val,0.5,2.0,1.0\n");
  const PredictionSet set = load_predictions(ok, FileFormat::csv);
  REQUIRE(set.size() == 2);
  CHECK(!set[0].novelty.has_value());
  CHECK(set[1].novelty == 0.5);
}

TEST_CASE("softmax_row matches the direct formula and is shift-invariant") {
  Rng rng(20240817);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng.below(5));
    Eigen::VectorXd z(c);
    std::vector<double> zs(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
      z(i) = rng.uniform(-30.0, 30.0);
      zs[static_cast<std::size_t>(i)] = z(i);
    }
    const Eigen::VectorXd p = softmax_row(z);
    const auto expect = oracle::softmax(zs);
    double sum = 0.0;
    for (int i = 0; i < c; ++i) {
      CHECK(p(i) == doctest::Approx(expect[static_cast<std::size_t>(i)])
                        .epsilon(1e-14));
      CHECK(p(i) >= 0.0);
      sum += p(i);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    const Eigen::VectorXd shifted =
        softmax_row(z.array() + rng.uniform(-100.0, 100.0));
    for (int i = 0; i < c; ++i)
      CHECK(shifted(i) == doctest::Approx(p(i)).epsilon(1e-12));
  }
}

TEST_CASE("to_probabilities keeps metadata aligned") {
  const PredictionSet set = sample_set();
  const ProbabilitySet probs = to_probabilities(set);
  REQUIRE(probs.size() == set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    CHECK(probs.ids()[i] == set[i].id);
    CHECK(probs.labels()[i] == set[i].label);
    CHECK(probs.groups()[i] == set[i].group);
    const auto expect = oracle::softmax(set[i].logits);
    for (std::size_t c = 0; c < expect.size(); ++c)
      CHECK(probs.rows()(static_cast<Eigen::Index>(i),
                         static_cast<Eigen::Index>(c)) ==
            doctest::Approx(expect[c]).epsilon(1e-14));
  }
}

TEST_CASE("probability set validation") {
  CHECK_NOTHROW(testutil::make_probs({{0.25, 0.75}, {1.0, 0.0}}, {0, 1}));
  CHECK_THROWS_AS(testutil::make_probs({{0.6, 0.6}}, {0}), InputError);
  CHECK_THROWS_AS(testutil::make_probs({{-0.1, 1.1}}, {0}), InputError);
  CHECK_THROWS_AS(
      ProbabilitySet(Eigen::MatrixXd::Constant(2, 2, 0.5), {"a"}, {0, 1},
                     {GroupTag::train, GroupTag::train}),
      InputError);
}

TEST_CASE("filter_by_group keeps order and drops the rest") {
  const PredictionSet set = sample_set();
  const PredictionSet train = filter_by_group(set, GroupTag::train);
  REQUIRE(train.size() == 1);
  CHECK(train[0].id == "a");
  CHECK(filter_by_group(set, GroupTag::unsup).size() == 1);

  const ProbabilitySet probs = to_probabilities(set);
  const ProbabilitySet val = filter_by_group(probs, GroupTag::val);
  REQUIRE(val.size() == 1);
  CHECK(val.ids()[0] == "b");
  CHECK(val.labels()[0] == 1);
  CHECK(val.rows()(0, 1) ==
        doctest::Approx(oracle::softmax({0.0, 2.0, -1.0})[1]).epsilon(1e-14));
}
