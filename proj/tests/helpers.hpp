#pragma once

#include <optional>
#include <string>
#include <vector>

#include "calibtk/predictions.hpp"

namespace testutil {

// Builds a validated PredictionSet from logit rows. Labels default to 0,
// groups to familiar_test, ids to q0, q1, ...
inline calibtk::PredictionSet make_set(
    const std::vector<std::vector<double>>& logits,
    const std::vector<int>& labels,
    const std::vector<calibtk::GroupTag>& groups = {},
    const std::vector<std::optional<double>>& novelty = {}) {
  std::vector<calibtk::PredictionRecord> records;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    calibtk::PredictionRecord r;
    r.id = "q" + std::to_string(i);
    r.logits = logits[i];
    r.label = labels[i];
    r.group = groups.empty() ? calibtk::GroupTag::familiar_test : groups[i];
    if (!novelty.empty()) r.novelty = novelty[i];
    records.push_back(std::move(r));
  }
  return calibtk::PredictionSet(std::move(records),
                                static_cast<int>(logits.front().size()));
}

// Wraps explicit probability rows (must already be row-stochastic).
inline calibtk::ProbabilitySet make_probs(
    const std::vector<std::vector<double>>& rows,
    const std::vector<int>& labels,
    const std::vector<calibtk::GroupTag>& groups = {}) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto c = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd m(n, c);
  std::vector<std::string> ids;
  std::vector<calibtk::GroupTag> g;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    ids.push_back("q" + std::to_string(i));
    g.push_back(groups.empty() ? calibtk::GroupTag::familiar_test
                               : groups[static_cast<std::size_t>(i)]);
  }
  return calibtk::ProbabilitySet(std::move(m), std::move(ids), labels,
                                 std::move(g));
}

inline std::vector<std::vector<double>> to_rows(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  }
  return out;
}

}  // namespace testutil
