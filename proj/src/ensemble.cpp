#include "calibtk/ensemble.hpp"

#include <unordered_set>

#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"

namespace calibtk {
namespace {

void check_aligned(const ProbabilitySet& a, const ProbabilitySet& b,
                   std::size_t member_index) {
  const std::string where =
      "ensemble member " + std::to_string(member_index) + ": ";
  if (a.size() != b.size() || a.class_count() != b.class_count())
    throw InputError(where + "shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.ids()[i] != b.ids()[i])
      throw InputError(where + "misaligned id '" + b.ids()[i] + "' at row " +
                       std::to_string(i));
    if (a.labels()[i] != b.labels()[i] || a.groups()[i] != b.groups()[i])
      throw InputError(where + "metadata mismatch at row " + std::to_string(i));
  }
}

PredictionSet select_rows(const PredictionSet& set,
                          const std::vector<std::string>& ids) {
  std::unordered_set<std::string> wanted(ids.begin(), ids.end());
  std::vector<PredictionRecord> out;
  for (const auto& r : set.records())
    if (wanted.count(r.id)) out.push_back(r);
  if (out.size() != ids.size())
    throw InputError("validation ids missing from member predictions");
  return PredictionSet(std::move(out), set.class_count());
}

}  // namespace

ProbabilitySet combine(const std::vector<ProbabilitySet>& members) {
  if (members.empty()) throw InputError("combine needs at least one member");
  const auto& first = members[0];
  Eigen::MatrixXd mean = first.rows();
  for (std::size_t m = 1; m < members.size(); ++m) {
    check_aligned(first, members[m], m);
    mean += members[m].rows();
  }
  mean /= static_cast<double>(members.size());
  return ProbabilitySet(std::move(mean), first.ids(), first.labels(),
                        first.groups());
}

ProbabilitySet ensemble_of_calibrated(const std::vector<PredictionSet>& members,
                                      const std::vector<PredictionSet>& vals) {
  if (members.empty())
    throw InputError("ensemble_of_calibrated needs at least one member");
  if (vals.size() != 1 && vals.size() != members.size())
    throw InputError("need one validation set, or one per member");
  std::vector<ProbabilitySet> calibrated;
  calibrated.reserve(members.size());
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& val = vals.size() == 1 ? vals[0] : vals[m];
    calibrated.push_back(fit_temperature(val).apply(members[m]));
  }
  return combine(calibrated);
}

Calibrator fit_shared_temperature(
    const std::vector<PredictionSet>& members,
    const std::optional<std::vector<std::string>>& val_ids) {
  if (members.empty())
    throw InputError("fit_shared_temperature needs at least one member");
  std::vector<PredictionSet> selected;
  selected.reserve(members.size());
  for (const auto& m : members)
    selected.push_back(val_ids ? select_rows(m, *val_ids) : m);
  if (selected[0].empty())
    throw InputError("fit_shared_temperature on empty validation rows");

  const double t = minimize_temperature([&](double t) {
    std::vector<ProbabilitySet> scaled;
    scaled.reserve(selected.size());
    const Calibrator cal = Calibrator::fixed(t);
    for (const auto& m : selected) scaled.push_back(cal.apply(m));
    return nll(combine(scaled));
  });
  return Calibrator::fixed(t);
}

}  // namespace calibtk
