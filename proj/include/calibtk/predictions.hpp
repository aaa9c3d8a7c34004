#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace calibtk {

// Sentinel label for rows without supervision (group "unsup").
inline constexpr int kUnlabeled = -1;

enum class GroupTag { train, val, familiar_test, novel_test, unsup };

inline constexpr GroupTag kAllGroups[] = {
    GroupTag::train, GroupTag::val, GroupTag::familiar_test,
    GroupTag::novel_test, GroupTag::unsup};

std::string_view to_string(GroupTag tag);
std::optional<GroupTag> group_from_string(std::string_view s);

struct PredictionRecord {
  std::string id;
  std::vector<double> logits;
  int label = kUnlabeled;  // kUnlabeled iff group == unsup
  GroupTag group = GroupTag::train;
  std::optional<double> novelty;  // raw detector score, higher = more novel
};

// Immutable, validated collection of classifier outputs.
class PredictionSet {
 public:
  PredictionSet() = default;
  // Validates: class_count >= 2, per-record shape/finiteness, label range,
  // unsup <=> unlabeled, unique ids.
  PredictionSet(std::vector<PredictionRecord> records, int class_count);

  const std::vector<PredictionRecord>& records() const { return records_; }
  int class_count() const { return class_count_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const PredictionRecord& operator[](std::size_t i) const { return records_[i]; }

 private:
  std::vector<PredictionRecord> records_;
  int class_count_ = 0;
};

// Row-stochastic probabilities with labels/groups/ids aligned to the source
// records. Immutable after construction.
class ProbabilitySet {
 public:
  ProbabilitySet() = default;
  // Validates entries in [0,1] and row sums within 1e-9 of 1.
  ProbabilitySet(Eigen::MatrixXd rows, std::vector<std::string> ids,
                 std::vector<int> labels, std::vector<GroupTag> groups);

  const Eigen::MatrixXd& rows() const { return rows_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<GroupTag>& groups() const { return groups_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  int class_count() const { return static_cast<int>(rows_.cols()); }

 private:
  Eigen::MatrixXd rows_;
  std::vector<std::string> ids_;
  std::vector<int> labels_;
  std::vector<GroupTag> groups_;
};

enum class FileFormat { csv, json };

// Infers csv/json from the file extension; defaults to csv.
FileFormat format_from_path(const std::filesystem::path& path);

PredictionSet load_predictions(const std::filesystem::path& path,
                               FileFormat format);
void save_predictions(const PredictionSet& set,
                      const std::filesystem::path& path, FileFormat format);

// Row-wise softmax at T=1; subtracts the row max before exponentiation.
ProbabilitySet to_probabilities(const PredictionSet& set);

PredictionSet filter_by_group(const PredictionSet& set, GroupTag tag);
ProbabilitySet filter_by_group(const ProbabilitySet& probs, GroupTag tag);

// Numerically stable softmax of one logit row.
Eigen::VectorXd softmax_row(const Eigen::VectorXd& logits);

}  // namespace calibtk
