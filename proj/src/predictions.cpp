#include "calibtk/predictions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "calibtk/errors.hpp"
#include "json.hpp"

namespace calibtk {
namespace {

using nlohmann::json;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] void fail(const std::string& msg) { throw InputError(msg); }

[[noreturn]] void fail_line(const std::filesystem::path& path, std::size_t line,
                            const std::string& msg) {
  fail(path.string() + ":" + std::to_string(line) + ": " + msg);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const char* what,
                    const std::filesystem::path& path, std::size_t line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail_line(path, line, std::string("cannot parse ") + what + " '" + s + "'");
  }
}

int parse_int(const std::string& s, const char* what,
              const std::filesystem::path& path, std::size_t line) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail_line(path, line, std::string("cannot parse ") + what + " '" + s + "'");
  }
}

void validate_record(const PredictionRecord& r, int class_count,
                     const std::string& where) {
  if (static_cast<int>(r.logits.size()) != class_count)
    fail(where + ": expected " + std::to_string(class_count) + " logits, got " +
         std::to_string(r.logits.size()));
  for (double v : r.logits)
    if (!std::isfinite(v)) fail(where + ": non-finite logit");
  if (r.group == GroupTag::unsup) {
    if (r.label != kUnlabeled)
      fail(where + ": unsup row must carry label " +
           std::to_string(kUnlabeled));
  } else {
    if (r.label < 0 || r.label >= class_count)
      fail(where + ": label out of range (label=" + std::to_string(r.label) +
           ", classes=" + std::to_string(class_count) + ")");
  }
  if (r.novelty && !std::isfinite(*r.novelty))
    fail(where + ": non-finite novelty score");
}

PredictionSet load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  if (header.size() < 6 || header[0] != "id" || header[1] != "label" ||
      header[2] != "group" || header[3] != "novelty")
    fail_line(path, 1,
              "expected header id,label,group,novelty,logit_0..logit_{C-1}");
  const int class_count = static_cast<int>(header.size()) - 4;
  for (int c = 0; c < class_count; ++c)
    if (header[4 + c] != "logit_" + std::to_string(c))
      fail_line(path, 1, "bad logit column name '" + header[4 + c] + "'");

  std::vector<PredictionRecord> records;
  std::unordered_set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      fail_line(path, lineno,
                "expected " + std::to_string(header.size()) + " columns, got " +
                    std::to_string(fields.size()));
    PredictionRecord r;
    r.id = fields[0];
    r.label = parse_int(fields[1], "label", path, lineno);
    auto tag = group_from_string(fields[2]);
    if (!tag) fail_line(path, lineno, "unknown group '" + fields[2] + "'");
    r.group = *tag;
    if (!fields[3].empty())
      r.novelty = parse_double(fields[3], "novelty", path, lineno);
    r.logits.resize(class_count);
    for (int c = 0; c < class_count; ++c)
      r.logits[c] = parse_double(fields[4 + c], "logit", path, lineno);

    if (!seen.insert(r.id).second)
      fail_line(path, lineno, "duplicate id '" + r.id + "'");
    try {
      validate_record(r, class_count, "row");
    } catch (const InputError& e) {
      fail_line(path, lineno, e.what());
    }
    records.push_back(std::move(r));
  }
  return PredictionSet(std::move(records), class_count);
}

PredictionSet load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail(path.string() + ": " + e.what());
  }
  if (!doc.contains("class_count") || !doc.contains("records"))
    fail(path.string() + ": expected keys class_count and records");
  const int class_count = doc["class_count"].get<int>();
  std::vector<PredictionRecord> records;
  for (const auto& j : doc["records"]) {
    PredictionRecord r;
    r.id = j.at("id").get<std::string>();
    r.label = j.at("label").get<int>();
    auto tag = group_from_string(j.at("group").get<std::string>());
    if (!tag)
      fail(path.string() + ": unknown group '" +
           j.at("group").get<std::string>() + "'");
    r.group = *tag;
    if (j.contains("novelty") && !j["novelty"].is_null())
      r.novelty = j["novelty"].get<double>();
    r.logits = j.at("logits").get<std::vector<double>>();
    records.push_back(std::move(r));
  }
  return PredictionSet(std::move(records), class_count);
}

}  // namespace

std::string_view to_string(GroupTag tag) {
  switch (tag) {
    case GroupTag::train: return "train";
    case GroupTag::val: return "val";
    case GroupTag::familiar_test: return "familiar_test";
    case GroupTag::novel_test: return "novel_test";
    case GroupTag::unsup: return "unsup";
  }
  return "?";
}

std::optional<GroupTag> group_from_string(std::string_view s) {
  for (GroupTag tag : kAllGroups)
    if (s == to_string(tag)) return tag;
  return std::nullopt;
}

PredictionSet::PredictionSet(std::vector<PredictionRecord> records,
                             int class_count)
    : records_(std::move(records)), class_count_(class_count) {
  if (class_count_ < 2)
    fail("class_count must be >= 2, got " + std::to_string(class_count_));
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    validate_record(records_[i], class_count_,
                    "record " + std::to_string(i) + " (id=" + records_[i].id +
                        ")");
    if (!seen.insert(records_[i].id).second)
      fail("duplicate id '" + records_[i].id + "'");
  }
}

ProbabilitySet::ProbabilitySet(Eigen::MatrixXd rows,
                               std::vector<std::string> ids,
                               std::vector<int> labels,
                               std::vector<GroupTag> groups)
    : rows_(std::move(rows)),
      ids_(std::move(ids)),
      labels_(std::move(labels)),
      groups_(std::move(groups)) {
  const auto n = static_cast<std::size_t>(rows_.rows());
  if (ids_.size() != n || labels_.size() != n || groups_.size() != n)
    fail("probability rows and metadata sizes disagree");
  for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < rows_.cols(); ++c) {
      const double p = rows_(i, c);
      if (!(p >= 0.0 && p <= 1.0 + 1e-12))
        fail("probability out of [0,1] at row " + std::to_string(i));
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      fail("probability row " + std::to_string(i) + " sums to " +
           fmt_double(sum));
  }
}

FileFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".json" ? FileFormat::json : FileFormat::csv;
}

PredictionSet load_predictions(const std::filesystem::path& path,
                               FileFormat format) {
  return format == FileFormat::csv ? load_csv(path) : load_json(path);
}

void save_predictions(const PredictionSet& set,
                      const std::filesystem::path& path, FileFormat format) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  if (format == FileFormat::csv) {
    out << "id,label,group,novelty";
    for (int c = 0; c < set.class_count(); ++c) out << ",logit_" << c;
    out << "\n";
    for (const auto& r : set.records()) {
      out << r.id << "," << r.label << "," << to_string(r.group) << ",";
      if (r.novelty) out << fmt_double(*r.novelty);
      for (double v : r.logits) out << "," << fmt_double(v);
      out << "\n";
    }
  } else {
    json doc;
    doc["class_count"] = set.class_count();
    auto& arr = doc["records"] = json::array();
    for (const auto& r : set.records()) {
      json j;
      j["id"] = r.id;
      j["label"] = r.label;
      j["group"] = std::string(to_string(r.group));
      j["novelty"] = r.novelty ? json(*r.novelty) : json(nullptr);
      j["logits"] = r.logits;
      arr.push_back(std::move(j));
    }
    out << doc.dump(2) << "\n";
  }
  if (!out) fail("write failed for " + path.string());
}

Eigen::VectorXd softmax_row(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

ProbabilitySet to_probabilities(const PredictionSet& set) {
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
    rows.row(i) =
        softmax_row(Eigen::Map<const Eigen::VectorXd>(r.logits.data(), c));
    ids.push_back(r.id);
    labels.push_back(r.label);
    groups.push_back(r.group);
  }
  return ProbabilitySet(std::move(rows), std::move(ids), std::move(labels),
                        std::move(groups));
}

PredictionSet filter_by_group(const PredictionSet& set, GroupTag tag) {
  std::vector<PredictionRecord> out;
  for (const auto& r : set.records())
    if (r.group == tag) out.push_back(r);
  return PredictionSet(std::move(out), set.class_count());
}

ProbabilitySet filter_by_group(const ProbabilitySet& probs, GroupTag tag) {
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs.groups()[i] == tag) keep.push_back(static_cast<Eigen::Index>(i));
  Eigen::MatrixXd rows(keep.size(), probs.rows().cols());
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<GroupTag> groups;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    rows.row(k) = probs.rows().row(keep[k]);
    ids.push_back(probs.ids()[keep[k]]);
    labels.push_back(probs.labels()[keep[k]]);
    groups.push_back(probs.groups()[keep[k]]);
  }
  return ProbabilitySet(std::move(rows), std::move(ids), std::move(labels),
                        std::move(groups));
}

}  // namespace calibtk
