#include "calibtk/report.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "calibtk/errors.hpp"

namespace calibtk {

namespace {

const char* kMetricOrder[] = {"nll", "brier", "label_error", "ece", "e99"};

const char* metric_title(const std::string& metric) {
  if (metric == "nll") return "NLL";
  if (metric == "brier") return "Brier";
  if (metric == "label_error") return "Label Error";
  if (metric == "ece") return "ECE";
  if (metric == "e99") return "E99";
  return metric.c_str();
}

std::string group_title(GroupTag tag) {
  switch (tag) {
    case GroupTag::familiar_test: return "fam.";
    case GroupTag::novel_test: return "novel";
    default: return std::string(to_string(tag));
  }
}

double metric_value(const MetricsReport& report, const std::string& metric) {
  if (metric == "nll") return report.nll;
  if (metric == "brier") return report.brier;
  if (metric == "label_error") return report.label_error;
  if (metric == "ece") return report.ece;
  if (metric == "e99") return report.e99.value_or(0.0);
  throw InputError("report: unknown metric '" + metric + "'");
}

std::string fixed3(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace

nlohmann::json to_json(const GroupedReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [tag, metrics] : report) {
    j[std::string(to_string(tag))] = to_json(metrics);
  }
  return j;
}

GroupedReport grouped_report_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.empty()) {
    throw InputError("report json: expected a non-empty group -> metrics map");
  }
  GroupedReport out;
  for (const auto& [key, value] : j.items()) {
    const auto tag = group_from_string(key);
    if (!tag.has_value()) {
      throw InputError("report json: unknown group '" + key + "'");
    }
    out[*tag] = report_from_json(value);
  }
  return out;
}

long round_percent(double value) {
  if (!std::isfinite(value)) {
    throw InputError("report: non-finite percent value");
  }
  return std::lround(value);
}

ReportTable build_report(
    const GroupedReport& baseline,
    const std::vector<std::pair<std::string, GroupedReport>>& methods) {
  if (baseline.empty()) throw InputError("report: empty baseline");
  ReportTable table;
  table.baseline = baseline;
  for (const GroupTag tag : kAllGroups) {
    if (baseline.find(tag) != baseline.end()) table.groups.push_back(tag);
  }
  bool with_e99 = true;
  for (const auto& [tag, report] : baseline) {
    if (!report.e99.has_value()) with_e99 = false;
  }
  for (const char* metric : kMetricOrder) {
    if (std::string_view(metric) == "e99" && !with_e99) continue;
    table.metrics.push_back(metric);
  }

  for (const auto& [name, grouped] : methods) {
    ReportTable::MethodRow row;
    row.name = name;
    for (const GroupTag tag : table.groups) {
      const auto it = grouped.find(tag);
      if (it == grouped.end()) {
        throw InputError("report: method '" + name + "' lacks group '" +
                         std::string(to_string(tag)) + "'");
      }
      for (const std::string& metric : table.metrics) {
        const double base = metric_value(baseline.at(tag), metric);
        const double value = metric_value(it->second, metric);
        const double pct = percent_reduction(base, value);
        if (!std::isfinite(pct)) {
          throw InputError("report: non-finite reduction for method '" + name +
                           "', metric " + metric);
        }
        row.reductions[tag][metric] = pct;
      }
    }
    table.methods.push_back(std::move(row));
  }
  return table;
}

nlohmann::json ReportTable::to_json() const {
  nlohmann::json j;
  nlohmann::json groups_json = nlohmann::json::array();
  for (const GroupTag tag : groups) {
    groups_json.push_back(std::string(to_string(tag)));
  }
  j["groups"] = std::move(groups_json);
  j["metrics"] = metrics;
  j["baseline"] = calibtk::to_json(baseline);
  nlohmann::json methods_json = nlohmann::json::array();
  for (const MethodRow& row : methods) {
    nlohmann::json rj;
    rj["name"] = row.name;
    nlohmann::json reductions = nlohmann::json::object();
    for (const auto& [tag, per_metric] : row.reductions) {
      nlohmann::json mj = nlohmann::json::object();
      for (const auto& [metric, value] : per_metric) {
        mj[metric] = {{"percent", value},
                      {"rounded", round_percent(value)}};
      }
      reductions[std::string(to_string(tag))] = std::move(mj);
    }
    rj["reductions"] = std::move(reductions);
    methods_json.push_back(std::move(rj));
  }
  j["methods"] = std::move(methods_json);
  return j;
}

std::string ReportTable::to_markdown() const {
  std::ostringstream out;
  out << "| Method |";
  for (const std::string& metric : metrics) {
    for (const GroupTag tag : groups) {
      out << ' ' << metric_title(metric) << ' ' << group_title(tag) << " |";
    }
  }
  out << "\n|---|";
  for (std::size_t i = 0; i < metrics.size() * groups.size(); ++i) {
    out << "---|";
  }
  out << "\n| Baseline |";
  for (const std::string& metric : metrics) {
    for (const GroupTag tag : groups) {
      out << ' ' << fixed3(metric_value(baseline.at(tag), metric)) << " |";
    }
  }
  out << '\n';
  for (const MethodRow& row : methods) {
    out << "| " << row.name << " |";
    for (const std::string& metric : metrics) {
      for (const GroupTag tag : groups) {
        out << ' ' << round_percent(row.reductions.at(tag).at(metric))
            << "% |";
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace calibtk
