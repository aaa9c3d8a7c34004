#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "calibtk/metrics.hpp"
#include "calibtk/predictions.hpp"
#include "json.hpp"

namespace calibtk {

// Grouped metrics document: one MetricsReport per group tag, the shape
// cmd_eval emits and cmd_report consumes.
using GroupedReport = std::map<GroupTag, MetricsReport>;

nlohmann::json to_json(const GroupedReport& report);
GroupedReport grouped_report_from_json(const nlohmann::json& j);

// Comparison table: one absolute baseline row plus one percent-reduction row
// per method. Display rounds to the nearest integer percent (halves away
// from zero); stored values keep full precision.
struct ReportTable {
  std::vector<GroupTag> groups;        // column group order
  std::vector<std::string> metrics;    // column metric order
  GroupedReport baseline;

  struct MethodRow {
    std::string name;
    // group -> metric -> exact percent reduction vs baseline
    std::map<GroupTag, std::map<std::string, double>> reductions;
  };
  std::vector<MethodRow> methods;

  nlohmann::json to_json() const;
  std::string to_markdown() const;
};

// Nearest-integer percent for display; halves round away from zero.
long round_percent(double value);

// Builds the table from a baseline and named method reports. All reports
// must cover the baseline's groups. Metrics: nll, brier, label_error, ece,
// and e99 when the baseline defines it for every group (a method with no
// qualifying rows counts as e99 = 0).
ReportTable build_report(
    const GroupedReport& baseline,
    const std::vector<std::pair<std::string, GroupedReport>>& methods);

}  // namespace calibtk
