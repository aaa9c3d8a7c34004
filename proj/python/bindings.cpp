// pybind11 surface: prediction I/O, the five metrics, temperature and
// novelty-weighted calibration, ensembling, and the 2D toy benchmark.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "calibtk/calibration.hpp"
#include "calibtk/ensemble.hpp"
#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"
#include "calibtk/predictions.hpp"
#include "calibtk/toybench.hpp"
#include "calibtk/version.hpp"
#include "json.hpp"

namespace py = pybind11;
using namespace calibtk;

namespace {

GroupTag tag_of(const std::string& name) {
  const auto tag = group_from_string(name);
  if (!tag) throw InputError("unknown group tag: " + name);
  return *tag;
}

FileFormat resolve_format(const std::filesystem::path& path,
                          const std::optional<std::string>& format) {
  if (!format) return format_from_path(path);
  if (*format == "csv") return FileFormat::csv;
  if (*format == "json") return FileFormat::json;
  throw InputError("unknown file format: " + *format + " (want csv or json)");
}

PredictionSet make_prediction_set(
    const Eigen::MatrixXd& logits, const std::vector<int>& labels,
    const std::vector<std::string>& groups,
    const std::optional<std::vector<std::string>>& ids,
    const std::optional<std::vector<double>>& novelty) {
  const auto n = static_cast<std::size_t>(logits.rows());
  if (labels.size() != n || groups.size() != n ||
      (ids && ids->size() != n) || (novelty && novelty->size() != n)) {
    throw InputError("logits, labels, groups, ids, novelty disagree on length");
  }
  std::vector<PredictionRecord> records(n);
  for (std::size_t i = 0; i < n; ++i) {
    PredictionRecord& r = records[i];
    r.id = ids ? (*ids)[i] : "r_" + std::to_string(i);
    r.logits.resize(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      r.logits[static_cast<std::size_t>(c)] =
          logits(static_cast<Eigen::Index>(i), c);
    }
    r.label = labels[i];
    r.group = tag_of(groups[i]);
    if (novelty) r.novelty = (*novelty)[i];
  }
  return PredictionSet(std::move(records), static_cast<int>(logits.cols()));
}

std::vector<std::string> group_names(const std::vector<GroupTag>& tags) {
  std::vector<std::string> names;
  names.reserve(tags.size());
  for (const GroupTag tag : tags) names.emplace_back(to_string(tag));
  return names;
}

py::dict report_dict(const MetricsReport& report) {
  py::dict d;
  d["nll"] = report.nll;
  d["brier"] = report.brier;
  d["label_error"] = report.label_error;
  d["ece"] = report.ece;
  d["e99"] = report.e99 ? py::cast(*report.e99) : py::none();
  d["e99_count"] = report.e99_count;
  d["n"] = report.n;
  return d;
}

nlohmann::json parse_json(const std::string& text, const char* what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string(what) + ": invalid JSON: " + e.what());
  }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Confidence-calibration toolkit: familiar/novel prediction-quality "
      "metrics, temperature scaling, ensembles, and the 2D toy benchmark.";
  m.attr("__version__") = kVersion;
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);

  py::class_<PredictionSet>(m, "PredictionSet",
                            "Validated classifier outputs: per-row logits, "
                            "label, group tag, optional novelty score.")
      .def(py::init(&make_prediction_set), py::arg("logits"),
           py::arg("labels"), py::arg("groups"), py::arg("ids") = py::none(),
           py::arg("novelty") = py::none(),
           "Rows with group 'unsup' must use label -1.")
      .def_static(
          "load",
          [](const std::filesystem::path& path,
             const std::optional<std::string>& format) {
            return load_predictions(path, resolve_format(path, format));
          },
          py::arg("path"), py::arg("format") = py::none(),
          "Read a prediction file; format inferred from the extension "
          "unless given ('csv' or 'json').")
      .def(
          "save",
          [](const PredictionSet& set, const std::filesystem::path& path,
             const std::optional<std::string>& format) {
            save_predictions(set, path, resolve_format(path, format));
          },
          py::arg("path"), py::arg("format") = py::none())
      .def("__len__", &PredictionSet::size)
      .def_property_readonly("class_count", &PredictionSet::class_count)
      .def_property_readonly("ids",
                             [](const PredictionSet& set) {
                               std::vector<std::string> ids;
                               ids.reserve(set.size());
                               for (const auto& r : set.records())
                                 ids.push_back(r.id);
                               return ids;
                             })
      .def_property_readonly("labels",
                             [](const PredictionSet& set) {
                               std::vector<int> labels;
                               labels.reserve(set.size());
                               for (const auto& r : set.records())
                                 labels.push_back(r.label);
                               return labels;
                             })
      .def_property_readonly("groups",
                             [](const PredictionSet& set) {
                               std::vector<std::string> names;
                               names.reserve(set.size());
                               for (const auto& r : set.records())
                                 names.emplace_back(to_string(r.group));
                               return names;
                             })
      .def_property_readonly(
          "logits",
          [](const PredictionSet& set) {
            Eigen::MatrixXd out(static_cast<Eigen::Index>(set.size()),
                                set.class_count());
            for (std::size_t i = 0; i < set.size(); ++i) {
              for (int c = 0; c < set.class_count(); ++c) {
                out(static_cast<Eigen::Index>(i), c) =
                    set[i].logits[static_cast<std::size_t>(c)];
              }
            }
            return out;
          })
      .def_property_readonly("novelty",
                             [](const PredictionSet& set) {
                               py::list scores;
                               for (const auto& r : set.records()) {
                                 scores.append(r.novelty
                                                   ? py::cast(*r.novelty)
                                                   : py::none());
                               }
                               return scores;
                             })
      .def(
          "filter",
          [](const PredictionSet& set, const std::string& group) {
            return filter_by_group(set, tag_of(group));
          },
          py::arg("group"), "Rows whose group tag matches.")
      .def("__repr__", [](const PredictionSet& set) {
        return "PredictionSet(n=" + std::to_string(set.size()) +
               ", classes=" + std::to_string(set.class_count()) + ")";
      });

  py::class_<ProbabilitySet>(m, "ProbabilitySet",
                             "Row-stochastic probabilities aligned with "
                             "ids/labels/groups; produced by "
                             "to_probabilities, Calibrator.apply, combine.")
      .def("__len__", &ProbabilitySet::size)
      .def_property_readonly("class_count", &ProbabilitySet::class_count)
      .def_property_readonly("rows",
                             [](const ProbabilitySet& p) { return p.rows(); })
      .def_property_readonly("ids",
                             [](const ProbabilitySet& p) { return p.ids(); })
      .def_property_readonly(
          "labels", [](const ProbabilitySet& p) { return p.labels(); })
      .def_property_readonly(
          "groups",
          [](const ProbabilitySet& p) { return group_names(p.groups()); })
      .def(
          "filter",
          [](const ProbabilitySet& probs, const std::string& group) {
            return filter_by_group(probs, tag_of(group));
          },
          py::arg("group"))
      .def("__repr__", [](const ProbabilitySet& p) {
        return "ProbabilitySet(n=" + std::to_string(p.size()) +
               ", classes=" + std::to_string(p.class_count()) + ")";
      });

  py::class_<Calibrator>(m, "Calibrator",
                         "Fixed temperature or novelty-linear temperature "
                         "T0 + T1 * normalized novelty.")
      .def_static("fixed", &Calibrator::fixed, py::arg("t"))
      .def_static("novelty_linear", &Calibrator::novelty_linear, py::arg("t0"),
                  py::arg("t1"), py::arg("p5"), py::arg("p95"))
      .def_static(
          "from_json",
          [](const std::string& text) {
            return Calibrator::from_json(parse_json(text, "calibrator"));
          },
          py::arg("text"))
      .def("to_json",
           [](const Calibrator& cal) { return cal.to_json().dump(); })
      .def_property_readonly("kind",
                             [](const Calibrator& cal) {
                               return cal.is_fixed()
                                          ? std::string("fixed")
                                          : std::string("novelty_linear");
                             })
      .def_property_readonly("params",
                             [](const Calibrator& cal) {
                               py::dict d;
                               if (cal.is_fixed()) {
                                 d["t"] = cal.as_fixed().t;
                               } else {
                                 const auto& nl = cal.as_novelty_linear();
                                 d["t0"] = nl.t0;
                                 d["t1"] = nl.t1;
                                 d["p5"] = nl.p5;
                                 d["p95"] = nl.p95;
                               }
                               return d;
                             })
      .def("apply", &Calibrator::apply, py::arg("predictions"),
           "softmax(logits / T_i) per row; within-row ordering preserved.")
      .def("__repr__", [](const Calibrator& cal) {
        return "Calibrator(" + cal.to_json().dump() + ")";
      });

  m.def("to_probabilities", &to_probabilities, py::arg("predictions"),
        "Row-wise softmax at T=1.");
  m.def(
      "evaluate",
      [](const ProbabilitySet& probs, int ece_bins) {
        return report_dict(evaluate(probs, ece_bins));
      },
      py::arg("probabilities"), py::arg("ece_bins") = 10,
      "All five metrics: nll, brier, label_error, ece, e99 (None when no "
      "row reaches 99% confidence), plus e99_count and n.");
  m.def(
      "evaluate_by_group",
      [](const ProbabilitySet& probs, int ece_bins) {
        py::dict out;
        for (const auto& [tag, report] : evaluate_by_group(probs, ece_bins)) {
          out[py::cast(std::string(to_string(tag)))] = report_dict(report);
        }
        return out;
      },
      py::arg("probabilities"), py::arg("ece_bins") = 10,
      "One metrics dict per labeled group present in the set.");
  m.def("percent_reduction", &percent_reduction, py::arg("baseline"),
        py::arg("method"), "100 * (baseline - method) / baseline.");

  m.def("fit_temperature", &fit_temperature, py::arg("val"),
        "Single T in [0.05, 10] minimizing validation NLL (log grid + "
        "golden-section refinement).");
  m.def(
      "fit_novelty_percentiles",
      [](const std::vector<double>& scores) {
        return fit_novelty_percentiles(scores);
      },
      py::arg("train_scores"),
      "Empirical (5th, 95th) percentiles used to normalize novelty scores.");
  m.def("fit_novelty_scaling", &fit_novelty_scaling, py::arg("val"),
        py::arg("percentiles"),
        "Grid search over (T0, T1) minimizing validation NLL; every val row "
        "needs a novelty score.");

  m.def("combine", &combine, py::arg("members"),
        "Elementwise mean of aligned member probabilities.");
  m.def("ensemble_of_calibrated", &ensemble_of_calibrated, py::arg("members"),
        py::arg("vals"),
        "Per-member temperatures fitted on val, applied, then averaged. "
        "vals holds one shared set or one per member.");
  m.def("fit_shared_temperature", &fit_shared_temperature, py::arg("members"),
        py::arg("val_ids") = py::none(),
        "One temperature minimizing the NLL of the combined T-scaled "
        "members, optionally restricted to the given row ids.");

  m.def(
      "toy_default_spec",
      [] { return ToySpec{}.to_json().dump(2); },
      "Default 2D benchmark spec as a JSON string; edit and pass to "
      "run_toy.");
  m.def(
      "run_toy",
      [](const std::string& spec_json, const std::vector<std::string>& roster,
         const std::vector<std::uint64_t>& seeds) {
        const ToySpec spec = ToySpec::from_json(parse_json(spec_json, "spec"));
        return run_experiment(spec, roster, seeds).to_json().dump();
      },
      py::arg("spec_json"), py::arg("roster") = kFullRoster,
      py::arg("seeds") = std::vector<std::uint64_t>{0},
      py::call_guard<py::gil_scoped_release>(),
      "Train and evaluate the roster on the 2D benchmark; returns the run "
      "(results, aggregates, heatmap) as a JSON string.");
}
