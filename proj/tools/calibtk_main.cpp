#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calibtk/calibration.hpp"
#include "calibtk/ensemble.hpp"
#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"
#include "calibtk/predictions.hpp"
#include "calibtk/report.hpp"
#include "calibtk/toybench.hpp"
#include "calibtk/version.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using calibtk::InputError;
using calibtk::kVersion;

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[48];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out.good()) throw InputError("failed writing " + path.string());
}

calibtk::FileFormat resolve_format(const std::string& flag,
                                   const fs::path& path) {
  if (flag == "csv") return calibtk::FileFormat::csv;
  if (flag == "json") return calibtk::FileFormat::json;
  if (flag.empty()) return calibtk::format_from_path(path);
  throw InputError("unknown format '" + flag + "' (expected csv or json)");
}

calibtk::PredictionSet load_pred(const std::string& path,
                                 const std::string& format_flag) {
  return calibtk::load_predictions(path, resolve_format(format_flag, path));
}

void print_grouped_report(const calibtk::GroupedReport& grouped) {
  std::printf("%-15s %6s %10s %10s %12s %10s %10s\n", "group", "n", "nll",
              "brier", "label_error", "ece", "e99");
  for (const auto& [tag, r] : grouped) {
    std::printf("%-15s %6d %10.6f %10.6f %12.6f %10.6f %10s\n",
                std::string(calibtk::to_string(tag)).c_str(), r.n, r.nll,
                r.brier, r.label_error, r.ece,
                r.e99.has_value() ? fmt(*r.e99, "%.6f").c_str() : "-");
  }
}

struct EvalOpts {
  std::string pred;
  std::string calibrator;
  std::string out;
  std::string format;
};

void run_eval(const EvalOpts& o) {
  const calibtk::PredictionSet set = load_pred(o.pred, o.format);
  calibtk::ProbabilitySet probs =
      o.calibrator.empty()
          ? calibtk::to_probabilities(set)
          : calibtk::Calibrator::from_json(read_json_file(o.calibrator))
                .apply(set);
  const auto grouped = calibtk::evaluate_by_group(probs);
  if (grouped.empty()) {
    throw InputError("no labeled rows to evaluate in " + o.pred);
  }
  print_grouped_report(grouped);
  if (!o.out.empty()) {
    write_text_file(o.out, calibtk::to_json(grouped).dump(2) + "\n");
  }
}

struct FitOpts {
  std::string pred;
  std::string out;
  std::string format;
};

void run_fit_temp(const FitOpts& o) {
  const calibtk::PredictionSet set = load_pred(o.pred, o.format);
  const calibtk::PredictionSet val =
      calibtk::filter_by_group(set, calibtk::GroupTag::val);
  if (val.empty()) {
    throw InputError("fit-temp: no val-tagged rows in " + o.pred);
  }
  const calibtk::Calibrator cal = calibtk::fit_temperature(val);
  std::printf("t = %.6f\n", cal.as_fixed().t);
  if (!o.out.empty()) {
    write_text_file(o.out, cal.to_json().dump(2) + "\n");
  }
}

void run_fit_novelty(const FitOpts& o) {
  const calibtk::PredictionSet set = load_pred(o.pred, o.format);
  const calibtk::PredictionSet train =
      calibtk::filter_by_group(set, calibtk::GroupTag::train);
  const calibtk::PredictionSet val =
      calibtk::filter_by_group(set, calibtk::GroupTag::val);
  if (train.empty()) {
    throw InputError("fit-novelty: no train-tagged rows in " + o.pred);
  }
  if (val.empty()) {
    throw InputError("fit-novelty: no val-tagged rows in " + o.pred);
  }
  std::vector<double> scores;
  scores.reserve(train.size());
  for (const auto& rec : train.records()) {
    if (!rec.novelty.has_value()) {
      throw InputError("fit-novelty: train row '" + rec.id +
                       "' has no novelty score");
    }
    scores.push_back(*rec.novelty);
  }
  for (const auto& rec : val.records()) {
    if (!rec.novelty.has_value()) {
      throw InputError("fit-novelty: val row '" + rec.id +
                       "' has no novelty score");
    }
  }
  const auto percentiles = calibtk::fit_novelty_percentiles(scores);
  const calibtk::Calibrator cal =
      calibtk::fit_novelty_scaling(val, percentiles);
  const auto& nt = cal.as_novelty_linear();
  std::printf("t0 = %.6f  t1 = %.6f  p5 = %.6f  p95 = %.6f\n", nt.t0, nt.t1,
              nt.p5, nt.p95);
  if (!o.out.empty()) {
    write_text_file(o.out, cal.to_json().dump(2) + "\n");
  }
}

struct CombineOpts {
  std::vector<std::string> preds;
  std::string out;
  std::string format;
};

void run_combine(const CombineOpts& o) {
  std::vector<calibtk::ProbabilitySet> members;
  for (const std::string& path : o.preds) {
    members.push_back(calibtk::to_probabilities(load_pred(path, o.format)));
  }
  const calibtk::ProbabilitySet combined = calibtk::combine(members);
  std::ostringstream csv;
  csv << "id,label,group";
  for (int c = 0; c < combined.class_count(); ++c) csv << ",p_" << c;
  csv << '\n';
  for (std::size_t i = 0; i < combined.size(); ++i) {
    csv << combined.ids()[i] << ',' << combined.labels()[i] << ','
        << calibtk::to_string(combined.groups()[i]);
    for (int c = 0; c < combined.class_count(); ++c) {
      csv << ',' << fmt(combined.rows()(static_cast<Eigen::Index>(i), c));
    }
    csv << '\n';
  }
  if (o.out.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    write_text_file(o.out, csv.str());
  }
}

struct SweepOpts {
  std::string pred;
  std::string out;
  std::string format;
  double t_min = 0.25;
  double t_max = 10.0;
  int steps = 40;
};

void run_sweep(const SweepOpts& o) {
  if (o.t_min <= 0.0) throw InputError("sweep: --t-min must be positive");
  if (o.t_max < o.t_min) {
    throw InputError("sweep: --t-max must be >= --t-min");
  }
  if (o.steps < 2) throw InputError("sweep: --steps must be >= 2");
  const calibtk::PredictionSet set = load_pred(o.pred, o.format);

  // Groups with labeled rows, in canonical order.
  std::vector<calibtk::GroupTag> groups;
  for (const calibtk::GroupTag tag : calibtk::kAllGroups) {
    if (tag == calibtk::GroupTag::unsup) continue;
    if (!calibtk::filter_by_group(set, tag).empty()) groups.push_back(tag);
  }
  if (groups.empty()) throw InputError("sweep: no labeled rows in " + o.pred);

  std::ostringstream csv;
  csv << 't';
  for (const calibtk::GroupTag tag : groups) {
    csv << ',' << calibtk::to_string(tag) << "_nll" << ','
        << calibtk::to_string(tag) << "_ece";
  }
  csv << '\n';
  for (int i = 0; i < o.steps; ++i) {
    const double t =
        o.t_min + (o.t_max - o.t_min) * i / static_cast<double>(o.steps - 1);
    const calibtk::ProbabilitySet probs =
        calibtk::Calibrator::fixed(t).apply(set);
    csv << fmt(t);
    for (const calibtk::GroupTag tag : groups) {
      const calibtk::ProbabilitySet sub = calibtk::filter_by_group(probs, tag);
      csv << ',' << fmt(calibtk::nll(sub)) << ','
          << fmt(calibtk::ece(sub).first);
    }
    csv << '\n';
  }
  if (o.out.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    write_text_file(o.out, csv.str());
  }
}

struct ReportOpts {
  std::string baseline;
  std::vector<std::string> methods;  // NAME=FILE
  std::string out_json;
  std::string out_md;
};

void run_report(const ReportOpts& o) {
  const calibtk::GroupedReport baseline =
      calibtk::grouped_report_from_json(read_json_file(o.baseline));
  std::vector<std::pair<std::string, calibtk::GroupedReport>> methods;
  for (const std::string& entry : o.methods) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == entry.size()) {
      throw InputError("report: --method expects NAME=FILE, got '" + entry +
                       "'");
    }
    methods.emplace_back(entry.substr(0, eq),
                         calibtk::grouped_report_from_json(
                             read_json_file(entry.substr(eq + 1))));
  }
  const calibtk::ReportTable table = calibtk::build_report(baseline, methods);
  const std::string markdown = table.to_markdown();
  std::fputs(markdown.c_str(), stdout);
  if (!o.out_json.empty()) {
    write_text_file(o.out_json, table.to_json().dump(2) + "\n");
  }
  if (!o.out_md.empty()) {
    write_text_file(o.out_md, markdown);
  }
}

struct ToyOpts {
  std::string generator;
  std::string spec_file;
  std::string roster = "all";
  int seeds = 1;
  std::uint64_t seed = 0;
  int width = 0;
  int train = 0;
  int val = 0;
  int unsup = -1;
  int grid = 0;
  int epochs = 0;
  int ensemble = 0;
  std::string out = "toy_run";
};

std::string stat_cell(const nlohmann::json& stat) {
  if (stat.at("n").get<int>() == 0 || stat.at("mean").is_null()) return "-";
  return fmt(stat.at("mean").get<double>(), "%.4f") + "±" +
         fmt(stat.at("stddev").get<double>(), "%.4f");
}

std::string toy_summary_markdown(const calibtk::ToyRun& run) {
  std::ostringstream out;
  out << "# Toy benchmark summary\n\n";
  out << "- generator: " << run.spec.generator << "\n";
  out << "- seeds: " << run.seeds.size() << "\n";
  out << "- ensemble size: " << run.spec.ensemble_size << "\n";
  out << "- grid: " << run.spec.grid_resolution << "x"
      << run.spec.grid_resolution << "\n\n";
  out << "Mean ± stddev across seeds (familiar | novel grid partitions):\n\n";
  const char* metrics[] = {"nll", "brier", "label_error", "ece", "e99"};
  out << "| Method |";
  for (const char* m : metrics) out << ' ' << m << " fam. | " << m << " novel |";
  out << "\n|---|";
  for (std::size_t i = 0; i < 2 * std::size(metrics); ++i) out << "---|";
  out << '\n';
  for (const std::string& method : run.roster) {
    out << "| " << method << " |";
    const nlohmann::json& per_region = run.aggregates.at(method);
    for (const char* m : metrics) {
      out << ' ' << stat_cell(per_region.at("familiar").at(m)) << " | "
          << stat_cell(per_region.at("novel").at(m)) << " |";
    }
    out << '\n';
  }
  // Sweep headline: where each seed's NLL(T) curve bottoms out.
  out << "\nSingle-model best temperatures per seed (familiar vs novel):\n\n";
  out << "| seed | best T familiar | best T novel |\n|---|---|---|\n";
  for (const calibtk::SeedResult& sr : run.results) {
    out << "| " << sr.seed << " | " << fmt(sr.sweep.familiar_best_t, "%.2f")
        << " | " << fmt(sr.sweep.novel_best_t, "%.2f") << " |\n";
  }
  return out.str();
}

void run_toy(const ToyOpts& o) {
  calibtk::ToySpec spec;
  if (!o.spec_file.empty()) {
    spec = calibtk::ToySpec::from_json(read_json_file(o.spec_file));
  }
  if (!o.generator.empty()) spec.generator = o.generator;
  if (o.width > 0) {
    for (int& w : spec.hidden_widths) w = o.width;
  }
  if (o.train > 0) spec.n_train = o.train;
  if (o.val > 0) spec.n_val = o.val;
  if (o.unsup >= 0) spec.n_unsup = o.unsup;
  if (o.grid > 0) spec.grid_resolution = o.grid;
  if (o.epochs > 0) spec.max_epochs = o.epochs;
  if (o.ensemble > 0) spec.ensemble_size = o.ensemble;
  spec.seed = o.seed;
  if (o.seeds < 1) throw InputError("toy: --seeds must be >= 1");

  std::vector<std::string> roster;
  if (o.roster == "all") {
    roster = calibtk::kFullRoster;
  } else {
    std::stringstream ss(o.roster);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) roster.push_back(item);
    }
  }
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < o.seeds; ++i) {
    seeds.push_back(o.seed + static_cast<std::uint64_t>(i));
  }

  const fs::path dir(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir.string());

  const calibtk::ToyRun run = calibtk::run_experiment(spec, roster, seeds);

  nlohmann::json config;
  config["version"] = kVersion;
  config["spec"] = run.spec.to_json();
  config["roster"] = run.roster;
  config["seeds"] = run.seeds;
  write_text_file(dir / "config.json", config.dump(2) + "\n");
  nlohmann::json results = run.to_json();
  results["version"] = kVersion;
  write_text_file(dir / "results.json", results.dump(2) + "\n");
  const std::string summary = toy_summary_markdown(run);
  write_text_file(dir / "summary.md", summary);
  calibtk::write_heatmap_csv(run, dir / "heatmap.csv");

  std::fputs(summary.c_str(), stdout);
  int failures = 0;
  for (const calibtk::SeedResult& sr : run.results) {
    for (const auto& [name, ev] : sr.methods) {
      if (!ev.error.empty()) {
        ++failures;
        std::fprintf(stderr, "method %s failed for seed %llu: %s\n",
                     name.c_str(),
                     static_cast<unsigned long long>(sr.seed),
                     ev.error.c_str());
      }
    }
  }
  std::printf("\nartifacts written to %s%s\n", dir.string().c_str(),
              failures > 0 ? " (with per-method failures, see stderr)" : "");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"confidence calibration toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  EvalOpts eval_opts;
  CLI::App* eval = app.add_subcommand(
      "eval", "evaluate prediction quality metrics per group");
  eval->add_option("--pred", eval_opts.pred, "prediction file (csv or json)")
      ->required();
  eval->add_option("--calibrator", eval_opts.calibrator,
                   "calibrator JSON to apply before evaluating");
  eval->add_option("--out", eval_opts.out, "write the grouped report JSON");
  eval->add_option("--format", eval_opts.format,
                   "force input format: csv or json");
  eval->callback([&] { run_eval(eval_opts); });

  FitOpts fit_temp_opts;
  CLI::App* fit_temp = app.add_subcommand(
      "fit-temp", "fit a temperature on the val-tagged rows");
  fit_temp->add_option("--pred", fit_temp_opts.pred, "prediction file")
      ->required();
  fit_temp->add_option("--out", fit_temp_opts.out, "write the calibrator JSON");
  fit_temp->add_option("--format", fit_temp_opts.format,
                       "force input format: csv or json");
  fit_temp->callback([&] { run_fit_temp(fit_temp_opts); });

  FitOpts fit_nov_opts;
  CLI::App* fit_nov = app.add_subcommand(
      "fit-novelty",
      "fit novelty-weighted scaling (percentiles from train rows, T0/T1 on "
      "val rows)");
  fit_nov->add_option("--pred", fit_nov_opts.pred, "prediction file")
      ->required();
  fit_nov->add_option("--out", fit_nov_opts.out, "write the calibrator JSON");
  fit_nov->add_option("--format", fit_nov_opts.format,
                      "force input format: csv or json");
  fit_nov->callback([&] { run_fit_novelty(fit_nov_opts); });

  CombineOpts combine_opts;
  CLI::App* combine = app.add_subcommand(
      "combine", "average member predictions into ensemble probabilities");
  combine->add_option("--pred", combine_opts.preds,
                      "member prediction files (repeatable)")
      ->required()
      ->expected(-1);
  combine->add_option("--out", combine_opts.out,
                      "write the combined probabilities CSV");
  combine->add_option("--format", combine_opts.format,
                      "force input format: csv or json");
  combine->callback([&] { run_combine(combine_opts); });

  SweepOpts sweep_opts;
  CLI::App* sweep = app.add_subcommand(
      "sweep", "NLL/ECE per group across a temperature grid");
  sweep->add_option("--pred", sweep_opts.pred, "prediction file")->required();
  sweep->add_option("--t-min", sweep_opts.t_min, "lowest temperature (> 0)");
  sweep->add_option("--t-max", sweep_opts.t_max, "highest temperature");
  sweep->add_option("--steps", sweep_opts.steps, "grid points (>= 2)");
  sweep->add_option("--out", sweep_opts.out, "write the sweep CSV");
  sweep->add_option("--format", sweep_opts.format,
                    "force input format: csv or json");
  sweep->callback([&] { run_sweep(sweep_opts); });

  ReportOpts report_opts;
  CLI::App* report = app.add_subcommand(
      "report", "percent-reduction table against a baseline report");
  report->add_option("--baseline", report_opts.baseline,
                     "baseline grouped-report JSON (from eval --out)")
      ->required();
  report->add_option("--method", report_opts.methods,
                     "NAME=FILE method report (repeatable)")
      ->required()
      ->expected(-1);
  report->add_option("--out", report_opts.out_json, "write the table JSON");
  report->add_option("--out-md", report_opts.out_md,
                     "write the rendered markdown");
  report->callback([&] { run_report(report_opts); });

  ToyOpts toy_opts;
  CLI::App* toy = app.add_subcommand(
      "toy", "run the 2D familiar/novel benchmark and write artifacts");
  toy->add_option("--spec", toy_opts.generator,
                  "generator: blobs, moons, xor, or rings");
  toy->add_option("--spec-file", toy_opts.spec_file,
                  "full benchmark spec JSON (flags override it)");
  toy->add_option("--roster", toy_opts.roster,
                  "comma-separated methods, or 'all'");
  toy->add_option("--seeds", toy_opts.seeds, "number of seeds to run");
  toy->add_option("--seed", toy_opts.seed, "base seed (runs use seed..seed+n-1)");
  toy->add_option("--width", toy_opts.width, "hidden width override");
  toy->add_option("--train", toy_opts.train, "training samples override");
  toy->add_option("--val", toy_opts.val, "validation samples override");
  toy->add_option("--unsup", toy_opts.unsup, "distillation pool size override");
  toy->add_option("--grid", toy_opts.grid, "grid resolution override");
  toy->add_option("--epochs", toy_opts.epochs, "max epochs override");
  toy->add_option("--ensemble", toy_opts.ensemble, "ensemble size override");
  toy->add_option("--out", toy_opts.out, "output directory");
  toy->callback([&] { run_toy(toy_opts); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
