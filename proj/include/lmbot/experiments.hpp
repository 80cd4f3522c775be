#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lmbot/distill.hpp"

namespace lmbot {

enum class SweepAxis { labels, edges };
std::string to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(const std::string& text);

/// "a:b:step" (inclusive) or a comma-separated list of fractions.
std::vector<double> parse_grid(const std::string& text);

/// Test metrics of the selected student and teacher of one finished run.
struct RunSummary {
  std::string run;
  std::uint64_t seed = 0;
  ModelMetrics student;
  std::optional<ModelMetrics> teacher;
  int iterations = 0;
  bool converged = false;
};

RunSummary summarize(const PipelineResult& result, const RunConfig& cfg);

struct SweepRow {
  SweepAxis axis = SweepAxis::labels;
  double fraction = 1.0;
  RunSummary summary;
};

/// One full pipeline per fraction; each cell owns run directory
/// <name>-<axis>-<fraction>. Writes sweep_<axis>.csv into the base run
/// directory and returns the rows.
std::vector<SweepRow> data_efficiency_sweep(const Dataset& dataset, const RunConfig& base, SweepAxis axis,
                                            const std::vector<double>& grid, std::ostream* log = nullptr);

std::string sweep_csv(const std::vector<SweepRow>& rows);

enum class AblationSetting { no_teacher, no_student, teacher_as_mlp, no_metadata, no_tweets, no_description };
std::string to_string(AblationSetting s);
AblationSetting parse_ablation_setting(const std::string& text);
const std::vector<AblationSetting>& all_ablation_settings();

struct AblationResult {
  AblationSetting setting = AblationSetting::no_teacher;
  std::string model;  // "lm" or "teacher": whose metrics `metrics` holds
  ModelMetrics metrics;
  std::filesystem::path run_dir;
};

/// Throws ConfigError when the setting does not apply to the dataset.
AblationResult run_ablation(const Dataset& dataset, const RunConfig& base, AblationSetting setting,
                            std::ostream* log = nullptr);

/// setting, model, then the metrics.csv columns; one valid and one test row
/// per result.
std::string ablation_csv(const std::vector<AblationResult>& results, const RunConfig& base);

/// Predictions of a finished run's selected models, recomputed from its
/// checkpoints. The teacher sees embeddings from the student checkpoint named
/// in its manifest. Pass `dataset` to skip reloading it from data.path.
struct RunEvaluation {
  RunConfig cfg;
  SplitAssignment split;
  std::vector<Probs> student;  // one row per record
  std::vector<Probs> teacher;  // empty when the run has no teacher
  ModelMetrics student_metrics;
  std::optional<ModelMetrics> teacher_metrics;
};

RunEvaluation evaluate_run(const std::filesystem::path& run_dir, const Dataset* dataset = nullptr);

/// consistency.csv body over the given nodes: p_student, p_teacher, label.
std::string consistency_csv(const RunEvaluation& eval, const Dataset& dataset, const std::vector<std::size_t>& nodes);

/// metrics.csv rows: run, seed, split, accuracy, f1, tp, fp, tn, fn.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& run, std::uint64_t seed, const std::string& split,
                            const MetricReport& m);

}  // namespace lmbot
