#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmbot/checkpoint.hpp"
#include "lmbot/config.hpp"
#include "lmbot/corpus.hpp"
#include "lmbot/graph_teacher.hpp"
#include "lmbot/lm_encoder.hpp"
#include "lmbot/metrics.hpp"

namespace lmbot {

struct ModelMetrics {
  MetricReport valid;
  MetricReport test;
};

nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);

/// One line of iterations.jsonl. Iteration 0 is domain adaptation and has no
/// teacher.
struct IterationRecord {
  int iteration = 0;
  ModelMetrics student;
  std::optional<ModelMetrics> teacher;
  std::string student_checkpoint;  // relative to the run directory
  std::string student_id;
  std::string teacher_checkpoint;
  std::string teacher_id;
  std::string soft_labels;
  std::string soft_label_source;  // teacher id the soft labels came from
  std::string embedding_source;   // student id the teacher's inputs came from
  int teacher_epochs = 0;
  int student_epochs = 0;
  double duration_s = 0.0;

  nlohmann::json to_json() const;
  static IterationRecord from_json(const nlohmann::json& j);
};

struct ConvergencePolicy {
  int min_iterations = 2;
  double tolerance = 1e-6;
};

/// True once iteration >= min_iterations and neither model's validation
/// accuracy beat the previous iteration by more than the tolerance.
bool check_convergence(const std::vector<IterationRecord>& history, const ConvergencePolicy& policy);

/// First iteration whose student validation accuracy equals the best one.
int iterations_to_best_student(const std::vector<IterationRecord>& history);

struct FitResult {
  double best_valid_accuracy = 0.0;
  int best_epoch = 0;  // 0 means the starting parameters were kept
  int epochs_run = 0;
};

/// Labeled node sets used for training and selection.
struct LabeledSets {
  HardLabels train;
  std::vector<std::size_t> valid;
  std::vector<Label> valid_labels;
};

/// Trains up to max_epochs with early stopping on validation accuracy and
/// leaves the model at the best epoch (epoch 0 = starting parameters, earlier
/// epoch wins ties).
FitResult fit_teacher(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph,
                      const LabeledSets& sets, Rng& rng);

std::vector<Probs> teacher_probabilities(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph);

/// Embeddings of every sequence (rows follow `sequences`).
Matrix embed_all(const StudentModel& model, const std::vector<TextualSequence>& sequences);

/// Zero mean, unit (population) variance per column; constant columns are
/// only centred.
Matrix standardize_columns(const Matrix& x);

/// Standardized student embeddings of every node, as fed to the teacher.
Matrix teacher_inputs(const StudentModel& model, const std::vector<TextualSequence>& sequences);

struct PipelineResult {
  std::vector<IterationRecord> history;
  int best_student_iteration = 0;
  int best_teacher_iteration = -1;
  bool converged = false;
  std::filesystem::path run_dir;
};

/// Drives domain adaptation and the alternating teacher/student iterations
/// for one run directory.
class DistillSession {
 public:
  /// `split` and a trimmed graph may be supplied by sweeps; otherwise the
  /// split is loaded from or written to the run directory.
  DistillSession(RunConfig cfg, Dataset dataset, std::optional<SplitAssignment> split = std::nullopt,
                 std::ostream* log = nullptr);

  IterationRecord run_domain_adaptation();
  IterationRecord run_iteration(const IterationRecord& previous);

  /// Called after each persisted iteration; returning false stops the run
  /// early (used to simulate interruption).
  using Hook = std::function<bool(const IterationRecord&)>;
  PipelineResult run_pipeline(bool resume = false, const Hook& hook = {});

  const RunConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return dataset_; }
  const SplitAssignment& split() const { return split_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<TextualSequence>& sequences() const { return sequences_; }
  const GraphOperators* graph() const { return graph_ ? &*graph_ : nullptr; }
  const std::filesystem::path& run_dir() const { return dir_; }
  std::vector<std::size_t> soft_set() const;

  ModelMetrics evaluate_student(const StudentModel& model) const;
  ModelMetrics evaluate_teacher(TeacherModel& model, const Matrix& embeddings) const;

 private:
  StudentModel new_student() const;
  std::unique_ptr<TeacherModel> new_teacher(Eigen::Index input_width) const;
  FitResult fit_student_distill(StudentModel& model, const SoftLabelTable& soft, int iteration) const;
  FitResult fit_student_finetune(StudentModel& model) const;
  double student_valid_accuracy(const StudentModel& model) const;
  void save_history(const std::vector<IterationRecord>& history) const;
  std::vector<IterationRecord> load_history() const;
  void log_record(const IterationRecord& r) const;

  RunConfig cfg_;
  Dataset dataset_;
  SplitAssignment split_;
  Vocabulary vocab_;
  SerializeOptions serialize_;
  std::vector<TextualSequence> sequences_;
  std::optional<GraphOperators> graph_;
  LabeledSets sets_;
  std::filesystem::path dir_;
  std::ostream* log_ = nullptr;
};

/// Reads iterations.jsonl of a finished or partial run.
std::vector<IterationRecord> read_iterations(const std::filesystem::path& run_dir);

}  // namespace lmbot
