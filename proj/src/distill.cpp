#include "lmbot/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

namespace fs = std::filesystem;

nlohmann::json to_json(const MetricReport& r) {
  return {{"accuracy", r.accuracy}, {"f1", r.f1}, {"tp", r.tp}, {"fp", r.fp},
          {"tn", r.tn},             {"fn", r.fn}, {"n", r.n}};
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.tp = j.at("tp").get<std::size_t>();
  r.fp = j.at("fp").get<std::size_t>();
  r.tn = j.at("tn").get<std::size_t>();
  r.fn = j.at("fn").get<std::size_t>();
  r.n = j.at("n").get<std::size_t>();
  return r;
}

namespace {

nlohmann::json metrics_json(const ModelMetrics& m) { return {{"valid", to_json(m.valid)}, {"test", to_json(m.test)}}; }

ModelMetrics metrics_from_json(const nlohmann::json& j) {
  return {metric_report_from_json(j.at("valid")), metric_report_from_json(j.at("test"))};
}

}  // namespace

nlohmann::json IterationRecord::to_json() const {
  nlohmann::json j = {
      {"iteration", iteration},
      {"student", metrics_json(student)},
      {"teacher", teacher ? metrics_json(*teacher) : nlohmann::json(nullptr)},
      {"student_checkpoint", student_checkpoint},
      {"student_id", student_id},
      {"teacher_checkpoint", teacher_checkpoint},
      {"teacher_id", teacher_id},
      {"soft_labels", soft_labels},
      {"soft_label_source", soft_label_source},
      {"embedding_source", embedding_source},
      {"teacher_epochs", teacher_epochs},
      {"student_epochs", student_epochs},
      {"duration_s", duration_s},
  };
  return j;
}

IterationRecord IterationRecord::from_json(const nlohmann::json& j) {
  IterationRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.student = metrics_from_json(j.at("student"));
  if (!j.at("teacher").is_null()) r.teacher = metrics_from_json(j.at("teacher"));
  r.student_checkpoint = j.at("student_checkpoint").get<std::string>();
  r.student_id = j.at("student_id").get<std::string>();
  r.teacher_checkpoint = j.at("teacher_checkpoint").get<std::string>();
  r.teacher_id = j.at("teacher_id").get<std::string>();
  r.soft_labels = j.at("soft_labels").get<std::string>();
  r.soft_label_source = j.at("soft_label_source").get<std::string>();
  r.embedding_source = j.at("embedding_source").get<std::string>();
  r.teacher_epochs = j.at("teacher_epochs").get<int>();
  r.student_epochs = j.at("student_epochs").get<int>();
  r.duration_s = j.at("duration_s").get<double>();
  return r;
}

bool check_convergence(const std::vector<IterationRecord>& history, const ConvergencePolicy& policy) {
  if (history.empty()) return false;
  const auto& cur = history.back();
  if (cur.iteration < policy.min_iterations || history.size() < 2) return false;
  const auto& prev = history[history.size() - 2];
  const bool student_up = cur.student.valid.accuracy > prev.student.valid.accuracy + policy.tolerance;
  bool teacher_up = false;
  if (cur.teacher)
    teacher_up = !prev.teacher || cur.teacher->valid.accuracy > prev.teacher->valid.accuracy + policy.tolerance;
  return !student_up && !teacher_up;
}

int iterations_to_best_student(const std::vector<IterationRecord>& history) {
  if (history.empty()) return -1;
  double best = -1.0;
  int at = -1;
  for (const auto& r : history)
    if (r.student.valid.accuracy > best + 1e-12) {
      best = r.student.valid.accuracy;
      at = r.iteration;
    }
  return at;
}

namespace {

double accuracy_of(const Matrix& logits, const std::vector<std::size_t>& nodes, const std::vector<Label>& labels) {
  if (nodes.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(nodes[k]);
    const bool bot = predicts_bot(softmax2(logits(i, 0), logits(i, 1)));
    if (bot == (labels[k] == Label::bot)) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

std::vector<Matrix> snapshot(const ParameterRefs& params) {
  std::vector<Matrix> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

void restore(const ParameterRefs& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace

FitResult fit_teacher(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph,
                      const LabeledSets& sets, Rng& rng) {
  const auto& cfg = model.config();
  FitResult fit;
  auto params = model.parameters();
  auto best = snapshot(params);
  fit.best_valid_accuracy = accuracy_of(model.forward(embeddings, graph), sets.valid, sets.valid_labels);
  if (cfg.max_epochs == 0) return fit;
  if (sets.train.empty()) throw DataError("teacher training needs at least one hard label");
  AdamW opt({.lr = cfg.lr});
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    teacher_train_step(model, opt, embeddings, graph, sets.train, rng);
    fit.epochs_run = epoch;
    const double acc = accuracy_of(model.forward(embeddings, graph), sets.valid, sets.valid_labels);
    if (acc > fit.best_valid_accuracy + 1e-12) {
      fit.best_valid_accuracy = acc;
      fit.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  restore(params, best);
  return fit;
}

std::vector<Probs> teacher_probabilities(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph) {
  const Matrix logits = model.forward(embeddings, graph);
  std::vector<Probs> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out[static_cast<std::size_t>(i)] = softmax2(logits(i, 0), logits(i, 1));
  return out;
}

Matrix embed_all(const StudentModel& model, const std::vector<TextualSequence>& sequences) {
  Matrix z(static_cast<Eigen::Index>(sequences.size()), model.backend().width());
  for (std::size_t i = 0; i < sequences.size(); ++i)
    z.row(static_cast<Eigen::Index>(i)) = encode_user(model.backend(), sequences[i]).transpose();
  return z;
}

Matrix standardize_columns(const Matrix& x) {
  Matrix out = x;
  if (x.rows() == 0) return out;
  const RowVector mean = x.colwise().mean();
  out.rowwise() -= mean;
  const RowVector sd = (out.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    if (sd(c) > 1e-12) out.col(c) /= sd(c);
  return out;
}

Matrix teacher_inputs(const StudentModel& model, const std::vector<TextualSequence>& sequences) {
  return standardize_columns(embed_all(model, sequences));
}

DistillSession::DistillSession(RunConfig cfg, Dataset dataset, std::optional<SplitAssignment> split, std::ostream* log)
    : cfg_(std::move(cfg)), dataset_(std::move(dataset)), log_(log) {
  cfg_.validate();
  dir_ = cfg_.run_dir();
  if (uses_graph(cfg_.teacher.kind) && !dataset_.graph)
    throw ConfigError("teacher kind " + to_string(cfg_.teacher.kind) +
                      " needs a graph but the dataset has none; set gnn.kind = mlp");
  fs::create_directories(dir_);

  const auto split_file = dir_ / split_file_name(cfg_.seed);
  if (split) {
    split_ = *split;
  } else if (fs::exists(split_file)) {
    split_ = load_split(split_file);
  } else {
    split_ = split_dataset(dataset_, cfg_.split, cfg_.seed);
  }
  const auto n = dataset_.records.size();
  for (const auto* part : {&split_.train, &split_.valid, &split_.test})
    for (auto i : *part)
      if (i >= n || !dataset_.records[i].label) throw DataError("split refers to a missing or unlabeled record");
  if (split_.train.empty() || split_.valid.empty() || split_.test.empty())
    throw DataError("train, valid and test splits must all be non-empty");
  save_split(split_, split_file);

  std::vector<UserRecord> train_records;
  for (auto i : split_.train) train_records.push_back(dataset_.records[i]);
  vocab_ = build_vocabulary(train_records, cfg_.min_count, cfg_.sections);
  serialize_ = {cfg_.max_length, cfg_.sections};
  sequences_.reserve(n);
  for (const auto& r : dataset_.records) sequences_.push_back(serialize_user(r, vocab_, serialize_));

  if (uses_graph(cfg_.teacher.kind)) graph_ = make_graph_operators(*dataset_.graph);

  for (auto i : split_.train) sets_.train.emplace_back(i, *dataset_.records[i].label);
  for (auto i : split_.valid) {
    sets_.valid.push_back(i);
    sets_.valid_labels.push_back(*dataset_.records[i].label);
  }
}

std::vector<std::size_t> DistillSession::soft_set() const {
  std::vector<std::size_t> out;
  switch (cfg_.soft_set) {
    case SoftSet::train: out = split_.train; break;
    case SoftSet::train_valid:
      out = split_.train;
      out.insert(out.end(), split_.valid.begin(), split_.valid.end());
      break;
    case SoftSet::all:
      for (std::size_t i = 0; i < dataset_.records.size(); ++i) out.push_back(i);
      break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

StudentModel DistillSession::new_student() const {
  Rng rng = make_rng(cfg_.seed, "student_init");
  auto backend = make_backend(cfg_.backend, vocab_.size(), cfg_.max_length, cfg_.lm_width, rng);
  ClassifierHead head(cfg_.lm_width, cfg_.head_hidden(), rng);
  return StudentModel(std::move(backend), std::move(head), cfg_.lm_dropout);
}

std::unique_ptr<TeacherModel> DistillSession::new_teacher(Eigen::Index input_width) const {
  Rng rng = make_rng(cfg_.seed, "teacher_init");
  std::vector<std::string> relations;
  if (graph_) relations = graph_->relation_names;
  return std::make_unique<TeacherModel>(cfg_.teacher, input_width, relations, rng);
}

double DistillSession::student_valid_accuracy(const StudentModel& model) const {
  std::size_t hit = 0;
  for (std::size_t k = 0; k < sets_.valid.size(); ++k)
    if (predicts_bot(predict(model, sequences_[sets_.valid[k]])) == (sets_.valid_labels[k] == Label::bot)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(sets_.valid.size());
}

namespace {

// Runs `epochs` shuffled passes of `step` over `items`, keeping the best
// validation checkpoint.
template <class Item, class Step>
FitResult fit_epochs(StudentModel& model, std::vector<Item> items, int epochs, int batch_size, Rng& shuffle_rng,
                     Step step, const std::function<double(const StudentModel&)>& valid_accuracy) {
  FitResult fit;
  fit.best_valid_accuracy = valid_accuracy(model);
  std::optional<StudentModel> best;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(items.begin(), items.end(), shuffle_rng);
    for (std::size_t b = 0; b < items.size(); b += static_cast<std::size_t>(batch_size)) {
      const auto e = std::min(items.size(), b + static_cast<std::size_t>(batch_size));
      // L2 weighted by the batch's share of the epoch, so one epoch pays the
      // full-set penalty once.
      const double share = static_cast<double>(e - b) / static_cast<double>(items.size());
      step(std::span<const Item>(items.data() + b, e - b), share);
    }
    fit.epochs_run = epoch;
    const double acc = valid_accuracy(model);
    if (acc > fit.best_valid_accuracy + 1e-12) {
      fit.best_valid_accuracy = acc;
      fit.best_epoch = epoch;
      best = model;
    }
  }
  if (fit.best_epoch != epochs) {
    if (best) model = *best;
  }
  return fit;
}

}  // namespace

FitResult DistillSession::fit_student_finetune(StudentModel& model) const {
  std::vector<StudentExample> items;
  for (const auto& [node, label] : sets_.train) items.push_back({&sequences_[node], label, std::nullopt});
  Rng shuffle = make_rng(cfg_.seed, "finetune_shuffle");
  Rng dropout = make_rng(cfg_.seed, "finetune_dropout");
  AdamW opt({.lr = cfg_.resolved_lm_lr()});
  const StudentModel start = model;
  auto fit = fit_epochs(
      model, items, cfg_.finetune_epochs, cfg_.batch_size, shuffle,
      [&](std::span<const StudentExample> batch, double share) {
        lm_finetune_step(model, opt, batch, cfg_.lm_l2 * share, dropout);
      },
      [this](const StudentModel& m) { return student_valid_accuracy(m); });
  if (fit.best_epoch == 0) model = start;
  return fit;
}

FitResult DistillSession::fit_student_distill(StudentModel& model, const SoftLabelTable& soft, int iteration) const {
  const auto s = soft_set();
  std::vector<std::size_t> nodes;
  for (const auto& [node, label] : sets_.train) nodes.push_back(node);
  nodes.insert(nodes.end(), s.begin(), s.end());
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  std::vector<DistillItem> items;
  for (auto node : nodes) {
    DistillItem item{&sequences_[node], node, std::nullopt, std::binary_search(s.begin(), s.end(), node)};
    auto it = std::find_if(sets_.train.begin(), sets_.train.end(), [node](const auto& p) { return p.first == node; });
    if (it != sets_.train.end()) item.hard = it->second;
    items.push_back(item);
  }
  Rng shuffle = make_rng(cfg_.seed, "distill_shuffle", static_cast<std::uint64_t>(iteration));
  Rng dropout = make_rng(cfg_.seed, "distill_dropout", static_cast<std::uint64_t>(iteration));
  AdamW opt({.lr = cfg_.resolved_lm_lr()});
  const StudentModel start = model;
  auto fit = fit_epochs(
      model, items, cfg_.distill_epochs, cfg_.batch_size, shuffle,
      [&](std::span<const DistillItem> batch, double share) {
        auto loss_cfg = cfg_.student_loss();
        loss_cfg.lambda1 *= share;
        lm_distill_step(model, opt, batch, soft, loss_cfg, dropout);
      },
      [this](const StudentModel& m) { return student_valid_accuracy(m); });
  if (fit.best_epoch == 0) model = start;
  return fit;
}

ModelMetrics DistillSession::evaluate_student(const StudentModel& model) const {
  auto report = [&](const std::vector<std::size_t>& nodes) {
    std::vector<Probs> preds;
    std::vector<Label> labels;
    for (auto i : nodes) {
      preds.push_back(predict(model, sequences_[i]));
      labels.push_back(*dataset_.records[i].label);
    }
    return compute_metrics(preds, labels, cfg_.f1);
  };
  return {report(split_.valid), report(split_.test)};
}

ModelMetrics DistillSession::evaluate_teacher(TeacherModel& model, const Matrix& embeddings) const {
  const auto probs = teacher_probabilities(model, embeddings, graph());
  auto report = [&](const std::vector<std::size_t>& nodes) {
    std::vector<Probs> preds;
    std::vector<Label> labels;
    for (auto i : nodes) {
      preds.push_back(probs[i]);
      labels.push_back(*dataset_.records[i].label);
    }
    return compute_metrics(preds, labels, cfg_.f1);
  };
  return {report(split_.valid), report(split_.test)};
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string iter_dir(const char* kind, int k) { return std::string(kind) + "/iter_" + std::to_string(k); }

}  // namespace

IterationRecord DistillSession::run_domain_adaptation() {
  const auto t0 = std::chrono::steady_clock::now();
  StudentModel student = new_student();
  FitResult fit;
  if (!cfg_.skip_adaptation) fit = fit_student_finetune(student);
  IterationRecord r;
  r.iteration = 0;
  r.student = evaluate_student(student);
  r.student_checkpoint = iter_dir("lm", 0);
  r.student_id = checkpoint_id(student.parameters());
  r.student_epochs = fit.epochs_run;
  save_student(dir_ / r.student_checkpoint, student, vocab_, serialize_,
               {{"iteration", 0}, {"adapted", !cfg_.skip_adaptation}, {"best_epoch", fit.best_epoch}});
  r.duration_s = seconds_since(t0);
  return r;
}

IterationRecord DistillSession::run_iteration(const IterationRecord& previous) {
  const auto t0 = std::chrono::steady_clock::now();
  const int k = previous.iteration + 1;
  StudentModel student = load_student(dir_ / previous.student_checkpoint).model;
  const auto student_hash = parameter_hash(student.parameters());

  // (a) embeddings of every context node from the current best student
  const Matrix z = teacher_inputs(student, sequences_);

  // (b) teacher, warm-started from the previous iteration's selection
  std::unique_ptr<TeacherModel> teacher;
  if (previous.teacher_checkpoint.empty()) teacher = new_teacher(z.cols());
  else teacher = std::move(load_teacher(dir_ / previous.teacher_checkpoint).model);
  Rng teacher_rng = make_rng(cfg_.seed, "teacher_train", static_cast<std::uint64_t>(k));
  const FitResult teacher_fit = fit_teacher(*teacher, z, graph(), sets_, teacher_rng);
  if (parameter_hash(student.parameters()) != student_hash)
    throw TrainingError("student parameters changed during the teacher step");

  IterationRecord r;
  r.iteration = k;
  r.teacher = evaluate_teacher(*teacher, z);
  r.teacher_checkpoint = iter_dir("teacher", k);
  r.teacher_id = checkpoint_id(teacher->parameters());
  r.teacher_epochs = teacher_fit.epochs_run;
  r.embedding_source = previous.student_id;
  save_teacher(dir_ / r.teacher_checkpoint, *teacher,
               {{"iteration", k},
                {"embedding_source", previous.student_id},
                {"embedding_checkpoint", previous.student_checkpoint},
                {"best_epoch", teacher_fit.best_epoch}});

  // (c) soft labels from the selected teacher
  const Matrix logits = teacher->forward(z, graph());
  const SoftLabelTable soft = make_soft_labels(logits, cfg_.temperature, soft_set(), r.teacher_id);
  r.soft_labels = "soft_labels_iter_" + std::to_string(k) + ".jsonl";
  r.soft_label_source = soft.source;
  std::vector<std::string> ids;
  for (const auto& rec : dataset_.records) ids.push_back(rec.user_id);
  soft.save(dir_ / r.soft_labels, ids);

  // (d) student on hard + soft labels
  const FitResult student_fit = fit_student_distill(student, soft, k);
  r.student = evaluate_student(student);
  r.student_checkpoint = iter_dir("lm", k);
  r.student_id = checkpoint_id(student.parameters());
  r.student_epochs = student_fit.epochs_run;
  save_student(dir_ / r.student_checkpoint, student, vocab_, serialize_,
               {{"iteration", k}, {"soft_labels", r.soft_labels}, {"best_epoch", student_fit.best_epoch}});
  r.duration_s = seconds_since(t0);
  return r;
}

void DistillSession::save_history(const std::vector<IterationRecord>& history) const {
  std::string text;
  for (const auto& r : history) text += r.to_json().dump() + "\n";
  write_file_atomic(dir_ / "iterations.jsonl", text);
}

std::vector<IterationRecord> read_iterations(const fs::path& run_dir) {
  std::vector<IterationRecord> out;
  const auto file = run_dir / "iterations.jsonl";
  if (!fs::exists(file)) return out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(file)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(IterationRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(file.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<IterationRecord> DistillSession::load_history() const {
  auto all = read_iterations(dir_);
  std::vector<IterationRecord> kept;
  for (const auto& r : all) {
    if (r.iteration != static_cast<int>(kept.size())) break;
    const bool ok = fs::exists(dir_ / r.student_checkpoint / "manifest.json") &&
                    (r.teacher_checkpoint.empty() || fs::exists(dir_ / r.teacher_checkpoint / "manifest.json"));
    if (!ok) break;
    kept.push_back(r);
  }
  return kept;
}

void DistillSession::log_record(const IterationRecord& r) const {
  if (!log_) return;
  auto& out = *log_;
  if (r.iteration == 0)
    out << "iter  student_val  student_test  teacher_val  teacher_test  t_epochs  s_epochs  seconds\n";
  out << std::setw(4) << r.iteration << std::fixed << std::setprecision(4) << std::setw(13) << r.student.valid.accuracy
      << std::setw(14) << r.student.test.accuracy;
  if (r.teacher)
    out << std::setw(13) << r.teacher->valid.accuracy << std::setw(14) << r.teacher->test.accuracy;
  else
    out << std::setw(13) << "-" << std::setw(14) << "-";
  out << std::setw(10) << r.teacher_epochs << std::setw(10) << r.student_epochs << std::setprecision(1) << std::setw(9)
      << r.duration_s << '\n'
      << std::defaultfloat << std::flush;
}

PipelineResult DistillSession::run_pipeline(bool resume, const Hook& hook) {
  const auto config_file = dir_ / "config.toml";
  const std::string config_text = cfg_.to_toml();
  std::vector<IterationRecord> history;
  if (resume) {
    if (fs::exists(config_file) && read_file(config_file) != config_text)
      throw ConfigError("resolved config differs from the one recorded in " + config_file.string());
    history = load_history();
    for (const auto& r : history) log_record(r);
  } else {
    for (const char* sub : {"lm", "teacher"}) fs::remove_all(dir_ / sub);
    for (const auto& entry : fs::directory_iterator(dir_)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("soft_labels_iter_", 0) == 0) fs::remove(entry.path());
    }
    fs::remove(dir_ / "iterations.jsonl");
    fs::remove(dir_ / "final.json");
    fs::remove(dir_ / "trim.json");
  }
  write_file_atomic(config_file, config_text);

  PipelineResult result;
  result.run_dir = dir_;
  auto finish = [&] {
    result.history = history;
    const ConvergencePolicy policy{cfg_.min_iterations};
    result.converged = check_convergence(history, policy);
    double best_student = -1.0, best_teacher = -1.0;
    for (const auto& r : history) {
      if (r.student.valid.accuracy > best_student + 1e-12) {
        best_student = r.student.valid.accuracy;
        result.best_student_iteration = r.iteration;
      }
      if (r.teacher && r.teacher->valid.accuracy > best_teacher + 1e-12) {
        best_teacher = r.teacher->valid.accuracy;
        result.best_teacher_iteration = r.iteration;
      }
    }
    return result;
  };

  if (history.empty()) {
    history.push_back(run_domain_adaptation());
    save_history(history);
    log_record(history.back());
    if (hook && !hook(history.back())) return finish();
  }
  const ConvergencePolicy policy{cfg_.min_iterations};
  while (!check_convergence(history, policy) && history.back().iteration < cfg_.max_iterations) {
    history.push_back(run_iteration(history.back()));
    save_history(history);
    log_record(history.back());
    if (hook && !hook(history.back())) return finish();
  }
  finish();
  nlohmann::json final_json = {
      {"converged", result.converged},
      {"iterations", history.back().iteration},
      {"best_student", history[static_cast<std::size_t>(result.best_student_iteration)].student_checkpoint},
      {"best_teacher", result.best_teacher_iteration < 0
                           ? nlohmann::json(nullptr)
                           : nlohmann::json(history[static_cast<std::size_t>(result.best_teacher_iteration)]
                                                .teacher_checkpoint)},
  };
  write_file_atomic(dir_ / "final.json", final_json.dump(2) + "\n");
  return result;
}

}  // namespace lmbot
