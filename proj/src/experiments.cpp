#include "lmbot/experiments.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

#include <nlohmann/json.hpp>

namespace lmbot {

std::string to_string(SweepAxis axis) { return axis == SweepAxis::labels ? "labels" : "edges"; }

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "labels") return SweepAxis::labels;
  if (text == "edges") return SweepAxis::edges;
  throw ConfigError("sweep axis must be labels or edges (got '" + text + "')");
}

namespace {

double parse_fraction(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad grid value '" + s + "'");
  }
}

std::string fraction_tag(double f) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << f;
  return out.str();
}

}  // namespace

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("grid range must be start:stop:step");
    const double a = parse_fraction(parts[0]), b = parse_fraction(parts[1]), step = parse_fraction(parts[2]);
    if (!(step > 0) || b < a) throw ConfigError("grid range needs step > 0 and stop >= start");
    const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(std::round((a + static_cast<double>(i) * step) * 1e9) / 1e9);
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');)
      if (!p.empty()) out.push_back(parse_fraction(p));
  }
  if (out.empty()) throw ConfigError("empty grid");
  for (double f : out)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("grid fractions must lie in (0, 1]");
  return out;
}

RunSummary summarize(const PipelineResult& result, const RunConfig& cfg) {
  RunSummary s;
  s.run = cfg.name;
  s.seed = cfg.seed;
  s.student = result.history.at(static_cast<std::size_t>(result.best_student_iteration)).student;
  if (result.best_teacher_iteration >= 0)
    s.teacher = result.history.at(static_cast<std::size_t>(result.best_teacher_iteration)).teacher;
  s.iterations = result.history.back().iteration;
  s.converged = result.converged;
  return s;
}

std::vector<SweepRow> data_efficiency_sweep(const Dataset& dataset, const RunConfig& base, SweepAxis axis,
                                            const std::vector<double>& grid, std::ostream* log) {
  if (axis == SweepAxis::edges && !dataset.graph) throw ConfigError("the edges axis needs a graph-based dataset");
  const SplitAssignment full = split_dataset(dataset, base.split, base.seed);
  std::vector<SweepRow> rows;
  for (double f : grid) {
    RunConfig cfg = base;
    cfg.name = base.name + "-" + to_string(axis) + "-" + fraction_tag(f);
    Dataset ds = dataset;
    SplitAssignment split = full;
    if (axis == SweepAxis::labels) split = trim_labels(full, f, derive_seed(base.seed, "trim_labels"));
    else ds.graph = trim_edges(*dataset.graph, f, derive_seed(base.seed, "trim_edges"));
    if (log) *log << "== " << to_string(axis) << " fraction " << fraction_tag(f) << " (" << cfg.name << ")\n";
    DistillSession session(cfg, std::move(ds), split, log);
    const auto result = session.run_pipeline();
    const nlohmann::json trim = {{"axis", to_string(axis)}, {"fraction", f}, {"seed", base.seed}};
    write_file_atomic(session.run_dir() / "trim.json", trim.dump(2) + "\n");
    rows.push_back({axis, f, summarize(result, cfg)});
  }
  write_file_atomic(base.run_dir() / ("sweep_" + to_string(axis) + ".csv"), sweep_csv(rows));
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "axis,fraction,run,seed,model,split,accuracy,f1,tp,fp,tn,fn\n";
  out << std::setprecision(17);
  auto emit = [&](const SweepRow& r, const char* model, const char* split, const MetricReport& m) {
    out << to_string(r.axis) << ',' << fraction_tag(r.fraction) << ',' << r.summary.run << ',' << r.summary.seed << ','
        << model << ',' << split << ',' << m.accuracy << ',' << m.f1 << ',' << m.tp << ',' << m.fp << ',' << m.tn
        << ',' << m.fn << '\n';
  };
  for (const auto& r : rows) {
    emit(r, "lm", "valid", r.summary.student.valid);
    emit(r, "lm", "test", r.summary.student.test);
    if (r.summary.teacher) {
      emit(r, "teacher", "valid", r.summary.teacher->valid);
      emit(r, "teacher", "test", r.summary.teacher->test);
    }
  }
  return out.str();
}

std::string to_string(AblationSetting s) {
  switch (s) {
    case AblationSetting::no_teacher: return "no_teacher";
    case AblationSetting::no_student: return "no_student";
    case AblationSetting::teacher_as_mlp: return "teacher_as_mlp";
    case AblationSetting::no_metadata: return "no_metadata";
    case AblationSetting::no_tweets: return "no_tweets";
    case AblationSetting::no_description: return "no_description";
  }
  return "?";
}

const std::vector<AblationSetting>& all_ablation_settings() {
  static const std::vector<AblationSetting> all = {
      AblationSetting::no_teacher,  AblationSetting::no_student, AblationSetting::teacher_as_mlp,
      AblationSetting::no_metadata, AblationSetting::no_tweets,  AblationSetting::no_description};
  return all;
}

AblationSetting parse_ablation_setting(const std::string& text) {
  for (auto s : all_ablation_settings())
    if (to_string(s) == text) return s;
  throw ConfigError("unknown ablation setting '" + text + "'");
}

namespace {

void persist_partial(const RunConfig& cfg, const std::filesystem::path& dir, const std::vector<IterationRecord>& records) {
  std::string text;
  for (const auto& r : records) text += r.to_json().dump() + "\n";
  write_file_atomic(dir / "config.toml", cfg.to_toml());
  write_file_atomic(dir / "iterations.jsonl", text);
  const auto& last = records.back();
  const nlohmann::json fin = {
      {"converged", false},
      {"iterations", last.iteration},
      {"best_student", last.student_checkpoint},
      {"best_teacher", last.teacher_checkpoint.empty() ? nlohmann::json(nullptr) : nlohmann::json(last.teacher_checkpoint)},
  };
  write_file_atomic(dir / "final.json", fin.dump(2) + "\n");
  std::filesystem::remove(dir / "trim.json");
}

}  // namespace

AblationResult run_ablation(const Dataset& dataset, const RunConfig& base, AblationSetting setting, std::ostream* log) {
  RunConfig cfg = base;
  cfg.name = base.name + "-" + to_string(setting);
  AblationResult out;
  out.setting = setting;
  out.model = "lm";
  switch (setting) {
    case AblationSetting::no_teacher: {
      DistillSession session(cfg, dataset, std::nullopt, log);
      const auto r0 = session.run_domain_adaptation();
      out.metrics = r0.student;
      out.run_dir = session.run_dir();
      persist_partial(cfg, out.run_dir, {r0});
      return out;
    }
    case AblationSetting::no_student: {
      // Student frozen at initialisation; the teacher is trained once on its
      // embeddings.
      cfg.skip_adaptation = true;
      DistillSession session(cfg, dataset, std::nullopt, log);
      const auto r0 = session.run_domain_adaptation();
      const auto r1 = session.run_iteration(r0);
      out.model = "teacher";
      out.metrics = *r1.teacher;
      out.run_dir = session.run_dir();
      persist_partial(cfg, out.run_dir, {r0, r1});
      return out;
    }
    case AblationSetting::teacher_as_mlp:
      if (!dataset.graph) throw ConfigError("teacher_as_mlp needs a graph-based dataset");
      cfg.teacher.kind = TeacherKind::mlp;
      break;
    case AblationSetting::no_metadata: cfg.sections.metadata = false; break;
    case AblationSetting::no_tweets:
      if (!dataset.has_tweets()) throw ConfigError("no_tweets does not apply: the dataset has no tweets");
      cfg.sections.tweets = false;
      break;
    case AblationSetting::no_description:
      if (!dataset.has_descriptions()) throw ConfigError("no_description does not apply: the dataset has no descriptions");
      cfg.sections.description = false;
      break;
  }
  DistillSession session(cfg, dataset, std::nullopt, log);
  const auto result = session.run_pipeline();
  out.metrics = summarize(result, cfg).student;
  out.run_dir = session.run_dir();
  return out;
}

RunEvaluation evaluate_run(const std::filesystem::path& run_dir, const Dataset* dataset) {
  namespace fs = std::filesystem;
  const auto final_file = run_dir / "final.json";
  if (!fs::exists(final_file)) throw DataError("no final.json in " + run_dir.string() + "; is the run finished?");
  RunEvaluation ev;
  ev.cfg = load_config(run_dir / "config.toml");
  std::optional<Dataset> loaded;
  if (!dataset) {
    if (ev.cfg.data_path.empty()) throw ConfigError("run config has no data.path");
    loaded = load_dataset(ev.cfg.data_path);
    dataset = &*loaded;
  }
  ev.split = load_split(run_dir / split_file_name(ev.cfg.seed));
  // edge-sweep cells ran on a trimmed graph
  std::optional<Dataset> trimmed;
  if (fs::exists(run_dir / "trim.json")) {
    const auto trim = nlohmann::json::parse(read_file(run_dir / "trim.json"));
    if (trim.at("axis").get<std::string>() == to_string(SweepAxis::edges)) {
      if (!dataset->graph) throw DataError("edge-sweep run " + run_dir.string() + " needs a graph-based dataset");
      trimmed = *dataset;
      trimmed->graph = trim_edges(*dataset->graph, trim.at("fraction").get<double>(),
                                  derive_seed(trim.at("seed").get<std::uint64_t>(), "trim_edges"));
      dataset = &*trimmed;
    }
  }
  const auto fin = nlohmann::json::parse(read_file(final_file));

  auto student_probs = [&](const fs::path& dir) {
    const auto ckpt = load_student(dir);
    std::vector<Probs> out;
    out.reserve(dataset->records.size());
    for (const auto& r : dataset->records) out.push_back(predict(ckpt.model, serialize_user(r, ckpt.vocab, ckpt.serialize)));
    return out;
  };
  auto report = [&](const std::vector<Probs>& probs, const std::vector<std::size_t>& nodes) {
    std::vector<Probs> p;
    std::vector<Label> l;
    for (auto i : nodes) {
      p.push_back(probs.at(i));
      l.push_back(dataset->records.at(i).label.value());
    }
    return compute_metrics(p, l, ev.cfg.f1);
  };

  ev.student = student_probs(run_dir / fin.at("best_student").get<std::string>());
  ev.student_metrics = {report(ev.student, ev.split.valid), report(ev.student, ev.split.test)};

  if (!fin.at("best_teacher").is_null()) {
    const auto tdir = run_dir / fin.at("best_teacher").get<std::string>();
    auto teacher = load_teacher(tdir);
    const auto source = load_student(run_dir / teacher.manifest.at("embedding_checkpoint").get<std::string>());
    std::vector<TextualSequence> seqs;
    for (const auto& r : dataset->records) seqs.push_back(serialize_user(r, source.vocab, source.serialize));
    const Matrix z = teacher_inputs(source.model, seqs);
    std::optional<GraphOperators> ops;
    if (uses_graph(teacher.model->config().kind)) {
      if (!dataset->graph) throw DataError("the run's teacher needs a graph but the dataset has none");
      ops = make_graph_operators(*dataset->graph);
    }
    ev.teacher = teacher_probabilities(*teacher.model, z, ops ? &*ops : nullptr);
    ev.teacher_metrics = ModelMetrics{report(ev.teacher, ev.split.valid), report(ev.teacher, ev.split.test)};
  }
  return ev;
}

std::string consistency_csv(const RunEvaluation& eval, const Dataset& dataset, const std::vector<std::size_t>& nodes) {
  if (eval.teacher.empty()) throw DataError("the run has no teacher to compare against");
  std::ostringstream out;
  out << std::setprecision(17) << "p_student,p_teacher,label\n";
  for (auto i : nodes) {
    const auto& label = dataset.records.at(i).label;
    out << eval.student.at(i)[1] << ',' << eval.teacher.at(i)[1] << ',' << (label ? to_string(*label) : "") << '\n';
  }
  return out.str();
}

std::string ablation_csv(const std::vector<AblationResult>& results, const RunConfig& base) {
  std::string csv = "setting,model,run,seed,split,accuracy,f1,tp,fp,tn,fn\n";
  for (const auto& r : results) {
    const std::string run = base.name + "-" + to_string(r.setting);
    csv += to_string(r.setting) + "," + r.model + "," + metrics_csv_row(run, base.seed, "valid", r.metrics.valid);
    csv += to_string(r.setting) + "," + r.model + "," + metrics_csv_row(run, base.seed, "test", r.metrics.test);
  }
  return csv;
}

std::string metrics_csv_header() { return "run,seed,split,accuracy,f1,tp,fp,tn,fn\n"; }

std::string metrics_csv_row(const std::string& run, std::uint64_t seed, const std::string& split,
                            const MetricReport& m) {
  std::ostringstream out;
  out << std::setprecision(17) << run << ',' << seed << ',' << split << ',' << m.accuracy << ',' << m.f1 << ',' << m.tp
      << ',' << m.fp << ',' << m.tn << ',' << m.fn << '\n';
  return out.str();
}

}  // namespace lmbot
