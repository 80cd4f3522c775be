#include <doctest.h>

#include <fstream>
#include <sstream>

#include "lmbot/distill.hpp"
#include "lmbot/error.hpp"
#include "support.hpp"

using namespace lmbot;

namespace {

IterationRecord rec(int k, double student, std::optional<double> teacher) {
  IterationRecord r;
  r.iteration = k;
  r.student.valid.accuracy = student;
  if (teacher) {
    r.teacher = ModelMetrics{};
    r.teacher->valid.accuracy = *teacher;
  }
  return r;
}

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    SyntheticConfig s;
    s.n_users = 600;
    s.signal_rate = 0.08;  // weak text, so the graph has something to add
    return generate_synthetic(s, 11);
  }();
  return ds;
}

RunConfig small_config(const lmbot::testing::TempDir& dir, const std::string& name) {
  RunConfig cfg;
  cfg.name = name;
  cfg.root = dir.path().string();
  cfg.seed = 3;
  cfg.teacher.max_epochs = 150;
  cfg.max_iterations = 4;
  return cfg;
}

void check_same_metrics(const std::vector<IterationRecord>& a, const std::vector<IterationRecord>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].student.valid.accuracy == doctest::Approx(b[k].student.valid.accuracy).epsilon(1e-9));
    CHECK(a[k].student.test.accuracy == doctest::Approx(b[k].student.test.accuracy).epsilon(1e-9));
    CHECK(a[k].student.test.f1 == doctest::Approx(b[k].student.test.f1).epsilon(1e-9));
    CHECK(a[k].student_id == b[k].student_id);
    CHECK(a[k].teacher_id == b[k].teacher_id);
    CHECK(a[k].teacher.has_value() == b[k].teacher.has_value());
    if (a[k].teacher && b[k].teacher)
      CHECK(a[k].teacher->test.accuracy == doctest::Approx(b[k].teacher->test.accuracy).epsilon(1e-9));
  }
}

double majority_rate(const Dataset& ds, const std::vector<std::size_t>& nodes) {
  std::size_t bots = 0;
  for (auto i : nodes) bots += ds.records[i].label == Label::bot;
  const double p = static_cast<double>(bots) / static_cast<double>(nodes.size());
  return std::max(p, 1.0 - p);
}

}  // namespace

TEST_CASE("convergence rule") {
  const ConvergencePolicy policy;
  CHECK(policy.min_iterations == 2);
  CHECK_FALSE(check_convergence({rec(0, 0.5, {}), rec(1, 0.80, 0.82), rec(2, 0.83, 0.84)}, policy));
  CHECK(check_convergence({rec(0, 0.5, {}), rec(1, 0.83, 0.84), rec(2, 0.83, 0.84)}, policy));
  CHECK_FALSE(check_convergence({rec(0, 0.5, {}), rec(1, 0.83, 0.84), rec(2, 0.82, 0.85)}, policy));
  CHECK(check_convergence({rec(0, 0.5, {}), rec(1, 0.83, 0.84), rec(2, 0.8300000005, 0.84)}, policy));
  // below min_iterations the run always continues
  CHECK_FALSE(check_convergence({rec(0, 0.5, {}), rec(1, 0.5, 0.5)}, policy));
  CHECK_FALSE(check_convergence({rec(0, 0.5, {})}, policy));
}

TEST_CASE("iterations to best student") {
  CHECK(iterations_to_best_student({rec(0, 0.5, {}), rec(1, 0.7, 0.7), rec(2, 0.7, 0.8)}) == 1);
  CHECK(iterations_to_best_student({rec(0, 0.9, {}), rec(1, 0.9, 0.7)}) == 0);
}

TEST_CASE("iteration record json round trip") {
  auto r = rec(2, 0.75, 0.8);
  r.student.test = {0.7, 0.6, 1, 2, 3, 4, 10};
  r.student_checkpoint = "lm/iter_2";
  r.student_id = "abc";
  r.teacher_checkpoint = "teacher/iter_2";
  r.teacher_id = "def";
  r.soft_labels = "soft_labels_iter_2.jsonl";
  r.soft_label_source = "def";
  r.embedding_source = "xyz";
  r.teacher_epochs = 31;
  r.student_epochs = 2;
  r.duration_s = 1.5;
  const auto back = IterationRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back.to_json() == r.to_json());
  CHECK(back.student.test.tn == 3);
}

TEST_CASE("column standardization") {
  Matrix x(4, 3);
  x << 1, 5, 2, 2, 5, 4, 3, 5, 6, 4, 5, 8;
  const Matrix s = standardize_columns(x);
  for (Eigen::Index c = 0; c < 3; ++c) CHECK(std::abs(s.col(c).mean()) <= 1e-15);
  CHECK(s.col(0).squaredNorm() / 4.0 == doctest::Approx(1.0));
  CHECK(s.col(2).isApprox(s.col(0)));
  CHECK(s.col(1).isZero());
}

TEST_CASE("graph teacher on a graph-less dataset is a configuration error") {
  lmbot::testing::TempDir dir("nograph");
  auto ds = small_dataset();
  ds.graph.reset();
  auto cfg = small_config(dir, "nograph");
  CHECK_THROWS_AS(DistillSession(cfg, ds), ConfigError);
  cfg.teacher.kind = TeacherKind::mlp;
  CHECK_NOTHROW(DistillSession(cfg, ds));
}

TEST_CASE("full pipeline on a small planted dataset") {
  lmbot::testing::TempDir dir("pipeline");
  const auto& ds = small_dataset();
  const auto cfg = small_config(dir, "base");
  DistillSession session(cfg, ds);
  const auto result = session.run_pipeline();
  const auto& h = result.history;
  REQUIRE(h.size() >= 3);
  CHECK(h[0].iteration == 0);
  CHECK_FALSE(h[0].teacher.has_value());
  CHECK(result.converged == check_convergence(h, {cfg.min_iterations, 1e-6}));
  CHECK((result.converged || static_cast<int>(h.size()) == cfg.max_iterations + 1));

  // planted homophily: the teacher beats the adapted student it learned from
  REQUIRE(h[1].teacher);
  CHECK(h[1].teacher->valid.accuracy > h[0].student.valid.accuracy);

  for (std::size_t k = 0; k < h.size(); ++k) {
    CAPTURE(k);
    CHECK(h[k].iteration == static_cast<int>(k));
    CHECK(std::filesystem::exists(result.run_dir / h[k].student_checkpoint / "manifest.json"));
    for (double m : {h[k].student.valid.accuracy, h[k].student.valid.f1, h[k].student.test.accuracy, h[k].student.test.f1}) {
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
    }
    if (k == 0) continue;
    CHECK(h[k].student.valid.accuracy >= h[k - 1].student.valid.accuracy);
    CHECK(h[k].soft_label_source == h[k].teacher_id);
    CHECK(h[k].embedding_source == h[k - 1].student_id);
    CHECK(std::filesystem::exists(result.run_dir / h[k].soft_labels));
    const auto teacher = load_teacher(result.run_dir / h[k].teacher_checkpoint);
    CHECK(checkpoint_id(teacher.model->parameters()) == h[k].teacher_id);
    CHECK(teacher.manifest.at("embedding_source") == h[k].embedding_source);
    // every soft-label row was written at the configured temperature
    std::ifstream in(result.run_dir / h[k].soft_labels);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("temperature").get<double>() == cfg.temperature);
      CHECK(j.at("p_human").get<double>() + j.at("p_bot").get<double>() == doctest::Approx(1.0).epsilon(1e-6));
      ++rows;
    }
    CHECK(rows == session.soft_set().size());
  }

  // the persisted log matches what was returned
  check_same_metrics(read_iterations(result.run_dir), h);
  const auto final_json = nlohmann::json::parse(std::ifstream(result.run_dir / "final.json"));
  CHECK(final_json.at("best_student").get<std::string>() ==
        h[static_cast<std::size_t>(result.best_student_iteration)].student_checkpoint);

  // both selected models work for inference, the student without the graph
  const auto student = load_student(result.run_dir / h[static_cast<std::size_t>(result.best_student_iteration)].student_checkpoint);
  std::vector<Probs> probs;
  std::vector<Label> labels;
  for (auto i : session.split().test) {
    probs.push_back(predict(student.model, serialize_user(ds.records[i], student.vocab, student.serialize)));
    labels.push_back(*ds.records[i].label);
  }
  const auto rep = compute_metrics(probs, labels, F1Mode::binary);
  CHECK(rep.accuracy ==
        doctest::Approx(h[static_cast<std::size_t>(result.best_student_iteration)].student.test.accuracy).epsilon(1e-12));

  SUBCASE("identical seeds give identical logs") {
    auto again = cfg;
    again.name = "again";
    DistillSession second(again, ds);
    check_same_metrics(second.run_pipeline().history, h);
  }
  SUBCASE("resuming after an interruption reproduces the uninterrupted run") {
    auto cut = cfg;
    cut.name = "cut";
    {
      DistillSession first(cut, ds);
      const auto partial = first.run_pipeline(false, [](const IterationRecord& r) { return r.iteration < 1; });
      CHECK(partial.history.size() == 2);
      // simulate a crash mid-iteration: a half-written next iteration is ignored
      std::filesystem::create_directories(partial.run_dir / "lm" / "iter_2");
    }
    DistillSession resumed(cut, ds);
    check_same_metrics(resumed.run_pipeline(true).history, h);
  }
  SUBCASE("resume refuses a changed configuration") {
    auto changed = cfg;
    changed.alpha = 0.25;
    DistillSession other(changed, ds);
    CHECK_THROWS_AS(other.run_pipeline(true), ConfigError);
  }
}

TEST_CASE("domain adaptation beats the majority class on planted data") {
  lmbot::testing::TempDir dir("adapt");
  SyntheticConfig s;
  s.n_users = 600;
  const auto ds = generate_synthetic(s, 12);
  DistillSession session(small_config(dir, "adapt"), ds);
  const auto r = session.run_domain_adaptation();
  CHECK(r.iteration == 0);
  CHECK(r.student_epochs == 5);
  CHECK(r.student.valid.accuracy > majority_rate(ds, session.split().valid));
}

TEST_CASE("degenerate iteration leaves the student unchanged") {
  lmbot::testing::TempDir dir("degenerate");
  auto cfg = small_config(dir, "degenerate");
  cfg.alpha = 0.0;
  cfg.teacher.max_epochs = 0;
  cfg.distill_epochs = 0;
  cfg.max_iterations = 2;
  DistillSession session(cfg, small_dataset());
  const auto h = session.run_pipeline().history;
  REQUIRE(h.size() == 3);
  for (std::size_t k = 1; k < h.size(); ++k) {
    CHECK(h[k].student.valid.accuracy == h[k - 1].student.valid.accuracy);
    CHECK(h[k].student.test.accuracy == h[k - 1].student.test.accuracy);
    CHECK(h[k].student_id == h[k - 1].student_id);
    CHECK(h[k].teacher_epochs == 0);
  }
}

TEST_CASE("teacher fitting leaves the student untouched and keeps the best epoch") {
  lmbot::testing::TempDir dir("isolation");
  const auto& ds = small_dataset();
  DistillSession session(small_config(dir, "iso"), ds);
  const auto iter0 = session.run_domain_adaptation();
  auto student = load_student(session.run_dir() / iter0.student_checkpoint);
  const auto before = parameter_hash(student.model.parameters());
  const Matrix raw = embed_all(student.model, session.sequences());
  CHECK(raw.rows() == static_cast<Eigen::Index>(ds.records.size()));
  const Matrix z = teacher_inputs(student.model, session.sequences());
  CHECK(z.isApprox(standardize_columns(raw)));

  LabeledSets sets;
  for (auto i : session.split().train) sets.train.emplace_back(i, *ds.records[i].label);
  for (auto i : session.split().valid) {
    sets.valid.push_back(i);
    sets.valid_labels.push_back(*ds.records[i].label);
  }
  TeacherConfig tc;
  tc.max_epochs = 60;
  tc.patience = 1000;
  Rng rng(1);
  TeacherModel teacher(tc, z.cols(), session.graph()->relation_names, rng);
  const auto fit = fit_teacher(teacher, z, session.graph(), sets, rng);
  CHECK(parameter_hash(student.model.parameters()) == before);
  CHECK(fit.epochs_run == 60);
  const auto probs = teacher_probabilities(teacher, z, session.graph());
  std::vector<Probs> valid_probs;
  for (auto i : sets.valid) valid_probs.push_back(probs[i]);
  CHECK(compute_metrics(valid_probs, sets.valid_labels, F1Mode::binary).accuracy == fit.best_valid_accuracy);

  TeacherConfig none = tc;
  none.max_epochs = 0;
  TeacherModel idle(none, z.cols(), session.graph()->relation_names, rng);
  const auto h0 = parameter_hash(idle.parameters());
  const auto f0 = fit_teacher(idle, z, session.graph(), sets, rng);
  CHECK(f0.best_epoch == 0);
  CHECK(f0.epochs_run == 0);
  CHECK(parameter_hash(idle.parameters()) == h0);
}
