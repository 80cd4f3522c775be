#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "lmbot/error.hpp"
#include "lmbot/experiments.hpp"
#include "lmbot/io.hpp"
#include "support.hpp"

using namespace lmbot;

namespace {

Probs bot(double p) { return {1.0 - p, p}; }

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

RunConfig small_config(const lmbot::testing::TempDir& dir, const std::string& name) {
  RunConfig cfg;
  cfg.name = name;
  cfg.root = dir.path().string();
  cfg.seed = 5;
  cfg.teacher.max_epochs = 120;
  cfg.max_iterations = 3;
  return cfg;
}

const Dataset& planted() {
  static const Dataset ds = [] {
    SyntheticConfig s;
    s.n_users = 500;
    s.signal_rate = 0.1;
    return generate_synthetic(s, 21);
  }();
  return ds;
}

double majority_rate(const Dataset& ds, const std::vector<std::size_t>& nodes) {
  std::size_t bots = 0;
  for (auto i : nodes) bots += ds.records[i].label == Label::bot;
  const double p = static_cast<double>(bots) / static_cast<double>(nodes.size());
  return std::max(p, 1.0 - p);
}

// Checks one CSV metrics block (accuracy, f1, tp, fp, tn, fn starting at
// column `at`) against a recomputed report.
void check_row(const std::vector<std::string>& row, std::size_t at, const MetricReport& m) {
  CHECK(std::stod(row.at(at)) == m.accuracy);
  CHECK(std::stod(row.at(at + 1)) == m.f1);
  CHECK(std::stoul(row.at(at + 2)) == m.tp);
  CHECK(std::stoul(row.at(at + 3)) == m.fp);
  CHECK(std::stoul(row.at(at + 4)) == m.tn);
  CHECK(std::stoul(row.at(at + 5)) == m.fn);
}

const MetricReport& pick(const RunEvaluation& ev, const std::string& model, const std::string& split) {
  REQUIRE((model == "lm" || ev.teacher_metrics.has_value()));
  const ModelMetrics& m = model == "lm" ? ev.student_metrics : *ev.teacher_metrics;
  return split == "valid" ? m.valid : m.test;
}

}  // namespace

TEST_CASE("metric examples") {
  const std::vector<Label> labels{Label::bot, Label::human, Label::bot, Label::human};
  const std::vector<Probs> perfect{bot(0.9), bot(0.1), bot(0.6), bot(0.2)};
  auto m = compute_metrics(perfect, labels, F1Mode::binary);
  CHECK(m.accuracy == 1.0);
  CHECK(m.f1 == 1.0);
  CHECK(m.n == 4);

  const std::vector<Label> bots(5, Label::bot);
  const std::vector<Probs> humans(5, bot(0.2));
  m = compute_metrics(humans, bots, F1Mode::binary);
  CHECK(m.accuracy == 0.0);
  CHECK(m.f1 == 0.0);
  CHECK(m.fn == 5);

  // threshold: exactly 0.5 counts as bot
  m = compute_metrics(std::vector<Probs>{bot(0.5)}, std::vector<Label>{Label::bot}, F1Mode::binary);
  CHECK(m.tp == 1);

  // macro averages the two one-vs-rest scores
  const std::vector<Probs> mixed{bot(0.9), bot(0.9), bot(0.1), bot(0.1)};
  const std::vector<Label> truth{Label::bot, Label::human, Label::human, Label::human};
  const auto b = compute_metrics(mixed, truth, F1Mode::binary);
  const auto mac = compute_metrics(mixed, truth, F1Mode::macro);
  CHECK(b.f1 == doctest::Approx(2.0 / 3.0));
  CHECK(mac.f1 == doctest::Approx((2.0 / 3.0 + 0.8) / 2.0));
  CHECK(mac.accuracy == b.accuracy);

  CHECK_THROWS_AS(compute_metrics(std::vector<Probs>{}, std::vector<Label>{}, F1Mode::binary), Error);
  CHECK_THROWS_AS(compute_metrics(perfect, bots, F1Mode::binary), Error);
}

TEST_CASE("metrics equal a brute-force recount") {
  Rng rng(1);
  std::uniform_int_distribution<int> len(1, 60);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int set = 0; set < 1000; ++set) {
    const int n = len(rng);
    std::vector<Probs> p;
    std::vector<Label> y;
    for (int i = 0; i < n; ++i) {
      const double q = u(rng) < 0.05 ? 0.5 : u(rng);
      p.push_back(bot(q));
      y.push_back(u(rng) < 0.5 ? Label::bot : Label::human);
    }
    std::size_t c[2][2] = {{0, 0}, {0, 0}};  // [truth][predicted]
    for (int i = 0; i < n; ++i) ++c[y[i] == Label::bot][p[i][1] >= 0.5];
    const std::size_t tp = c[1][1], fp = c[0][1], tn = c[0][0], fn = c[1][0];
    const auto m = compute_metrics(p, y, F1Mode::binary);
    REQUIRE(m.tp == tp);
    REQUIRE(m.fp == fp);
    REQUIRE(m.tn == tn);
    REQUIRE(m.fn == fn);
    REQUIRE(m.tp + m.fp + m.tn + m.fn == m.n);
    REQUIRE(m.accuracy == static_cast<double>(tp + tn) / n);
    REQUIRE(m.f1 == (2 * tp + fp + fn == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn)));
  }
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto ms = mean_std(v);
  CHECK(ms.mean == 2.5);
  CHECK(ms.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  const std::vector<double> one{7.0};
  CHECK(mean_std(one).std == 0.0);
}

TEST_CASE("consistency analysis") {
  const std::vector<Probs> s{bot(0.6), bot(0.4)}, t{bot(0.7), bot(0.3)};
  const auto r = consistency_analysis(s, t);
  CHECK(r.agreement_rate == 1.0);
  CHECK(r.quadrants[1][1] == 1);
  CHECK(r.quadrants[0][0] == 1);
  CHECK(r.points.size() == 2);
  CHECK(r.points[0].first == doctest::Approx(0.6));
  CHECK(r.points[0].second == doctest::Approx(0.7));
  CHECK(consistency_analysis(s, s).agreement_rate == 1.0);

  // 0.5 sits on the bot side
  const std::vector<Probs> half{bot(0.5)}, high{bot(0.9)}, low{bot(0.1)};
  CHECK(consistency_analysis(half, high).agreement_rate == 1.0);
  CHECK(consistency_analysis(half, low).agreement_rate == 0.0);
  CHECK(consistency_analysis(half, low).quadrants[1][0] == 1);
  CHECK_THROWS_AS(consistency_analysis(s, half), Error);

  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int set = 0; set < 200; ++set) {
    std::vector<Probs> a, b;
    for (int i = 0; i < 30; ++i) {
      a.push_back(bot(u(rng)));
      b.push_back(bot(u(rng)));
    }
    CHECK(consistency_analysis(a, b).agreement_rate == consistency_analysis(b, a).agreement_rate);
  }
}

TEST_CASE("sweep grids") {
  const auto g = parse_grid("0.1:1.0:0.1");
  REQUIRE(g.size() == 10);
  CHECK(g.front() == 0.1);
  CHECK(g.back() == 1.0);
  CHECK(g[2] == 0.3);
  CHECK(parse_grid("1.0") == std::vector<double>{1.0});
  CHECK(parse_grid("0.25,0.5") == std::vector<double>{0.25, 0.5});
  CHECK_THROWS_AS(parse_grid("0:1:0.5"), ConfigError);
  CHECK_THROWS_AS(parse_grid("0.5,1.5"), ConfigError);
  CHECK_THROWS_AS(parse_grid("0.1:1.0"), ConfigError);
  CHECK_THROWS_AS(parse_grid(""), ConfigError);
  CHECK_THROWS_AS(parse_grid("abc"), ConfigError);
  CHECK(parse_sweep_axis("edges") == SweepAxis::edges);
  CHECK_THROWS_AS(parse_sweep_axis("nodes"), ConfigError);
}

TEST_CASE("identity sweep reproduces the untrimmed run and every CSV row is auditable") {
  lmbot::testing::TempDir dir("sweep");
  const auto& ds = planted();
  const auto cfg = small_config(dir, "base");
  DistillSession plain(cfg, ds);
  const auto baseline = summarize(plain.run_pipeline(), cfg);

  for (auto axis : {SweepAxis::labels, SweepAxis::edges}) {
    CAPTURE(to_string(axis));
    const auto rows = data_efficiency_sweep(ds, cfg, axis, {1.0});
    REQUIRE(rows.size() == 1);
    const auto& s = rows[0].summary;
    CHECK(s.student.valid.accuracy == baseline.student.valid.accuracy);
    CHECK(s.student.test.accuracy == baseline.student.test.accuracy);
    CHECK(s.student.test.f1 == baseline.student.test.f1);
    REQUIRE(s.teacher);
    CHECK(s.teacher->test.accuracy == baseline.teacher->test.accuracy);
    CHECK(s.iterations == baseline.iterations);
  }

  const auto rows = data_efficiency_sweep(ds, cfg, SweepAxis::edges, {0.2});
  CHECK(rows[0].summary.run == "base-edges-0.20");
  for (const char* axis : {"labels", "edges"}) {
    const auto csv = read_csv(read_file(cfg.run_dir() / (std::string("sweep_") + axis + ".csv")));
    REQUIRE(csv.size() >= 3);
    CHECK(csv[0] == std::vector<std::string>{"axis", "fraction", "run", "seed", "model", "split", "accuracy", "f1", "tp",
                                             "fp", "tn", "fn"});
    std::map<std::string, RunEvaluation> evals;
    for (std::size_t i = 1; i < csv.size(); ++i) {
      const auto& row = csv[i];
      CAPTURE(row[2]);
      if (!evals.count(row[2])) evals.emplace(row[2], evaluate_run(dir.path() / row[2], &ds));
      CHECK(row[3] == std::to_string(cfg.seed));
      check_row(row, 6, pick(evals.at(row[2]), row[4], row[5]));
    }
  }
}

TEST_CASE("ablations") {
  lmbot::testing::TempDir dir("ablate");
  const auto& ds = planted();
  const auto cfg = small_config(dir, "abl");

  const auto no_teacher = run_ablation(ds, cfg, AblationSetting::no_teacher);
  CHECK(no_teacher.model == "lm");
  {
    auto again = cfg;
    again.name = "adapt-only";
    DistillSession session(again, ds);
    const auto r0 = session.run_domain_adaptation();
    CHECK(no_teacher.metrics.valid.accuracy == r0.student.valid.accuracy);
    CHECK(no_teacher.metrics.test.accuracy == r0.student.test.accuracy);
    CHECK(no_teacher.metrics.test.f1 == r0.student.test.f1);
  }

  const auto no_student = run_ablation(ds, cfg, AblationSetting::no_student);
  CHECK(no_student.model == "teacher");
  const auto as_mlp = run_ablation(ds, cfg, AblationSetting::teacher_as_mlp);
  CHECK(load_config(as_mlp.run_dir / "config.toml").teacher.kind == TeacherKind::mlp);

  std::vector<AblationResult> results{no_teacher, no_student, as_mlp};
  const auto csv = read_csv(ablation_csv(results, cfg));
  REQUIRE(csv.size() == 7);
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const auto& row = csv[i];
    CAPTURE(row[2]);
    const auto ev = evaluate_run(dir.path() / row[2], &ds);
    check_row(row, 5, pick(ev, row[1], row[4]));
  }

  auto textless = ds;
  for (auto& r : textless.records) r.tweets.clear();
  CHECK_THROWS_AS(run_ablation(textless, cfg, AblationSetting::no_tweets), ConfigError);
  auto graphless = ds;
  graphless.graph.reset();
  CHECK_THROWS_AS(run_ablation(graphless, cfg, AblationSetting::teacher_as_mlp), ConfigError);
  CHECK(parse_ablation_setting("no_metadata") == AblationSetting::no_metadata);
  CHECK(all_ablation_settings().size() == 6);
}

TEST_CASE("dropping metadata on a metadata-only dataset leaves chance accuracy") {
  lmbot::testing::TempDir dir("nometa");
  SyntheticConfig s;
  s.n_users = 2000;
  s.description_tokens = 0;
  s.tweets_per_user = 0;
  const auto ds = generate_synthetic(s, 22);
  const auto cfg = small_config(dir, "meta");
  const auto r = run_ablation(ds, cfg, AblationSetting::no_metadata);
  const auto split = load_split(r.run_dir / split_file_name(cfg.seed));
  CHECK(r.metrics.test.accuracy <= majority_rate(ds, split.test) + 0.05);

  // with metadata the same data is learnable
  DistillSession full(cfg, ds);
  const auto summary = summarize(full.run_pipeline(), cfg);
  CHECK(summary.student.test.accuracy > majority_rate(ds, split.test) + 0.05);
}

TEST_CASE("consistency and metrics CSV") {
  lmbot::testing::TempDir dir("ccsv");
  const auto& ds = planted();
  const auto cfg = small_config(dir, "cons");
  DistillSession session(cfg, ds);
  session.run_pipeline();
  const auto ev = evaluate_run(session.run_dir(), &ds);
  REQUIRE(ev.teacher.size() == ds.records.size());
  const auto csv = read_csv(consistency_csv(ev, ds, ev.split.test));
  REQUIRE(csv.size() == ev.split.test.size() + 1);
  CHECK(csv[0] == std::vector<std::string>{"p_student", "p_teacher", "label"});
  for (std::size_t k = 0; k < ev.split.test.size(); ++k) {
    const auto i = ev.split.test[k];
    CHECK(std::stod(csv[k + 1][0]) == ev.student[i][1]);
    CHECK(std::stod(csv[k + 1][1]) == ev.teacher[i][1]);
    CHECK(csv[k + 1][2] == to_string(*ds.records[i].label));
  }
  CHECK(metrics_csv_header() == "run,seed,split,accuracy,f1,tp,fp,tn,fn\n");
  const auto row = read_csv(metrics_csv_row("cons", 5, "test", ev.student_metrics.test))[0];
  check_row(row, 3, ev.student_metrics.test);
}
