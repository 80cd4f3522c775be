#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "lmbot/config.hpp"
#include "lmbot/error.hpp"
#include "lmbot/experiments.hpp"
#include "lmbot/io.hpp"
#include "support.hpp"

using namespace lmbot;
using lmbot::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result lmbot_run(std::vector<std::string> args) {
  args.insert(args.begin(), "lmbot");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string echoed(const std::string& out) {
  const std::string open = "# resolved config\n", close = "# end config\n";
  const auto b = out.find(open);
  REQUIRE(b != std::string::npos);
  const auto e = out.find(close, b);
  REQUIRE(e != std::string::npos);
  return out.substr(b + open.size(), e - b - open.size());
}

std::string tree_digest(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  std::string s;
  for (const auto& [name, body] : files) s += name + "\n" + body + "\n";
  return s;
}

// iterations.jsonl without the wall-clock field.
std::string history_metrics(const fs::path& file) {
  std::string s;
  for (const auto& line : read_lines(file)) {
    auto j = nlohmann::json::parse(line);
    j.erase("duration_s");
    s += j.dump() + "\n";
  }
  return s;
}

std::string drop_column(const fs::path& csv, std::size_t col) {
  std::string s;
  for (const auto& line : read_lines(csv)) {
    std::istringstream in(line);
    std::size_t i = 0;
    for (std::string cell; std::getline(in, cell, ','); ++i)
      if (i != col) s += cell + ",";
    s += "\n";
  }
  return s;
}

// Small, fast run settings shared by the pipeline tests.
const std::vector<std::string> kFast = {"--set", "gnn.max_epochs=25", "--set", "gnn.hidden=32",
                                        "--set", "lm.finetune_epochs=2", "--set", "distill.max_iterations=2",
                                        "--set", "lm.head_width=32"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void synth(const fs::path& out, int users, int seed = 1, std::vector<std::string> extra = {}) {
  auto r = lmbot_run(with({"synth", "--out", out.string(), "--users", std::to_string(users), "--seed",
                           std::to_string(seed)},
                          extra));
  REQUIRE_MESSAGE(r.code == 0, r.err);
}

}  // namespace

TEST_CASE("config text round trips and rejects unknown keys") {
  RunConfig c;
  c.name = "x";
  c.seed = 17;
  c.data_path = "/tmp/d";
  c.teacher.kind = TeacherKind::attention_gnn;
  c.alpha = 0.25;
  c.temperature = 10;
  c.lm_lr = 3e-3;
  c.soft_set = SoftSet::all;
  c.sections.tweets = false;
  const RunConfig back = parse_config(c.to_toml());
  CHECK(back.to_toml() == c.to_toml());
  CHECK(back.resolved_lm_lr() == 3e-3);
  CHECK(back.teacher.kind == TeacherKind::attention_gnn);

  for (const auto& k : config_keys()) CHECK_MESSAGE(c.to_toml().find(k.key.substr(k.key.find('.') + 1) + " = ") !=
                                                        std::string::npos,
                                                    k.key);

  CHECK_THROWS_AS(parse_config("[gnn]\nhiden = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("kd.alpah = 0.1\n"), ConfigError);
  try {
    parse_config("[kd]\nalpha = 0.5\n\ntemperature = hot\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("[kd\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[kd]\nalpha\n"), ConfigError);
}

TEST_CASE("defaults, overrides and validation") {
  RunConfig c;
  CHECK(c.teacher.lr == 5e-4);
  CHECK(c.lm_dropout == 0.1);
  CHECK(c.teacher.dropout == 0.4);
  CHECK(c.lm_l2 == 1e-2);
  CHECK(c.teacher.lambda2 == 1e-5);
  CHECK(c.teacher.layers == 2);
  CHECK(c.teacher.hidden == 128);
  CHECK(c.temperature == 3);
  CHECK(c.alpha == 0.5);
  CHECK(c.finetune_epochs == 5);
  CHECK(c.resolved_lm_lr() == kDeskLmLr);
  CHECK(default_lm_lr("pretrained") == kPretrainedLmLr);

  apply_overrides(c, {"kd.alpha=0.7", "gnn.kind=mlp", "lm.lr=0.5"});
  CHECK(c.alpha == 0.7);
  CHECK(c.teacher.kind == TeacherKind::mlp);
  CHECK(c.resolved_lm_lr() == 0.5);
  apply_overrides(c, {"lm.lr=auto"});
  CHECK(c.resolved_lm_lr() == kDeskLmLr);
  CHECK_THROWS_AS(apply_overrides(c, {"kd.alpha"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"nope.key=1"}), ConfigError);

  for (const std::string bad : {"kd.alpha=1.5", "kd.temperature=0", "gnn.dropout=1", "lm.dropout=-0.1",
                                "gnn.layers=0", "distill.max_iterations=1", "lm.backend=gpt"}) {
    RunConfig v;
    v.data_path = "x";
    apply_overrides(v, {bad});
    CHECK_THROWS_AS_MESSAGE(v.validate(), ConfigError, bad);
  }
}

TEST_CASE("help lists every flag and the README documents them") {
  auto app = cli::make_app();
  const std::string readme = read_file(fs::path(LMBOT_SOURCE_DIR) / "README.md");
  std::set<std::string> names;
  for (auto* sub : app->get_subcommands({})) {
    CHECK(readme.find("lmbot " + sub->get_name()) != std::string::npos);
    const std::string help = sub->help();
    for (const auto* opt : sub->get_options()) {
      for (const auto& l : opt->get_lnames()) {
        const std::string flag = "--" + l;
        CHECK_MESSAGE(help.find(flag) != std::string::npos, std::string(sub->get_name() + " " + flag));
        if (l == "help") continue;
        CHECK_MESSAGE(!opt->get_description().empty(), std::string(sub->get_name() + " " + flag));
        CHECK_MESSAGE(readme.find("`" + flag) != std::string::npos, std::string(flag + " missing from README"));
        names.insert(flag);
      }
    }
  }
  CHECK(names.count("--skip-adaptation"));
  CHECK(names.count("--consistency"));
  for (const auto& k : config_keys()) CHECK_MESSAGE(readme.find("`" + k.key + "`") != std::string::npos, k.key);

  auto r = lmbot_run({"distill", "--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("--resume") != std::string::npos);
  r = lmbot_run({"--help"});
  CHECK(r.code == 0);
  for (const char* c : {"synth", "distill", "infer", "eval", "sweep", "ablate"}) CHECK(r.out.find(c) != std::string::npos);
}

TEST_CASE("synth is deterministic and echoes its resolved settings") {
  TempDir tmp("cli-synth");
  auto a = lmbot_run({"synth", "--out", (tmp / "a").string(), "--users", "300", "--seed", "1"});
  auto b = lmbot_run({"synth", "--out", (tmp / "b").string(), "--users", "300", "--seed", "1"});
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(tree_digest(tmp / "a") == tree_digest(tmp / "b"));
  CHECK(read_lines(tmp / "a" / "users.jsonl").size() == 300);
  CHECK(echoed(a.out).find("p_in = 0.05\n") != std::string::npos);
  CHECK(echoed(a.out).find("p_out = 0.005\n") != std::string::npos);

  auto c = lmbot_run({"synth", "--out", (tmp / "c").string(), "--users", "300", "--p-in", "0.2"});
  CHECK(echoed(c.out).find("p_out = 0.02\n") != std::string::npos);
  auto d = lmbot_run({"synth", "--out", (tmp / "d").string(), "--users", "300", "--seed", "2"});
  CHECK(tree_digest(tmp / "a") != tree_digest(tmp / "d"));

  const auto schema = nlohmann::json::parse(read_file(tmp / "a" / "schema.json"));
  CHECK(schema.at("metadata_fields") ==
        nlohmann::json::array({"followers_count", "friends_count", "verified", "location"}));
  for (const auto& line : read_lines(tmp / "a" / "users.jsonl")) {
    const auto j = nlohmann::json::parse(line);
    std::vector<std::string> fields;
    for (const auto& f : j.at("metadata")) fields.push_back(f.is_array() ? f[0].get<std::string>() : f["name"].get<std::string>());
    REQUIRE(fields == schema.at("metadata_fields").get<std::vector<std::string>>());
  }
}

TEST_CASE("distill, resume, echo re-run, infer and eval") {
  TempDir tmp("cli-distill");
  synth(tmp / "data", 300, 4);
  const std::string root = (tmp / "runs").string();
  auto r = lmbot_run(with({"distill", "--data", (tmp / "data").string(), "--seed", "3", "--name", "a", "--run-root",
                           root},
                          kFast));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const fs::path run_a = tmp / "runs" / "a";
  CHECK(fs::exists(run_a / "final.json"));
  CHECK(r.out.find("best student") != std::string::npos);
  const auto iters_a = history_metrics(run_a / "iterations.jsonl");

  SUBCASE("the echoed config reproduces the run") {
    std::string cfg = echoed(r.out);
    cfg = std::regex_replace(cfg, std::regex("name = \"a\""), "name = \"b\"");
    std::ofstream(tmp / "echo.toml") << cfg;
    auto again = lmbot_run({"distill", "--config", (tmp / "echo.toml").string()});
    REQUIRE_MESSAGE(again.code == 0, again.err);
    CHECK(history_metrics(tmp / "runs" / "b" / "iterations.jsonl") == iters_a);
    CHECK(echoed(again.out) == cfg);
  }

  SUBCASE("resume of a finished run changes nothing") {
    auto again = lmbot_run(with({"distill", "--data", (tmp / "data").string(), "--seed", "3", "--name", "a",
                                 "--run-root", root, "--resume"},
                                kFast));
    REQUIRE_MESSAGE(again.code == 0, again.err);
    CHECK(history_metrics(run_a / "iterations.jsonl") == iters_a);
  }

  SUBCASE("resume with a different config is rejected") {
    auto bad = lmbot_run(with({"distill", "--data", (tmp / "data").string(), "--seed", "4", "--name", "a",
                               "--run-root", root, "--resume"},
                              kFast));
    CHECK(bad.code == 1);
  }

  SUBCASE("graph-less inference on 20 users") {
    std::vector<std::string> lines = read_lines(tmp / "data" / "users.jsonl");
    fs::create_directories(tmp / "infer");
    std::ofstream users(tmp / "infer" / "users.jsonl");
    std::vector<std::string> ids;
    for (int i = 0; i < 20; ++i) {
      const auto& line = lines[static_cast<std::size_t>(290 - i * 7)];
      users << line << '\n';
      ids.push_back(nlohmann::json::parse(line).at("user_id").get<std::string>());
    }
    users.close();
    // A corrupt graph file beside the users and no dataset directory at all:
    // inference must not touch either.
    std::ofstream(tmp / "infer" / "edges.jsonl") << "{ this is not json\n";
    std::ofstream(tmp / "infer" / "schema.json") << "[[[";
    fs::rename(tmp / "data", tmp / "data_moved");

    const std::string out_csv = (tmp / "infer" / "pred.csv").string();
    auto inf = lmbot_run({"infer", "--checkpoint", run_a.string(), "--users", (tmp / "infer" / "users.jsonl").string(),
                          "--out", out_csv});
    REQUIRE_MESSAGE(inf.code == 0, inf.err);
    CHECK(inf.out.find("read 20 users") != std::string::npos);
    const auto rows = read_lines(out_csv);
    REQUIRE(rows.size() == 21);
    CHECK(rows[0] == "user_id,p_human,p_bot");
    for (std::size_t i = 0; i < 20; ++i) {
      std::istringstream s(rows[i + 1]);
      std::string id, ph, pb;
      std::getline(s, id, ',');
      std::getline(s, ph, ',');
      std::getline(s, pb, ',');
      CHECK(id == ids[i]);
      const double h = std::stod(ph), b = std::stod(pb);
      CHECK(h >= 0);
      CHECK(h <= 1);
      CHECK(b >= 0);
      CHECK(b <= 1);
      CHECK(std::abs(h + b - 1) <= 1e-6);
    }
    fs::rename(tmp / "data_moved", tmp / "data");
  }

  SUBCASE("eval writes metrics and consistency") {
    auto ev = lmbot_run({"eval", "--run", run_a.string(), "--consistency", "--out", (tmp / "eval").string()});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    const auto metrics = read_lines(tmp / "eval" / "metrics.csv");
    REQUIRE(metrics.size() == 5);
    CHECK(metrics[0] == metrics_csv_header().substr(0, metrics_csv_header().size() - 1));
    const auto cons = read_lines(tmp / "eval" / "consistency.csv");
    const auto split = load_split(run_a / split_file_name(3));
    CHECK(cons.size() == split.test.size() + 1);
    CHECK(ev.out.find("agreement") != std::string::npos);
  }
}

TEST_CASE("teacher kinds on a graph-less dataset") {
  TempDir tmp("cli-nograph");
  synth(tmp / "data", 200, 5);
  fs::remove(tmp / "data" / "edges.jsonl");
  auto schema = nlohmann::json::parse(read_file(tmp / "data" / "schema.json"));
  schema.erase("relations");
  std::ofstream(tmp / "data" / "schema.json") << schema.dump(2);

  const std::vector<std::string> base = {"distill", "--data", (tmp / "data").string(), "--run-root",
                                         (tmp / "runs").string()};
  auto fail = lmbot_run(with(with(base, {"--name", "gnn"}), kFast));
  CHECK(fail.code == 1);
  CHECK(fail.err.find("error") != std::string::npos);
  auto ok = lmbot_run(with(with(base, {"--name", "mlp", "--teacher", "mlp"}), kFast));
  CHECK_MESSAGE(ok.code == 0, ok.err);
  CHECK(fs::exists(tmp / "runs" / "mlp" / "final.json"));
}

TEST_CASE("skip-adaptation starts from the untrained student") {
  TempDir tmp("cli-skip");
  synth(tmp / "data", 200, 6);
  auto r = lmbot_run(with({"distill", "--data", (tmp / "data").string(), "--run-root", (tmp / "runs").string(),
                           "--skip-adaptation"},
                          kFast));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(echoed(r.out).find("skip_adaptation = true") != std::string::npos);
  const auto first = nlohmann::json::parse(read_lines(tmp / "runs" / "run" / "iterations.jsonl").front());
  CHECK(first.at("iteration") == 0);
}

TEST_CASE("exit codes") {
  TempDir tmp("cli-exit");
  synth(tmp / "data", 120, 7);
  const std::string data = (tmp / "data").string(), root = (tmp / "runs").string();

  CHECK(lmbot_run({"--help"}).code == 0);
  CHECK(lmbot_run({}).code == 1);
  CHECK(lmbot_run({"distill", "--bogus"}).code == 1);
  CHECK(lmbot_run({"frobnicate"}).code == 1);
  CHECK(lmbot_run({"distill", "--data", data, "--set", "gnn.hiden=3"}).code == 1);
  CHECK(lmbot_run({"distill", "--run-root", root}).code == 1);

  std::ofstream(tmp / "bad.toml") << "[kd]\nalpah = 0.5\n";
  auto bad = lmbot_run({"distill", "--config", (tmp / "bad.toml").string(), "--data", data});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("line 2") != std::string::npos);

  std::ofstream(tmp / "users.jsonl") << read_lines(tmp / "data" / "users.jsonl").front() << '\n';
  auto missing = lmbot_run({"infer", "--checkpoint", (tmp / "nowhere").string(), "--users",
                            (tmp / "users.jsonl").string(), "--out", (tmp / "p.csv").string()});
  CHECK(missing.code == 1);
  CHECK_FALSE(fs::exists(tmp / "p.csv"));

  CHECK(lmbot_run({"distill", "--data", (tmp / "no-such-dir").string(), "--run-root", root}).code == 2);
  fs::copy(tmp / "data", tmp / "broken", fs::copy_options::recursive);
  std::ofstream(tmp / "broken" / "users.jsonl", std::ios::app) << "{ broken\n";
  CHECK(lmbot_run({"distill", "--data", (tmp / "broken").string(), "--run-root", root}).code == 2);

  auto diverge = lmbot_run(with({"distill", "--data", data, "--run-root", root, "--name", "huge", "--set",
                                 "lm.lr=1e300"},
                                kFast));
  CHECK_MESSAGE(diverge.code == 3, std::string(diverge.out + diverge.err));

  CHECK(lmbot_run({"ablate", "--data", data, "--run-root", root}).code == 1);
  CHECK(lmbot_run({"ablate", "--data", data, "--run-root", root, "--setting", "no_pizza"}).code == 1);
  CHECK(lmbot_run({"sweep", "--data", data, "--run-root", root, "--axis", "nodes"}).code == 1);
  CHECK(lmbot_run({"sweep", "--data", data, "--run-root", root, "--grid", "0:1:0.5"}).code == 1);
}

TEST_CASE("the installed executable reports the same exit codes") {
  TempDir tmp("cli-exe");
  const std::string exe = LMBOT_EXE;
  auto status = [&](const std::string& args) {
    const int s = std::system((exe + " " + args + " >" + (tmp / "o.txt").string() + " 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  CHECK(status("--help") == 0);
  CHECK(status("distill --bogus") == 1);
  CHECK(status("distill --data " + (tmp / "missing").string() + " --run-root " + (tmp / "r").string()) == 2);
  CHECK(status("synth --out " + (tmp / "d").string() + " --users 50") == 0);
  CHECK(fs::exists(tmp / "d" / "users.jsonl"));
}

TEST_CASE("sweep and ablate wrappers") {
  TempDir tmp("cli-exp");
  synth(tmp / "data", 200, 8);
  const std::vector<std::string> base = {"--data", (tmp / "data").string(), "--run-root", (tmp / "runs").string()};

  auto sw = lmbot_run(with(with(with({"sweep"}, base), {"--name", "sw", "--axis", "edges", "--grid", "0.5,1.0"}), kFast));
  REQUIRE_MESSAGE(sw.code == 0, sw.err);
  const auto rows = read_lines(tmp / "runs" / "sw" / "sweep_edges.csv");
  REQUIRE(rows.size() == 9);
  const auto cols = std::count(rows[0].begin(), rows[0].end(), ',');
  for (const auto& row : rows) CHECK(std::count(row.begin(), row.end(), ',') == cols);

  // The echoed sweep config, [sweep] section included, re-runs unchanged.
  std::string cfg = echoed(sw.out);
  CHECK(cfg.find("[sweep]\naxis = \"edges\"\ngrid = \"0.5,1.0\"") != std::string::npos);
  cfg = std::regex_replace(cfg, std::regex("name = \"sw\""), "name = \"sw2\"");
  std::ofstream(tmp / "sweep.toml") << cfg;
  auto again = lmbot_run({"sweep", "--config", (tmp / "sweep.toml").string()});
  REQUIRE_MESSAGE(again.code == 0, again.err);
  CHECK(drop_column(tmp / "runs" / "sw2" / "sweep_edges.csv", 2) == drop_column(tmp / "runs" / "sw" / "sweep_edges.csv", 2));

  auto ab = lmbot_run(with(with(with({"ablate"}, base), {"--name", "ab", "--setting", "no_metadata"}), kFast));
  REQUIRE_MESSAGE(ab.code == 0, ab.err);
  const auto ab_rows = read_lines(tmp / "runs" / "ab" / "ablation.csv");
  REQUIRE(ab_rows.size() == 3);
  CHECK(ab_rows[0] == "setting,model,run,seed,split,accuracy,f1,tp,fp,tn,fn");
  CHECK(ab_rows[1].rfind("no_metadata,", 0) == 0);
  CHECK(echoed(ab.out).find("[ablate]\nsetting = \"no_metadata\"") != std::string::npos);
}
