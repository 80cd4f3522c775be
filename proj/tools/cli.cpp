#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lmbot/config.hpp"
#include "lmbot/corpus.hpp"
#include "lmbot/distill.hpp"
#include "lmbot/error.hpp"
#include "lmbot/experiments.hpp"
#include "lmbot/io.hpp"

namespace lmbot::cli {

namespace fs = std::filesystem;

namespace {

struct RunFlags {
  std::string config;
  std::vector<std::string> set;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::string name;
  std::string run_root;
  std::string teacher;
  std::string backend;
  bool skip_adaptation = false;
};

struct Options {
  // synth
  std::string synth_out;
  SyntheticConfig synth;
  std::uint64_t synth_seed = 0;
  std::optional<double> synth_p_out;
  bool no_metadata_signal = false, no_description_signal = false, no_tweet_signal = false;
  // shared run flags
  RunFlags run;
  bool resume = false;
  // infer
  std::string checkpoint, users, predictions = "predictions.csv";
  // eval
  std::vector<std::string> eval_runs;
  bool consistency = false;
  std::string eval_out;
  // sweep
  std::optional<std::string> axis, grid;
  // ablate
  std::optional<std::string> setting;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "config file (TOML-style key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.set, "override one config key, KEY=VALUE (repeatable)");
  cmd->add_option("--data", f.data, "dataset directory (data.path)");
  cmd->add_option("--seed", f.seed, "master seed (run.seed)");
  cmd->add_option("--name", f.name, "run name (run.name)");
  cmd->add_option("--run-root", f.run_root, "run root directory (run.root)");
  cmd->add_option("--teacher", f.teacher, "teacher kind (gnn.kind)");
  cmd->add_option("--backend", f.backend, "student encoder backend (lm.backend)");
  cmd->add_flag("--skip-adaptation", f.skip_adaptation, "skip domain-adaptation finetuning");
}

std::unique_ptr<CLI::App> build(Options& o) {
  auto app = std::make_unique<CLI::App>("LMBot: graph-to-text distillation for bot detection", "lmbot");
  app->require_subcommand(1);

  auto* synth = app->add_subcommand("synth", "write a synthetic planted-partition dataset");
  synth->add_option("--out", o.synth_out, "output dataset directory")->required();
  synth->add_option("--users", o.synth.n_users, "number of users")->capture_default_str();
  synth->add_option("--seed", o.synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--bot-prior", o.synth.bot_prior, "fraction of bots")->capture_default_str();
  synth->add_option("--vocab", o.synth.vocab_size, "synthetic word vocabulary size")->capture_default_str();
  synth->add_option("--indicative", o.synth.indicative_per_class, "indicative tokens per class")->capture_default_str();
  synth->add_option("--signal-rate", o.synth.signal_rate, "chance a text token is class-indicative")
      ->capture_default_str();
  synth->add_option("--description-tokens", o.synth.description_tokens, "tokens per description")
      ->capture_default_str();
  synth->add_option("--tweets", o.synth.tweets_per_user, "tweets per user")->capture_default_str();
  synth->add_option("--tweet-tokens", o.synth.tweet_tokens, "tokens per tweet")->capture_default_str();
  synth->add_option("--markup-rate", o.synth.markup_rate, "rate of hashtags, mentions and URLs")
      ->capture_default_str();
  synth->add_option("--relations", o.synth.relations, "number of relation types")->capture_default_str();
  synth->add_option("--p-in", o.synth.p_in, "edge probability inside a class")->capture_default_str();
  synth->add_option("--p-out", o.synth_p_out, "edge probability across classes (default p-in/10)");
  synth->add_flag("--no-metadata-signal", o.no_metadata_signal, "metadata carries no class signal");
  synth->add_flag("--no-description-signal", o.no_description_signal, "descriptions carry no class signal");
  synth->add_flag("--no-tweet-signal", o.no_tweet_signal, "tweets carry no class signal");

  auto* distill = app->add_subcommand("distill", "run domain adaptation and the distillation iterations");
  add_run_flags(distill, o.run);
  distill->add_flag("--resume", o.resume, "continue an interrupted run from its run directory");

  auto* infer = app->add_subcommand("infer", "graph-less prediction with a student checkpoint");
  infer->add_option("--checkpoint", o.checkpoint, "student checkpoint directory or finished run directory")
      ->required();
  infer->add_option("--users", o.users, "users.jsonl to classify")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", o.predictions, "predictions CSV (user_id,p_human,p_bot)")->capture_default_str();

  auto* eval = app->add_subcommand("eval", "metrics of finished runs");
  eval->add_option("--run", o.eval_runs, "finished run directory (repeatable)")->required();
  eval->add_flag("--consistency", o.consistency, "also write consistency.csv for the test users");
  eval->add_option("--out", o.eval_out, "output directory (default: the first run directory)");

  auto* sweep = app->add_subcommand("sweep", "data-efficiency sweep over label or edge fractions");
  add_run_flags(sweep, o.run);
  sweep->add_option("--axis", o.axis, "labels or edges (default labels)");
  sweep->add_option("--grid", o.grid, "fractions, start:stop:step or a comma list (default 0.1:1.0:0.1)");

  auto* ablate = app->add_subcommand("ablate", "ablation runs");
  add_run_flags(ablate, o.run);
  ablate->add_option("--setting", o.setting,
                     "no_teacher, no_student, teacher_as_mlp, no_metadata, no_tweets, no_description or all");
  return app;
}

using Section = std::map<std::string, std::string>;

std::string unquote(std::string v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  return v;
}

// Splits a config file into the run config text and the [sweep] / [ablate]
// sections that commands echo after it; `command` receives the named one.
std::string split_command_sections(const std::string& text, const std::string& name, Section* command) {
  static const std::set<std::string> sections = {"synth", "infer", "sweep", "ablate"};
  std::istringstream in(text);
  std::string line, current, run_text;
  while (std::getline(in, line)) {
    std::string t = line;
    t.erase(0, t.find_first_not_of(" \t"));
    if (!t.empty() && t.front() == '[') {
      const auto close = t.find(']');
      current = close == std::string::npos ? t : t.substr(1, close - 1);
    }
    if (!sections.count(current)) {
      run_text += line + '\n';
      continue;
    }
    const auto eq = t.find('=');
    if (command && current == name && eq != std::string::npos && t.front() != '#') {
      auto key = t.substr(0, eq), value = t.substr(eq + 1);
      key.erase(key.find_last_not_of(" \t") + 1);
      value.erase(0, value.find_first_not_of(" \t"));
      value.erase(value.find_last_not_of(" \t\r") + 1);
      (*command)[key] = unquote(value);
    }
  }
  return run_text;
}

RunConfig resolve_config(const RunFlags& f, const std::string& command = {}, Section* section = nullptr) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = parse_config(split_command_sections(read_file(f.config), command, section));
  if (!f.data.empty()) cfg.data_path = f.data;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.name.empty()) cfg.name = f.name;
  if (!f.run_root.empty()) cfg.root = f.run_root;
  if (!f.teacher.empty()) cfg.teacher.kind = parse_teacher_kind(f.teacher);
  if (!f.backend.empty()) cfg.backend = f.backend;
  if (f.skip_adaptation) cfg.skip_adaptation = true;
  apply_overrides(cfg, f.set);
  if (cfg.data_path.empty()) throw ConfigError("no dataset given; pass --data or set data.path");
  cfg.data_path = fs::absolute(cfg.data_path).lexically_normal().string();
  if (cfg.root.empty()) cfg.root = cfg.run_root().string();
  cfg.validate();
  return cfg;
}

void echo(std::ostream& out, const std::string& text) {
  out << "# resolved config\n" << text << "# end config\n";
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

int cmd_synth(Options& o, std::ostream& out) {
  auto cfg = o.synth;
  cfg.p_out = o.synth_p_out.value_or(cfg.p_in / 10.0);
  cfg.metadata_signal = !o.no_metadata_signal;
  cfg.description_signal = !o.no_description_signal;
  cfg.tweet_signal = !o.no_tweet_signal;
  std::ostringstream c;
  c << "[synth]\nout = \"" << o.synth_out << "\"\nseed = " << o.synth_seed << "\nusers = " << cfg.n_users
    << "\nbot_prior = " << cfg.bot_prior << "\nvocab = " << cfg.vocab_size << "\nindicative = "
    << cfg.indicative_per_class << "\nsignal_rate = " << cfg.signal_rate << "\ndescription_tokens = "
    << cfg.description_tokens << "\ntweets = " << cfg.tweets_per_user << "\ntweet_tokens = " << cfg.tweet_tokens
    << "\nmarkup_rate = " << cfg.markup_rate << "\nrelations = " << cfg.relations << "\np_in = " << cfg.p_in
    << "\np_out = " << *cfg.p_out << "\nmetadata_signal = " << std::boolalpha << cfg.metadata_signal
    << "\ndescription_signal = " << cfg.description_signal << "\ntweet_signal = " << cfg.tweet_signal << '\n';
  echo(out, c.str());
  const auto ds = generate_synthetic(cfg, o.synth_seed);
  save_dataset(ds, o.synth_out);
  std::size_t bots = 0;
  for (const auto& r : ds.records) bots += r.label == Label::bot;
  out << "wrote " << ds.records.size() << " users (" << bots << " bots), "
      << (ds.graph ? ds.graph->num_edges() : 0) << " edges to " << o.synth_out << '\n';
  return 0;
}

int cmd_distill(Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o.run);
  echo(out, cfg.to_toml());
  const Dataset ds = load_dataset(cfg.data_path);
  DistillSession session(cfg, ds, std::nullopt, &out);
  const auto result = session.run_pipeline(o.resume);
  const auto& best = result.history[static_cast<std::size_t>(result.best_student_iteration)];
  out << (result.converged ? "converged" : "stopped at distill.max_iterations") << " after "
      << result.history.back().iteration << " iterations\n";
  out << "best student: " << best.student_checkpoint << " test accuracy " << fmt(best.student.test.accuracy)
      << " f1 " << fmt(best.student.test.f1) << '\n';
  if (result.best_teacher_iteration >= 0) {
    const auto& t = result.history[static_cast<std::size_t>(result.best_teacher_iteration)];
    out << "best teacher: " << t.teacher_checkpoint << " test accuracy " << fmt(t.teacher->test.accuracy) << " f1 "
        << fmt(t.teacher->test.f1) << '\n';
  }
  out << "run directory: " << session.run_dir().string() << '\n';
  return 0;
}

int cmd_infer(Options& o, std::ostream& out) {
  fs::path dir = o.checkpoint;
  if (fs::exists(dir / "final.json")) {
    const auto fin = nlohmann::json::parse(read_file(dir / "final.json"));
    dir /= fin.at("best_student").get<std::string>();
  }
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("no student checkpoint at " + o.checkpoint);
  echo(out, "[infer]\ncheckpoint = \"" + dir.string() + "\"\nusers = \"" + o.users + "\"\nout = \"" +
                o.predictions + "\"\n");
  const auto ckpt = load_student(dir);
  const auto users = load_users(o.users);
  std::ostringstream csv;
  csv << std::setprecision(17) << "user_id,p_human,p_bot\n";
  for (const auto& u : users) {
    const auto p = predict(ckpt.model, serialize_user(u, ckpt.vocab, ckpt.serialize));
    csv << u.user_id << ',' << p[0] << ',' << p[1] << '\n';
  }
  write_file_atomic(o.predictions, csv.str());
  out << "read " << users.size() << " users, wrote " << users.size() << " predictions to " << o.predictions << '\n';
  return 0;
}

int cmd_eval(Options& o, std::ostream& out) {
  const fs::path out_dir = o.eval_out.empty() ? fs::path(o.eval_runs.front()) : fs::path(o.eval_out);
  fs::create_directories(out_dir);
  std::string metrics = metrics_csv_header();
  std::string consistency;
  std::map<std::string, std::vector<double>> acc, f1;
  std::map<std::string, Dataset> datasets;
  for (const auto& run : o.eval_runs) {
    const RunConfig cfg = load_config(fs::path(run) / "config.toml");
    echo(out, cfg.to_toml());
    if (!datasets.count(cfg.data_path)) datasets.emplace(cfg.data_path, load_dataset(cfg.data_path));
    const Dataset& ds = datasets.at(cfg.data_path);
    const auto ev = evaluate_run(run, &ds);
    auto add = [&](const std::string& model, const ModelMetrics& m) {
      metrics += metrics_csv_row(cfg.name + "-" + model, cfg.seed, "valid", m.valid);
      metrics += metrics_csv_row(cfg.name + "-" + model, cfg.seed, "test", m.test);
      acc[model].push_back(m.test.accuracy);
      f1[model].push_back(m.test.f1);
      out << cfg.name << " " << model << " test accuracy " << fmt(m.test.accuracy) << " f1 " << fmt(m.test.f1)
          << '\n';
    };
    add("lm", ev.student_metrics);
    if (ev.teacher_metrics) add("teacher", *ev.teacher_metrics);
    if (o.consistency) {
      if (!ev.teacher_metrics) throw ConfigError("--consistency needs a run with a teacher");
      std::vector<Probs> s, t;
      for (auto i : ev.split.test) {
        s.push_back(ev.student[i]);
        t.push_back(ev.teacher[i]);
      }
      const auto rep = consistency_analysis(s, t);
      out << cfg.name << " student-teacher agreement on test users " << fmt(rep.agreement_rate) << '\n';
      auto body = consistency_csv(ev, ds, ev.split.test);
      if (!consistency.empty()) body.erase(0, body.find('\n') + 1);
      consistency += body;
    }
  }
  for (const auto& [model, values] : acc) {
    const auto a = mean_std(values);
    const auto f = mean_std(f1.at(model));
    out << model << " over " << values.size() << " runs: accuracy " << fmt(a.mean) << " +- " << fmt(a.std) << ", f1 "
        << fmt(f.mean) << " +- " << fmt(f.std) << '\n';
  }
  write_file_atomic(out_dir / "metrics.csv", metrics);
  out << "wrote " << (out_dir / "metrics.csv").string() << '\n';
  if (o.consistency) {
    write_file_atomic(out_dir / "consistency.csv", consistency);
    out << "wrote " << (out_dir / "consistency.csv").string() << '\n';
  }
  return 0;
}

int cmd_sweep(Options& o, std::ostream& out) {
  Section section;
  const RunConfig cfg = resolve_config(o.run, "sweep", &section);
  const std::string axis_text = o.axis.value_or(section.count("axis") ? section.at("axis") : "labels");
  const std::string grid_text = o.grid.value_or(section.count("grid") ? section.at("grid") : "0.1:1.0:0.1");
  const auto axis = parse_sweep_axis(axis_text);
  const auto grid = parse_grid(grid_text);
  echo(out, cfg.to_toml() + "\n[sweep]\naxis = \"" + axis_text + "\"\ngrid = \"" + grid_text + "\"\n");
  const Dataset ds = load_dataset(cfg.data_path);
  const auto rows = data_efficiency_sweep(ds, cfg, axis, grid, &out);
  for (const auto& r : rows) {
    out << to_string(axis) << " " << fmt(r.fraction, 2) << ": lm test " << fmt(r.summary.student.test.accuracy);
    if (r.summary.teacher) out << ", teacher test " << fmt(r.summary.teacher->test.accuracy);
    out << '\n';
  }
  out << "wrote " << (cfg.run_dir() / ("sweep_" + to_string(axis) + ".csv")).string() << '\n';
  return 0;
}

int cmd_ablate(Options& o, std::ostream& out) {
  Section section;
  const RunConfig cfg = resolve_config(o.run, "ablate", &section);
  if (!o.setting && !section.count("setting")) throw ConfigError("ablate needs --setting");
  const std::string setting = o.setting.value_or(section["setting"]);
  std::vector<AblationSetting> settings;
  if (setting == "all") settings = all_ablation_settings();
  else settings.push_back(parse_ablation_setting(setting));
  echo(out, cfg.to_toml() + "\n[ablate]\nsetting = \"" + setting + "\"\n");
  const Dataset ds = load_dataset(cfg.data_path);
  std::vector<AblationResult> results;
  for (auto s : settings) {
    if (setting == "all") {
      if ((s == AblationSetting::no_tweets && !ds.has_tweets()) ||
          (s == AblationSetting::no_description && !ds.has_descriptions()) ||
          (s == AblationSetting::teacher_as_mlp && !ds.graph))
        continue;
    }
    out << "== " << to_string(s) << '\n';
    const auto& r = results.emplace_back(run_ablation(ds, cfg, s, &out));
    out << to_string(s) << " (" << r.model << "): test accuracy " << fmt(r.metrics.test.accuracy) << " f1 "
        << fmt(r.metrics.test.f1) << '\n';
  }
  const std::string csv = ablation_csv(results, cfg);
  fs::create_directories(cfg.run_dir());
  write_file_atomic(cfg.run_dir() / "ablation.csv", csv);
  out << "wrote " << (cfg.run_dir() / "ablation.csv").string() << '\n';
  return 0;
}

}  // namespace

std::unique_ptr<CLI::App> make_app() {
  static Options scratch;
  return build(scratch);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  auto app = build(o);
  try {
    app->parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app->exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app->exit(e, out, err);
    return ConfigError("").exit_code();
  }
  try {
    if (app->got_subcommand("synth")) return cmd_synth(o, out);
    if (app->got_subcommand("distill")) return cmd_distill(o, out);
    if (app->got_subcommand("infer")) return cmd_infer(o, out);
    if (app->got_subcommand("eval")) return cmd_eval(o, out);
    if (app->got_subcommand("sweep")) return cmd_sweep(o, out);
    if (app->got_subcommand("ablate")) return cmd_ablate(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << '\n';
    return DataError("").exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return DataError("").exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return TrainingError("").exit_code();
  }
  return 0;
}

}  // namespace lmbot::cli
