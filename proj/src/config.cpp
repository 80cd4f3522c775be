#include "lmbot/config.hpp"

#include <charconv>
#include <cstdlib>
#include <map>
#include <sstream>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

double default_lm_lr(const std::string& backend) {
  if (backend == "bag" || backend == "positional") return kDeskLmLr;
  return kPretrainedLmLr;
}

std::string to_string(SoftSet s) {
  switch (s) {
    case SoftSet::train: return "train";
    case SoftSet::train_valid: return "train_valid";
    case SoftSet::all: return "all";
  }
  return "?";
}

SoftSet parse_soft_set(const std::string& text) {
  if (text == "train") return SoftSet::train;
  if (text == "train_valid") return SoftSet::train_valid;
  if (text == "all") return SoftSet::all;
  throw ConfigError("kd.soft_set must be train, train_valid or all (got '" + text + "')");
}

StudentLossConfig RunConfig::student_loss() const {
  StudentLossConfig c;
  c.alpha = alpha;
  c.temperature = temperature;
  c.lambda1 = lm_l2;
  c.classic_kd = classic_kd;
  return c;
}

std::filesystem::path RunConfig::run_root() const {
  if (!root.empty()) return root;
  if (const char* env = std::getenv("LMBOT_RUN_ROOT"); env && *env) return env;
  return "runs";
}

void RunConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("run.name must be a plain non-empty name");
  if (!(split.train > 0 && split.valid > 0 && split.test > 0)) throw ConfigError("split ratios must be positive");
  if (max_length < 16) throw ConfigError("serialize.max_length must be >= 16");
  if (min_count < 1) throw ConfigError("serialize.min_count must be >= 1");
  if (!sections.metadata && !sections.description && !sections.tweets)
    throw ConfigError("at least one serialize section must stay enabled");
  if (backend != "bag" && backend != "positional") throw ConfigError("lm.backend must be bag or positional");
  if (!(resolved_lm_lr() > 0)) throw ConfigError("lm.lr must be positive");
  if (!(lm_dropout >= 0 && lm_dropout < 1)) throw ConfigError("lm.dropout must lie in [0, 1)");
  if (finetune_epochs < 0) throw ConfigError("lm.finetune_epochs must be non-negative");
  if (distill_epochs < 0) throw ConfigError("lm.distill_epochs must be non-negative");
  if (lm_width < 1) throw ConfigError("lm.width must be positive");
  if (batch_size < 1) throw ConfigError("lm.batch_size must be positive");
  if (head_layers < 1) throw ConfigError("lm.head_layers must be >= 1");
  if (head_width < 1) throw ConfigError("lm.head_width must be positive");
  teacher.validate();
  student_loss().validate();
  if (min_iterations < 1) throw ConfigError("distill.min_iterations must be >= 1");
  if (max_iterations < min_iterations) throw ConfigError("distill.max_iterations must be >= distill.min_iterations");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  if (s.find('"') != std::string::npos) throw ConfigError("string values may not contain '\"'");
  return "\"" + s + "\"";
}

std::string unquote(const std::string& key, std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\'')))
    return v.substr(1, v.size() - 2);
  if (!v.empty() && (v.front() == '"' || v.front() == '\'')) throw ConfigError(key + ": unterminated string");
  return v;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  ConfigKey doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field int_field(std::string key, std::string help, T RunConfig::*member) {
  return {{key, std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_int(key, v)); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(std::string key, std::string help, double RunConfig::*member) {
  return {{key, std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_double(key, v); },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

Field bool_field(std::string key, std::string help, bool RunConfig::*member) {
  return {{key, std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string key, std::string help, std::string RunConfig::*member) {
  return {{key, std::move(help)},
          [member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return quote(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(string_field("run.name", "run directory name under the run root", &RunConfig::name));
    f.push_back(string_field("run.root", "run root (default $LMBOT_RUN_ROOT, else runs)", &RunConfig::root));
    f.push_back({{"run.seed", "master seed"},
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back(string_field("data.path", "dataset directory", &RunConfig::data_path));
    f.push_back({{"split.train", "train ratio"},
                 [](RunConfig& c, const std::string& v) { c.split.train = parse_double("split.train", v); },
                 [](const RunConfig& c) { return format_double(c.split.train); }});
    f.push_back({{"split.valid", "validation ratio"},
                 [](RunConfig& c, const std::string& v) { c.split.valid = parse_double("split.valid", v); },
                 [](const RunConfig& c) { return format_double(c.split.valid); }});
    f.push_back({{"split.test", "test ratio"},
                 [](RunConfig& c, const std::string& v) { c.split.test = parse_double("split.test", v); },
                 [](const RunConfig& c) { return format_double(c.split.test); }});
    f.push_back({{"serialize.metadata", "include the metadata section"},
                 [](RunConfig& c, const std::string& v) { c.sections.metadata = parse_bool("serialize.metadata", v); },
                 [](const RunConfig& c) { return std::string(c.sections.metadata ? "true" : "false"); }});
    f.push_back({{"serialize.description", "include the description section"},
                 [](RunConfig& c, const std::string& v) {
                   c.sections.description = parse_bool("serialize.description", v);
                 },
                 [](const RunConfig& c) { return std::string(c.sections.description ? "true" : "false"); }});
    f.push_back({{"serialize.tweets", "include the tweet section"},
                 [](RunConfig& c, const std::string& v) { c.sections.tweets = parse_bool("serialize.tweets", v); },
                 [](const RunConfig& c) { return std::string(c.sections.tweets ? "true" : "false"); }});
    f.push_back(int_field("serialize.max_length", "token budget per user", &RunConfig::max_length));
    f.push_back(int_field("serialize.min_count", "vocabulary frequency threshold", &RunConfig::min_count));
    f.push_back(string_field("lm.backend", "student encoder backend: bag or positional", &RunConfig::backend));
    f.push_back({{"lm.lr", "student learning rate (default depends on the backend)"},
                 [](RunConfig& c, const std::string& v) {
                   if (v == "auto") c.lm_lr.reset();
                   else c.lm_lr = parse_double("lm.lr", v);
                 },
                 [](const RunConfig& c) { return format_double(c.resolved_lm_lr()); }});
    f.push_back(double_field("lm.dropout", "student dropout", &RunConfig::lm_dropout));
    f.push_back(double_field("lm.l2", "student L2 coefficient", &RunConfig::lm_l2));
    f.push_back(int_field("lm.finetune_epochs", "domain-adaptation epochs", &RunConfig::finetune_epochs));
    f.push_back(int_field("lm.distill_epochs", "student epochs per iteration", &RunConfig::distill_epochs));
    f.push_back(int_field("lm.width", "desk encoder width", &RunConfig::lm_width));
    f.push_back(int_field("lm.batch_size", "student batch size", &RunConfig::batch_size));
    f.push_back(int_field("lm.head_layers", "classifier head depth", &RunConfig::head_layers));
    f.push_back(int_field("lm.head_width", "classifier head hidden width", &RunConfig::head_width));
    f.push_back({{"gnn.kind", "teacher: relational_gnn, attention_gnn, plain_gnn or mlp"},
                 [](RunConfig& c, const std::string& v) { c.teacher.kind = parse_teacher_kind(v); },
                 [](const RunConfig& c) { return quote(to_string(c.teacher.kind)); }});
    f.push_back({{"gnn.layers", "teacher layers"},
                 [](RunConfig& c, const std::string& v) { c.teacher.layers = static_cast<int>(parse_int("gnn.layers", v)); },
                 [](const RunConfig& c) { return std::to_string(c.teacher.layers); }});
    f.push_back({{"gnn.hidden", "teacher hidden width"},
                 [](RunConfig& c, const std::string& v) { c.teacher.hidden = static_cast<int>(parse_int("gnn.hidden", v)); },
                 [](const RunConfig& c) { return std::to_string(c.teacher.hidden); }});
    f.push_back({{"gnn.dropout", "teacher dropout"},
                 [](RunConfig& c, const std::string& v) { c.teacher.dropout = parse_double("gnn.dropout", v); },
                 [](const RunConfig& c) { return format_double(c.teacher.dropout); }});
    f.push_back({{"gnn.l2", "teacher L2 coefficient"},
                 [](RunConfig& c, const std::string& v) { c.teacher.lambda2 = parse_double("gnn.l2", v); },
                 [](const RunConfig& c) { return format_double(c.teacher.lambda2); }});
    f.push_back({{"gnn.lr", "teacher learning rate"},
                 [](RunConfig& c, const std::string& v) { c.teacher.lr = parse_double("gnn.lr", v); },
                 [](const RunConfig& c) { return format_double(c.teacher.lr); }});
    f.push_back({{"gnn.max_epochs", "teacher epochs per iteration (upper bound)"},
                 [](RunConfig& c, const std::string& v) {
                   c.teacher.max_epochs = static_cast<int>(parse_int("gnn.max_epochs", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.teacher.max_epochs); }});
    f.push_back({{"gnn.patience", "teacher early-stopping patience in epochs"},
                 [](RunConfig& c, const std::string& v) {
                   c.teacher.patience = static_cast<int>(parse_int("gnn.patience", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.teacher.patience); }});
    f.push_back(double_field("kd.temperature", "distillation temperature", &RunConfig::temperature));
    f.push_back(double_field("kd.alpha", "weight of the soft-label term", &RunConfig::alpha));
    f.push_back({{"kd.soft_set", "nodes that receive soft labels: train, train_valid or all"},
                 [](RunConfig& c, const std::string& v) { c.soft_set = parse_soft_set(v); },
                 [](const RunConfig& c) { return quote(to_string(c.soft_set)); }});
    f.push_back(bool_field("kd.classic", "student-side temperature and T^2 scaling", &RunConfig::classic_kd));
    f.push_back(int_field("distill.min_iterations", "iterations before the stop rule applies", &RunConfig::min_iterations));
    f.push_back(int_field("distill.max_iterations", "hard cap on iterations", &RunConfig::max_iterations));
    f.push_back(bool_field("distill.skip_adaptation", "skip domain-adaptation finetuning", &RunConfig::skip_adaptation));
    f.push_back({{"eval.f1", "F1 variant: binary (bot positive) or macro"},
                 [](RunConfig& c, const std::string& v) {
                   if (v == "binary") c.f1 = F1Mode::binary;
                   else if (v == "macro") c.f1 = F1Mode::macro;
                   else throw ConfigError("eval.f1 must be binary or macro");
                 },
                 [](const RunConfig& c) { return quote(c.f1 == F1Mode::binary ? "binary" : "macro"); }});
    return f;
  }();
  return all;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.doc.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing "# comment" that sits outside quotes.
std::string strip_comment(const std::string& line) {
  char q = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (q) {
      if (c == q) q = 0;
    } else if (c == '"' || c == '\'') {
      q = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, unquote(key, trim(value)));
}

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.doc);
    return k;
  }();
  return keys;
}

std::string RunConfig::to_toml() const {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.doc.key.find('.');
    const std::string sec = f.doc.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << f.doc.key.substr(dot + 1) << " = " << f.get(*this) << '\n';
  }
  return out.str();
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    try {
      base.set(full, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& file, RunConfig base) {
  if (!std::filesystem::exists(file)) throw ConfigError("config file not found: " + file.string());
  return parse_config(read_file(file), std::move(base));
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
    cfg.set(trim(a.substr(0, eq)), a.substr(eq + 1));
  }
}

}  // namespace lmbot
