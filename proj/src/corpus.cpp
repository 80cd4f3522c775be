#include "lmbot/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"
#include "lmbot/random.hpp"

namespace lmbot {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Label label) { return label == Label::bot ? "bot" : "human"; }

std::optional<Label> parse_label(std::string_view text) {
  if (text == "human") return Label::human;
  if (text == "bot") return Label::bot;
  return std::nullopt;
}

std::size_t HeteroGraph::num_edges() const {
  std::size_t n = 0;
  for (const auto& [name, edges] : relations) n += edges.size();
  return n;
}

std::vector<std::size_t> Dataset::labeled_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].label) out.push_back(i);
  return out;
}

bool Dataset::has_tweets() const {
  return std::any_of(records.begin(), records.end(), [](const UserRecord& r) { return !r.tweets.empty(); });
}

bool Dataset::has_descriptions() const {
  return std::any_of(records.begin(), records.end(), [](const UserRecord& r) { return !r.description.empty(); });
}

namespace {

std::string where(const fs::path& file, std::size_t line) {
  return file.filename().string() + ":" + std::to_string(line);
}

UserRecord parse_user(const std::string& text, const fs::path& file, std::size_t line_no) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(where(file, line_no) + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw DataError(where(file, line_no) + ": record is not an object");

  UserRecord rec;
  auto id = j.find("user_id");
  if (id == j.end() || !id->is_string() || id->get<std::string>().empty())
    throw DataError(where(file, line_no) + ": missing user_id");
  rec.user_id = id->get<std::string>();

  if (auto m = j.find("metadata"); m != j.end() && !m->is_null()) {
    if (!m->is_array()) throw DataError(where(file, line_no) + ": metadata must be an array");
    for (const auto& field : *m) {
      if (field.is_array() && field.size() == 2 && field[0].is_string() && field[1].is_string()) {
        rec.metadata.emplace_back(field[0].get<std::string>(), field[1].get<std::string>());
      } else if (field.is_object() && field.contains("name") && field.contains("value")) {
        rec.metadata.emplace_back(field["name"].get<std::string>(), field["value"].get<std::string>());
      } else {
        throw DataError(where(file, line_no) + ": metadata entries must be [name, value] string pairs");
      }
    }
  }
  if (auto d = j.find("description"); d != j.end() && !d->is_null()) {
    if (!d->is_string()) throw DataError(where(file, line_no) + ": description must be a string");
    rec.description = d->get<std::string>();
  }
  if (auto t = j.find("tweets"); t != j.end() && !t->is_null()) {
    if (!t->is_array()) throw DataError(where(file, line_no) + ": tweets must be an array");
    for (const auto& tw : *t) {
      if (!tw.is_string()) throw DataError(where(file, line_no) + ": tweets must be strings");
      rec.tweets.push_back(tw.get<std::string>());
    }
  }
  if (auto l = j.find("label"); l != j.end() && !l->is_null()) {
    if (!l->is_string()) throw DataError(where(file, line_no) + ": label must be a string");
    auto label = parse_label(l->get<std::string>());
    if (!label) throw DataError(where(file, line_no) + ": unknown label '" + l->get<std::string>() + "'");
    rec.label = label;
  }
  return rec;
}

json user_to_json(const UserRecord& r) {
  json meta = json::array();
  for (const auto& [name, value] : r.metadata) meta.push_back(json::array({name, value}));
  json j = {{"user_id", r.user_id}, {"metadata", meta}, {"description", r.description}, {"tweets", r.tweets}};
  if (r.label) j["label"] = std::string(to_string(*r.label));
  return j;
}

}  // namespace

std::vector<UserRecord> load_users(const fs::path& file) {
  std::vector<UserRecord> records;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(file)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto rec = parse_user(line, file, line_no);
    if (!seen.insert(rec.user_id).second)
      throw DataError(where(file, line_no) + ": duplicate user_id '" + rec.user_id + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  Dataset ds;
  ds.name = dir.filename().string();
  ds.records = load_users(dir / "users.jsonl");

  std::vector<std::string> relation_names;
  if (fs::exists(dir / "schema.json")) {
    json schema;
    try {
      schema = json::parse(read_file(dir / "schema.json"));
    } catch (const json::parse_error& e) {
      throw DataError("schema.json: " + std::string(e.what()));
    }
    if (schema.contains("name")) ds.name = schema["name"].get<std::string>();
    if (schema.contains("metadata_fields")) ds.schema = schema["metadata_fields"].get<std::vector<std::string>>();
    if (schema.contains("relations")) relation_names = schema["relations"].get<std::vector<std::string>>();
  } else if (!ds.records.empty()) {
    for (const auto& [name, value] : ds.records.front().metadata) ds.schema.push_back(name);
  }

  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& meta = ds.records[i].metadata;
    bool ok = meta.size() == ds.schema.size();
    for (std::size_t f = 0; ok && f < meta.size(); ++f) ok = meta[f].first == ds.schema[f];
    if (!ok) throw DataError(where(dir / "users.jsonl", i + 1) + ": metadata fields do not follow schema order");
  }

  const fs::path edges_file = dir / "edges.jsonl";
  if (fs::exists(edges_file)) {
    HeteroGraph g;
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      g.node_ids.push_back(ds.records[i].user_id);
      index.emplace(ds.records[i].user_id, i);
    }
    for (const auto& name : relation_names) g.relations[name];
    std::size_t line_no = 0;
    for (const auto& line : read_lines(edges_file)) {
      ++line_no;
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DataError(where(edges_file, line_no) + ": invalid JSON: " + e.what());
      }
      if (!j.is_object() || !j.contains("relation") || !j.contains("src") || !j.contains("dst"))
        throw DataError(where(edges_file, line_no) + ": edge needs relation, src and dst");
      const auto src = j["src"].get<std::string>();
      const auto dst = j["dst"].get<std::string>();
      auto s = index.find(src);
      auto d = index.find(dst);
      if (s == index.end() || d == index.end())
        throw DataError(where(edges_file, line_no) + ": dangling edge endpoint '" +
                        (s == index.end() ? src : dst) + "'");
      g.relations[j["relation"].get<std::string>()].push_back({s->second, d->second});
    }
    ds.graph = std::move(g);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream users;
  for (const auto& r : ds.records) users << user_to_json(r).dump() << '\n';
  write_file_atomic(dir / "users.jsonl", users.str());

  json schema = {{"name", ds.name}, {"metadata_fields", ds.schema}};
  if (ds.graph) {
    json rels = json::array();
    for (const auto& [name, edges] : ds.graph->relations) rels.push_back(name);
    schema["relations"] = rels;
  }
  write_file_atomic(dir / "schema.json", schema.dump(2) + "\n");

  if (ds.graph) {
    std::ostringstream edges;
    for (const auto& [name, list] : ds.graph->relations)
      for (const auto& e : list)
        edges << json{{"relation", name}, {"src", ds.graph->node_ids[e.src]}, {"dst", ds.graph->node_ids[e.dst]}}.dump()
              << '\n';
    write_file_atomic(dir / "edges.jsonl", edges.str());
  } else if (fs::exists(dir / "edges.jsonl")) {
    fs::remove(dir / "edges.jsonl");
  }
}

SplitAssignment split_dataset(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.valid > 0 && ratios.test > 0))
    throw ConfigError("split ratios must be positive");
  auto labeled = ds.labeled_indices();
  const std::size_t n = labeled.size();
  if (n < 3) throw DataError("need at least 3 labeled records to split, have " + std::to_string(n));

  Rng rng(seed);
  std::shuffle(labeled.begin(), labeled.end(), rng);

  const double total = ratios.train + ratios.valid + ratios.test;
  auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.train / total));
  auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.valid / total));
  n_train = std::max<std::size_t>(n_train, 1);
  n_valid = std::max<std::size_t>(n_valid, 1);
  if (n_train + n_valid >= n) n_valid = std::max<std::size_t>(1, n - n_train - 1);

  SplitAssignment split;
  split.seed = seed;
  split.train.assign(labeled.begin(), labeled.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.valid.assign(labeled.begin() + static_cast<std::ptrdiff_t>(n_train),
                     labeled.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  split.test.assign(labeled.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), labeled.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.valid.begin(), split.valid.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

fs::path split_file_name(std::uint64_t seed) { return "split_" + std::to_string(seed) + ".json"; }

void save_split(const SplitAssignment& split, const fs::path& file) {
  json j = {{"seed", split.seed}, {"train", split.train}, {"valid", split.valid}, {"test", split.test}};
  write_file_atomic(file, j.dump() + "\n");
}

SplitAssignment load_split(const fs::path& file) {
  json j;
  try {
    j = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  SplitAssignment s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.valid = j.at("valid").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  return s;
}

namespace {

void check_fraction(double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in (0, 1]");
}

std::size_t kept_count(double fraction, std::size_t n) {
  // Guard against 0.3 * 10 evaluating to 3.0000000000000004.
  const double raw = fraction * static_cast<double>(n);
  const double rounded = std::round(raw);
  const double value = std::abs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw);
  return std::min(n, static_cast<std::size_t>(value));
}

}  // namespace

SplitAssignment trim_labels(const SplitAssignment& split, double fraction, std::uint64_t seed) {
  check_fraction(fraction);
  SplitAssignment out = split;
  std::vector<std::size_t> pool = split.train;
  Rng rng(derive_seed(seed, "trim_labels"));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(kept_count(fraction, pool.size()));
  std::sort(pool.begin(), pool.end());
  out.train.clear();
  for (auto i : split.train)
    if (std::binary_search(pool.begin(), pool.end(), i)) out.train.push_back(i);
  return out;
}

HeteroGraph trim_edges(const HeteroGraph& graph, double fraction, std::uint64_t seed) {
  check_fraction(fraction);
  HeteroGraph out;
  out.node_ids = graph.node_ids;
  for (const auto& [name, edges] : graph.relations) {
    std::vector<std::size_t> order(edges.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "trim_edges:" + name));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(kept_count(fraction, edges.size()));
    std::sort(order.begin(), order.end());
    auto& kept = out.relations[name];
    kept.reserve(order.size());
    for (auto i : order) kept.push_back(edges[i]);
  }
  return out;
}

std::vector<std::string> synthetic_indicative_tokens(const SyntheticConfig& cfg, Label label) {
  std::vector<std::string> out;
  const std::size_t base = label == Label::human ? 0 : cfg.indicative_per_class;
  for (std::size_t i = 0; i < cfg.indicative_per_class; ++i) out.push_back("w" + std::to_string(base + i));
  return out;
}

namespace {

class TokenSampler {
 public:
  TokenSampler(const SyntheticConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  std::string word(Label label, bool signal) {
    const std::size_t k = cfg_.indicative_per_class;
    if (signal && unit() < cfg_.signal_rate) {
      const std::size_t base = label == Label::human ? 0 : k;
      return "w" + std::to_string(base + pick(k));
    }
    return "w" + std::to_string(2 * k + pick(cfg_.vocab_size - 2 * k));
  }

  std::string text_token(Label label, bool signal) {
    if (unit() < cfg_.markup_rate) {
      switch (pick(3)) {
        case 0: return "#tag" + std::to_string(pick(50));
        case 1: return "@user" + std::to_string(pick(500));
        default: return "https://t.co/" + std::to_string(100000 + pick(900000));
      }
    }
    return word(label, signal);
  }

  std::string sentence(Label label, bool signal, std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += text_token(label, signal);
    }
    return s;
  }

  double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

 private:
  const SyntheticConfig& cfg_;
  Rng& rng_;
};

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (!(cfg.p_in >= 0.0 && cfg.p_in <= 1.0)) throw ConfigError("p_in must lie in [0, 1]");
  const double p_out = cfg.resolved_p_out();
  if (!(p_out >= 0.0 && p_out <= 1.0)) throw ConfigError("p_out must lie in [0, 1]");
  if (!(cfg.bot_prior >= 0.0 && cfg.bot_prior <= 1.0)) throw ConfigError("bot_prior must lie in [0, 1]");
  if (!(cfg.signal_rate >= 0.0 && cfg.signal_rate <= 1.0)) throw ConfigError("signal_rate must lie in [0, 1]");
  if (cfg.n_users == 0) throw ConfigError("n_users must be positive");
  if (cfg.vocab_size <= 2 * cfg.indicative_per_class)
    throw ConfigError("vocab_size must exceed twice indicative_per_class");

  Dataset ds;
  ds.name = "synthetic";
  ds.schema = {"followers_count", "friends_count", "verified", "location"};

  std::vector<Label> labels(cfg.n_users, Label::human);
  const auto n_bot = static_cast<std::size_t>(std::llround(cfg.bot_prior * static_cast<double>(cfg.n_users)));
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_bot), Label::bot);
  Rng label_rng(derive_seed(seed, "synthetic:labels"));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  Rng text_rng(derive_seed(seed, "synthetic:text"));
  TokenSampler sampler(cfg, text_rng);
  ds.records.reserve(cfg.n_users);
  for (std::size_t i = 0; i < cfg.n_users; ++i) {
    const Label y = labels[i];
    const bool bot = y == Label::bot;
    UserRecord r;
    r.user_id = "u" + std::to_string(i);
    r.label = y;

    std::size_t followers = sampler.pick(100) * 10;
    double p_verified = 0.3;
    if (cfg.metadata_signal) {
      followers = bot ? sampler.pick(40) * 10 : 200 + sampler.pick(80) * 10;
      p_verified = bot ? 0.1 : 0.6;
    }
    r.metadata = {{"followers_count", std::to_string(followers)},
                  {"friends_count", std::to_string(sampler.pick(100) * 10)},
                  {"verified", sampler.unit() < p_verified ? "true" : "false"},
                  {"location", sampler.word(y, cfg.metadata_signal)}};
    if (cfg.description_tokens > 0) r.description = sampler.sentence(y, cfg.description_signal, cfg.description_tokens);
    for (std::size_t t = 0; t < cfg.tweets_per_user; ++t)
      r.tweets.push_back(sampler.sentence(y, cfg.tweet_signal, cfg.tweet_tokens));
    ds.records.push_back(std::move(r));
  }

  if (cfg.relations > 0) {
    HeteroGraph g;
    for (const auto& r : ds.records) g.node_ids.push_back(r.user_id);
    for (std::size_t rel = 0; rel < cfg.relations; ++rel) {
      std::string name = rel == 0 ? "follower" : rel == 1 ? "following" : "rel" + std::to_string(rel);
      auto& edges = g.relations[name];
      Rng rng(derive_seed(seed, "synthetic:edges", rel));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (std::size_t src = 0; src < cfg.n_users; ++src)
        for (std::size_t dst = 0; dst < cfg.n_users; ++dst) {
          if (src == dst) continue;
          const double p = labels[src] == labels[dst] ? cfg.p_in : p_out;
          if (unit(rng) < p) edges.push_back({src, dst});
        }
    }
    ds.graph = std::move(g);
  }
  return ds;
}

}  // namespace lmbot
