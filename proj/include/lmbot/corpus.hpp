#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lmbot {

enum class Label : int { human = 0, bot = 1 };

std::string_view to_string(Label label);
std::optional<Label> parse_label(std::string_view text);

struct UserRecord {
  std::string user_id;
  // (field name, value) in schema order
  std::vector<std::pair<std::string, std::string>> metadata;
  std::string description;
  std::vector<std::string> tweets;  // most recent first
  std::optional<Label> label;

  bool operator==(const UserRecord&) const = default;
};

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;

  bool operator==(const Edge&) const = default;
};

/// Relation-typed directed edges over dataset users. Undirected sources are
/// stored with both directions.
struct HeteroGraph {
  std::vector<std::string> node_ids;
  std::map<std::string, std::vector<Edge>> relations;

  std::size_t num_nodes() const { return node_ids.size(); }
  std::size_t num_edges() const;

  bool operator==(const HeteroGraph&) const = default;
};

struct Dataset {
  std::string name;
  std::vector<std::string> schema;  // ordered metadata field names
  std::vector<UserRecord> records;
  std::optional<HeteroGraph> graph;

  std::vector<std::size_t> labeled_indices() const;
  bool has_tweets() const;
  bool has_descriptions() const;

  bool operator==(const Dataset&) const = default;
};

struct SplitRatios {
  double train = 1.0;
  double valid = 1.0;
  double test = 8.0;
};

struct SplitAssignment {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  bool operator==(const SplitAssignment&) const = default;
};

/// Reads `users.jsonl`, `schema.json` and the optional `edges.jsonl`.
/// Throws DataError naming the offending line on malformed input.
Dataset load_dataset(const std::filesystem::path& dir);

/// Parses a standalone users.jsonl file (no schema or graph).
std::vector<UserRecord> load_users(const std::filesystem::path& file);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Shuffles the labeled indices and partitions them proportionally. Flooring
/// remainders go to test; train and valid get at least one index each.
SplitAssignment split_dataset(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed);

void save_split(const SplitAssignment& split, const std::filesystem::path& file);
SplitAssignment load_split(const std::filesystem::path& file);
std::filesystem::path split_file_name(std::uint64_t seed);

/// Keeps ceil(fraction * |train|) uniformly sampled train indices in their
/// original order, so fraction 1 is the identity.
SplitAssignment trim_labels(const SplitAssignment& split, double fraction, std::uint64_t seed);

/// Subsamples each relation independently to ceil(fraction * count) edges,
/// preserving the original edge order.
HeteroGraph trim_edges(const HeteroGraph& graph, double fraction, std::uint64_t seed);

/// Planted two-class corpus. Each class owns a block of indicative tokens;
/// text tokens come from the own-class block with probability `signal_rate`
/// and from the shared noise block otherwise. Edges follow a planted
/// partition with p_in inside a class and p_out across.
struct SyntheticConfig {
  std::size_t n_users = 2000;
  double bot_prior = 0.5;
  std::size_t vocab_size = 400;
  std::size_t indicative_per_class = 20;
  double signal_rate = 0.3;
  std::size_t description_tokens = 12;
  std::size_t tweets_per_user = 4;
  std::size_t tweet_tokens = 10;
  double markup_rate = 0.05;  // hashtags, mentions and URLs sprinkled into text
  std::size_t relations = 2;
  double p_in = 0.05;
  std::optional<double> p_out;  // defaults to p_in / 10
  bool metadata_signal = true;
  bool description_signal = true;
  bool tweet_signal = true;

  double resolved_p_out() const { return p_out.value_or(p_in / 10.0); }
};

Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed);

/// Tokens planted as indicative of `label` by generate_synthetic.
std::vector<std::string> synthetic_indicative_tokens(const SyntheticConfig& cfg, Label label);

}  // namespace lmbot
