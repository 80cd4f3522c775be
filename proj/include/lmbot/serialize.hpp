#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmbot/corpus.hpp"

namespace lmbot {

namespace tokens {
inline constexpr std::string_view pad = "[PAD]";
inline constexpr std::string_view unknown = "[UNK]";
inline constexpr std::string_view metadata = "[M]";
inline constexpr std::string_view description = "[D]";
inline constexpr std::string_view tweets = "[T]";
inline constexpr std::string_view sep = "[SEP]";
inline constexpr std::string_view hashtag = "#HASHTAG";
inline constexpr std::string_view mention = "@USER";
inline constexpr std::string_view url = "HTTPURL";
}  // namespace tokens

/// Tweet-aware tokenization: URLs, @mentions and #hashtags stay whole, words
/// are runs of word characters (with inner apostrophes), every other
/// non-space character is its own token.
std::vector<std::string> tweet_tokenize(std::string_view text);

/// Replaces hashtags, mentions and URLs with #HASHTAG, @USER and HTTPURL and
/// re-joins the tweet tokens with single spaces. Idempotent.
std::string denoise_text(std::string_view raw);

/// Which template sections carry content. A dropped section still emits its
/// marker followed by nothing.
struct SectionMask {
  bool metadata = true;
  bool description = true;
  bool tweets = true;

  bool operator==(const SectionMask&) const = default;
};

/// "[M] name value [SEP] name value ..." in schema order.
std::string serialize_metadata(const UserRecord& record);

class Vocabulary {
 public:
  Vocabulary();  // specials only
  explicit Vocabulary(std::vector<std::string> ordered_tokens);

  int id(std::string_view token) const;  // unknown id when absent
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  int pad_id() const { return 0; }
  int unknown_id() const { return 1; }
  int metadata_id() const { return 2; }
  int description_id() const { return 3; }
  int tweets_id() const { return 4; }
  int sep_id() const { return 5; }

  std::uint64_t fingerprint() const;

  void save(const std::filesystem::path& file) const;
  static Vocabulary load(const std::filesystem::path& file);

  static const std::vector<std::string>& specials();

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Specials first, then tokens with count >= min_count over the serialized
/// surfaces, ordered by count descending then lexicographically.
Vocabulary build_vocabulary(const std::vector<UserRecord>& train_records, std::size_t min_count,
                            SectionMask sections = {});

struct TextualSequence {
  std::vector<int> tokens;
  std::string surface;  // untruncated pre-tokenization string
  std::array<std::optional<std::size_t>, 3> marker_positions;  // [M], [D], [T]

  std::size_t length() const { return tokens.size(); }
};

struct SerializeOptions {
  std::size_t max_length = 512;
  SectionMask sections;
};

/// Template token strings plus surface, before id lookup and truncation.
struct SerializedText {
  std::vector<std::string> pieces;
  std::vector<bool> is_marker;
  std::string surface;
};

SerializedText serialize_text(const UserRecord& record, SectionMask sections = {});

/// Serializes and tokenizes one user; tokens past max_length are dropped from
/// the right, so tweets fill whatever budget metadata and description leave.
TextualSequence serialize_user(const UserRecord& record, const Vocabulary& vocab, const SerializeOptions& options = {});

}  // namespace lmbot
