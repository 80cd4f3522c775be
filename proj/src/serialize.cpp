#include "lmbot/serialize.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include <nlohmann/json.hpp>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

bool starts_with_ci(std::string_view text, std::size_t pos, std::string_view prefix) {
  if (text.size() - pos < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(text[pos + i])) != prefix[i]) return false;
  return true;
}

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

enum class Kind { word, url, mention, hashtag, other };

struct Piece {
  std::string_view text;
  Kind kind;
};

std::vector<Piece> scan(std::string_view text) {
  std::vector<Piece> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  auto word_end = [&](std::size_t j) {
    while (j < n) {
      if (is_word_char(static_cast<unsigned char>(text[j]))) {
        ++j;
      } else if ((text[j] == '\'') && j + 1 < n && is_word_char(static_cast<unsigned char>(text[j + 1]))) {
        j += 2;
      } else {
        break;
      }
    }
    return j;
  };
  while (i < n) {
    if (is_space(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (starts_with_ci(text, i, "http://") || starts_with_ci(text, i, "https://") || starts_with_ci(text, i, "www.") ||
        starts_with_ci(text, i, "t.co/")) {
      while (i < n && !is_space(static_cast<unsigned char>(text[i]))) ++i;
      // trailing sentence punctuation is not part of the link
      while (i > start + 1 && std::string_view(".,!?;:)\"'").find(text[i - 1]) != std::string_view::npos) --i;
      out.push_back({text.substr(start, i - start), Kind::url});
    } else if ((text[i] == '@' || text[i] == '#') && i + 1 < n && is_word_char(static_cast<unsigned char>(text[i + 1]))) {
      const Kind kind = text[i] == '@' ? Kind::mention : Kind::hashtag;
      ++i;
      while (i < n && is_word_char(static_cast<unsigned char>(text[i]))) ++i;
      out.push_back({text.substr(start, i - start), kind});
    } else if (is_word_char(static_cast<unsigned char>(text[i]))) {
      i = word_end(i);
      out.push_back({text.substr(start, i - start), Kind::word});
    } else {
      ++i;
      out.push_back({text.substr(start, 1), Kind::other});
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

std::vector<std::string> tweet_tokenize(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& p : scan(text)) out.emplace_back(p.text);
  return out;
}

std::string denoise_text(std::string_view raw) {
  std::string out;
  for (const auto& p : scan(raw)) {
    if (!out.empty()) out += ' ';
    switch (p.kind) {
      case Kind::url: out += tokens::url; break;
      case Kind::mention: out += tokens::mention; break;
      case Kind::hashtag: out += tokens::hashtag; break;
      default: out += p.text;
    }
  }
  return out;
}

std::string serialize_metadata(const UserRecord& record) {
  if (record.metadata.empty()) throw DataError("user " + record.user_id + " has no metadata fields");
  std::vector<std::string> fields;
  for (const auto& [name, value] : record.metadata) fields.push_back(value.empty() ? name : name + " " + value);
  return std::string(tokens::metadata) + " " + join(fields, " " + std::string(tokens::sep) + " ");
}

const std::vector<std::string>& Vocabulary::specials() {
  static const std::vector<std::string> s = {
      std::string(tokens::pad),   std::string(tokens::unknown), std::string(tokens::metadata),
      std::string(tokens::description), std::string(tokens::tweets), std::string(tokens::sep),
      std::string(tokens::hashtag), std::string(tokens::mention), std::string(tokens::url)};
  return s;
}

Vocabulary::Vocabulary() : Vocabulary(specials()) {}

Vocabulary::Vocabulary(std::vector<std::string> ordered_tokens) : tokens_(std::move(ordered_tokens)) {
  const auto& sp = specials();
  if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin()))
    throw DataError("vocabulary must start with the special tokens");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? unknown_id() : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = fnv1a("");
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a("\n", h);
  }
  return h;
}

void Vocabulary::save(const std::filesystem::path& file) const {
  write_file_atomic(file, nlohmann::json(tokens_).dump() + "\n");
}

Vocabulary Vocabulary::load(const std::filesystem::path& file) {
  try {
    return Vocabulary(nlohmann::json::parse(read_file(file)).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

SerializedText serialize_text(const UserRecord& record, SectionMask sections) {
  SerializedText out;
  auto marker = [&](std::string_view m) {
    out.pieces.emplace_back(m);
    out.is_marker.push_back(true);
  };
  auto text = [&](const std::vector<std::string>& toks) {
    for (const auto& t : toks) {
      out.pieces.push_back(t);
      out.is_marker.push_back(false);
    }
  };

  std::vector<std::string> surface;
  if (sections.metadata) {
    surface.push_back(serialize_metadata(record));
    marker(tokens::metadata);
    for (std::size_t f = 0; f < record.metadata.size(); ++f) {
      if (f) marker(tokens::sep);
      text(tweet_tokenize(record.metadata[f].first));
      text(tweet_tokenize(record.metadata[f].second));
    }
  } else {
    surface.emplace_back(tokens::metadata);
    marker(tokens::metadata);
  }

  surface.emplace_back(tokens::description);
  marker(tokens::description);
  if (sections.description && !record.description.empty()) {
    auto clean = denoise_text(record.description);
    if (!clean.empty()) {
      text(tweet_tokenize(clean));
      surface.push_back(std::move(clean));
    }
  }

  surface.emplace_back(tokens::tweets);
  marker(tokens::tweets);
  if (sections.tweets) {
    std::vector<std::string> cleaned;
    for (const auto& tw : record.tweets) {
      auto clean = denoise_text(tw);
      if (!clean.empty()) cleaned.push_back(std::move(clean));
    }
    for (std::size_t t = 0; t < cleaned.size(); ++t) {
      if (t) marker(tokens::sep);
      text(tweet_tokenize(cleaned[t]));
    }
    if (!cleaned.empty()) surface.push_back(join(cleaned, " " + std::string(tokens::sep) + " "));
  }
  out.surface = join(surface, " ");
  return out;
}

Vocabulary build_vocabulary(const std::vector<UserRecord>& train_records, std::size_t min_count, SectionMask sections) {
  if (train_records.empty()) throw DataError("cannot build a vocabulary from zero records");
  std::map<std::string, std::size_t> counts;
  for (const auto& r : train_records) {
    const auto text = serialize_text(r, sections);
    for (std::size_t i = 0; i < text.pieces.size(); ++i)
      if (!text.is_marker[i]) ++counts[text.pieces[i]];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  const auto& specials = Vocabulary::specials();
  for (auto& [tok, n] : counts)
    if (n >= min_count && std::find(specials.begin(), specials.end(), tok) == specials.end()) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> ordered = specials;
  for (auto& [tok, n] : kept) ordered.push_back(tok);
  return Vocabulary(std::move(ordered));
}

TextualSequence serialize_user(const UserRecord& record, const Vocabulary& vocab, const SerializeOptions& options) {
  if (options.max_length < 16) throw ConfigError("max_length must be at least 16");
  auto text = serialize_text(record, options.sections);
  TextualSequence seq;
  seq.surface = std::move(text.surface);
  const std::size_t n = std::min(options.max_length, text.pieces.size());
  seq.tokens.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& piece = text.pieces[i];
    if (text.is_marker[i]) {
      if (piece == tokens::metadata) {
        seq.marker_positions[0] = i;
        seq.tokens.push_back(vocab.metadata_id());
      } else if (piece == tokens::description) {
        seq.marker_positions[1] = i;
        seq.tokens.push_back(vocab.description_id());
      } else if (piece == tokens::tweets) {
        seq.marker_positions[2] = i;
        seq.tokens.push_back(vocab.tweets_id());
      } else {
        seq.tokens.push_back(vocab.sep_id());
      }
    } else {
      seq.tokens.push_back(vocab.id(piece));
    }
  }
  return seq;
}

}  // namespace lmbot
