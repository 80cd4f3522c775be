#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "lmbot/corpus.hpp"
#include "lmbot/nn.hpp"

namespace lmbot::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lmbot-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Largest relative error between analytic gradients (already in p->grad)
/// and central differences of `loss`, per parameter tensor:
/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor).
inline double max_gradient_error(const ParameterRefs& params, const std::function<double()>& loss, double h = 1e-6,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    Matrix numeric(analytic.rows(), analytic.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double x0 = x;
      x = x0 + h;
      const double up = loss();
      x = x0 - h;
      const double down = loss();
      x = x0;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    if (analytic.size() == 0) continue;
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
    worst = std::max(worst, (analytic - numeric).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

/// Random text with words, hashtags, mentions, URLs and punctuation.
inline std::string random_text(std::mt19937_64& rng, int max_words = 12) {
  static const char* pieces[] = {"hello", "world", "#tag", "#Crypto_2024", "@alice", "@bob_99", "https://t.co/abc",
                                 "http://example.com/x?y=1", "www.site.org", "don't", "!!", ",", "naïve", "42",
                                 "[M]", "[SEP]", "HTTPURL", "@USER", "#HASHTAG", "a.b", "(x)", "#", "@", "t.co/zz"};
  std::uniform_int_distribution<int> n(0, max_words), pick(0, static_cast<int>(std::size(pieces)) - 1), sp(0, 3);
  std::string s;
  const int words = n(rng);
  for (int i = 0; i < words; ++i) {
    const int gap = sp(rng);
    s += gap == 0 ? "" : gap == 1 ? " " : gap == 2 ? "  " : "\t";
    s += pieces[pick(rng)];
  }
  return s;
}

inline UserRecord random_record(std::mt19937_64& rng, std::size_t index) {
  UserRecord r;
  r.user_id = "r" + std::to_string(index);
  std::uniform_int_distribution<int> count(0, 6), val(0, 100000);
  r.metadata = {{"followers_count", std::to_string(val(rng))},
                {"verified", val(rng) % 2 ? "true" : "false"},
                {"location", random_text(rng, 3)}};
  if (count(rng) > 1) r.description = random_text(rng, 20);
  const int tweets = count(rng);
  for (int t = 0; t < tweets; ++t) r.tweets.push_back(random_text(rng, 30));
  r.label = val(rng) % 2 ? Label::bot : Label::human;
  return r;
}

}  // namespace lmbot::testing
