#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lmbot/nn.hpp"

namespace lmbot {

/// Temperature-softened teacher distributions, keyed by node index.
struct SoftLabelTable {
  double temperature = 1.0;
  std::string source;  // teacher checkpoint id
  std::map<std::size_t, Probs> rows;

  const Probs* find(std::size_t node) const {
    auto it = rows.find(node);
    return it == rows.end() ? nullptr : &it->second;
  }

  /// JSON lines of {user_id, p_human, p_bot, temperature}.
  void save(const std::filesystem::path& file, const std::vector<std::string>& node_ids) const;
  static SoftLabelTable load(const std::filesystem::path& file, const std::vector<std::string>& node_ids,
                             std::string source = {});
};

}  // namespace lmbot
