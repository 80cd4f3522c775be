#include "lmbot/soft_labels.hpp"

#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

void SoftLabelTable::save(const std::filesystem::path& file, const std::vector<std::string>& node_ids) const {
  std::ostringstream out;
  out.precision(17);
  for (const auto& [node, p] : rows) {
    nlohmann::json j = {{"user_id", node_ids.at(node)}, {"p_human", p[0]}, {"p_bot", p[1]}, {"temperature", temperature}};
    out << j.dump() << '\n';
  }
  write_file_atomic(file, out.str());
}

SoftLabelTable SoftLabelTable::load(const std::filesystem::path& file, const std::vector<std::string>& node_ids,
                                    std::string source) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < node_ids.size(); ++i) index.emplace(node_ids[i], i);
  SoftLabelTable table;
  table.source = std::move(source);
  std::size_t line_no = 0;
  for (const auto& line : read_lines(file)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto it = index.find(j.at("user_id").get<std::string>());
      if (it == index.end()) throw DataError(file.string() + ":" + std::to_string(line_no) + ": unknown user_id");
      table.rows[it->second] = {j.at("p_human").get<double>(), j.at("p_bot").get<double>()};
      table.temperature = j.at("temperature").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return table;
}

}  // namespace lmbot
