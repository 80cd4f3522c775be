#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lmbot/corpus.hpp"
#include "lmbot/graph_teacher.hpp"
#include "lmbot/lm_encoder.hpp"
#include "lmbot/metrics.hpp"
#include "lmbot/serialize.hpp"

namespace lmbot {

/// Learning rate used when lm.lr is not set. Pretrained encoders are tuned
/// at 1e-5; the small desk backends train from scratch and need a larger step.
inline constexpr double kPretrainedLmLr = 1e-5;
inline constexpr double kDeskLmLr = 1e-3;
double default_lm_lr(const std::string& backend);

enum class SoftSet { train, train_valid, all };
std::string to_string(SoftSet s);
SoftSet parse_soft_set(const std::string& text);

struct RunConfig {
  // run
  std::string name = "run";
  std::string root;  // empty: $LMBOT_RUN_ROOT or "runs"
  std::uint64_t seed = 0;
  // data
  std::string data_path;
  SplitRatios split;
  // serialize
  SectionMask sections;
  std::size_t max_length = 512;
  std::size_t min_count = 1;
  // lm
  std::string backend = "bag";
  std::optional<double> lm_lr;
  double lm_dropout = 0.1;
  double lm_l2 = 1e-2;
  int finetune_epochs = 5;
  int distill_epochs = 2;
  int lm_width = 64;
  int batch_size = 32;
  int head_layers = 2;
  int head_width = 128;
  // gnn
  TeacherConfig teacher;
  // kd
  double temperature = 3.0;
  double alpha = 0.5;
  SoftSet soft_set = SoftSet::all;
  bool classic_kd = false;
  // distill
  int min_iterations = 2;
  int max_iterations = 20;
  bool skip_adaptation = false;
  // eval
  F1Mode f1 = F1Mode::binary;

  double resolved_lm_lr() const { return lm_lr.value_or(default_lm_lr(backend)); }
  StudentLossConfig student_loss() const;
  std::vector<Eigen::Index> head_hidden() const {
    return std::vector<Eigen::Index>(static_cast<std::size_t>(std::max(head_layers - 1, 0)), head_width);
  }
  std::filesystem::path run_root() const;
  std::filesystem::path run_dir() const { return run_root() / name; }

  /// Range checks of every owning module. Throws ConfigError.
  void validate() const;

  /// Sets one dotted key from its textual value. Unknown keys are rejected.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Sectioned key = value text with every key present; parse_config of this
  /// text yields an identical config.
  std::string to_toml() const;
};

struct ConfigKey {
  std::string key;
  std::string help;
};

/// Every accepted key, in echo order.
const std::vector<ConfigKey>& config_keys();

/// Parses "[section]" headers, "key = value" lines and "#" comments.
/// Keys may also be written fully dotted outside a section.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& file, RunConfig base = {});

/// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

}  // namespace lmbot
