#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lmbot/corpus.hpp"
#include "lmbot/nn.hpp"

namespace lmbot {

/// Binary report with bot as the positive class. The macro variant averages
/// the per-class F1 scores instead.
struct MetricReport {
  double accuracy = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t n = 0;
};

enum class F1Mode { binary, macro };

/// Thresholds p_bot at 0.5 (exactly 0.5 counts as bot).
MetricReport compute_metrics(std::span<const Probs> predictions, std::span<const Label> labels,
                             F1Mode mode = F1Mode::binary);

inline bool predicts_bot(const Probs& p) { return p[1] >= 0.5; }

struct ConsistencyReport {
  double agreement_rate = 0.0;
  std::vector<std::pair<double, double>> points;  // (p_student_bot, p_teacher_bot)
  // quadrants[s][t]: s, t = 1 when that model is on the bot side
  std::size_t quadrants[2][2] = {{0, 0}, {0, 0}};
};

ConsistencyReport consistency_analysis(std::span<const Probs> student, std::span<const Probs> teacher);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Sample standard deviation (n - 1); zero for a single value.
MeanStd mean_std(std::span<const double> values);

}  // namespace lmbot
