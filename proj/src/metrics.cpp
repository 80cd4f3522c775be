#include "lmbot/metrics.hpp"

#include <cmath>

#include "lmbot/error.hpp"

namespace lmbot {

namespace {

double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

MetricReport compute_metrics(std::span<const Probs> predictions, std::span<const Label> labels, F1Mode mode) {
  if (predictions.empty()) throw DataError("cannot compute metrics on an empty prediction set");
  if (predictions.size() != labels.size())
    throw DataError("prediction count " + std::to_string(predictions.size()) + " does not match label count " +
                    std::to_string(labels.size()));
  MetricReport r;
  r.n = predictions.size();
  for (std::size_t i = 0; i < r.n; ++i) {
    const bool pred = predicts_bot(predictions[i]);
    const bool truth = labels[i] == Label::bot;
    if (pred && truth) ++r.tp;
    else if (pred) ++r.fp;
    else if (truth) ++r.fn;
    else ++r.tn;
  }
  r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(r.n);
  r.f1 = f1_score(r.tp, r.fp, r.fn);
  if (mode == F1Mode::macro) r.f1 = 0.5 * (r.f1 + f1_score(r.tn, r.fn, r.fp));
  return r;
}

ConsistencyReport consistency_analysis(std::span<const Probs> student, std::span<const Probs> teacher) {
  if (student.size() != teacher.size())
    throw DataError("student and teacher prediction counts differ (" + std::to_string(student.size()) + " vs " +
                    std::to_string(teacher.size()) + ")");
  ConsistencyReport r;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const bool s = predicts_bot(student[i]);
    const bool t = predicts_bot(teacher[i]);
    ++r.quadrants[s][t];
    if (s == t) ++agree;
    r.points.emplace_back(student[i][1], teacher[i][1]);
  }
  r.agreement_rate = student.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(student.size());
  return r;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace lmbot
