#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmbot/corpus.hpp"
#include "lmbot/nn.hpp"
#include "lmbot/serialize.hpp"
#include "lmbot/soft_labels.hpp"

namespace lmbot {

/// Maps a token sequence to per-token hidden vectors (length x width).
/// A pretrained encoder plugs in here; the desk backends below are small and
/// trained from scratch.
class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;

  virtual std::string kind() const = 0;
  virtual Eigen::Index width() const = 0;
  virtual Matrix hidden_states(const TextualSequence& seq) const = 0;
  /// Accumulates parameter gradients given d(loss)/d(hidden_states).
  virtual void backward(const TextualSequence& seq, const Matrix& d_hidden) = 0;
  virtual ParameterRefs parameters() = 0;
  virtual std::unique_ptr<EncoderBackend> clone() const = 0;
  virtual nlohmann::json describe() const = 0;
};

/// Token embedding lookup; mean pooling over it is a bag of embeddings and
/// therefore order-invariant.
class BagOfEmbeddings final : public EncoderBackend {
 public:
  BagOfEmbeddings(std::size_t vocab_size, Eigen::Index width, Rng& rng);

  std::string kind() const override { return "bag"; }
  Eigen::Index width() const override { return table_.value.cols(); }
  Matrix hidden_states(const TextualSequence& seq) const override;
  void backward(const TextualSequence& seq, const Matrix& d_hidden) override;
  ParameterRefs parameters() override { return {&table_}; }
  std::unique_ptr<EncoderBackend> clone() const override { return std::make_unique<BagOfEmbeddings>(*this); }
  nlohmann::json describe() const override;

 private:
  Parameter table_;
};

/// tanh(token embedding + learned position embedding): order-sensitive.
class PositionalEncoder final : public EncoderBackend {
 public:
  PositionalEncoder(std::size_t vocab_size, std::size_t max_length, Eigen::Index width, Rng& rng);

  std::string kind() const override { return "positional"; }
  Eigen::Index width() const override { return tokens_.value.cols(); }
  Matrix hidden_states(const TextualSequence& seq) const override;
  void backward(const TextualSequence& seq, const Matrix& d_hidden) override;
  ParameterRefs parameters() override { return {&tokens_, &positions_}; }
  std::unique_ptr<EncoderBackend> clone() const override { return std::make_unique<PositionalEncoder>(*this); }
  nlohmann::json describe() const override;

 private:
  Parameter tokens_;
  Parameter positions_;
};

std::unique_ptr<EncoderBackend> make_backend(const std::string& kind, std::size_t vocab_size, std::size_t max_length,
                                             Eigen::Index width, Rng& rng);

/// Mean of the per-token hidden vectors, padding excluded.
Vector encode_user(const EncoderBackend& backend, const TextualSequence& seq);

/// L affine layers, each followed by LeakyReLU; final width 2.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(Eigen::Index input_width, const std::vector<Eigen::Index>& hidden_widths, Rng& rng);

  struct Trace {
    std::vector<Vector> inputs;  // post-dropout input of each layer
    std::vector<Vector> pre;     // pre-activation of each layer
    std::vector<Vector> masks;
  };

  Eigen::Vector2d forward(const Vector& z, Trace* trace = nullptr, double dropout = 0.0, Rng* rng = nullptr) const;
  /// Accumulates gradients and returns d(loss)/d(z).
  Vector backward(const Trace& trace, const Eigen::Vector2d& d_logits);

  Eigen::Index input_width() const { return weights_.empty() ? 0 : weights_.front().value.cols(); }
  std::size_t depth() const { return weights_.size(); }
  std::vector<Eigen::Index> hidden_widths() const;
  ParameterRefs parameters();

  Parameter& weight(std::size_t l) { return weights_.at(l); }
  Parameter& bias(std::size_t l) { return biases_.at(l); }

 private:
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

Eigen::Vector2d classify(const Vector& embedding, const ClassifierHead& head);

/// Encoder backend plus classification head.
class StudentModel {
 public:
  StudentModel(std::unique_ptr<EncoderBackend> backend, ClassifierHead head, double dropout);
  StudentModel(const StudentModel& other);
  StudentModel& operator=(const StudentModel& other);
  StudentModel(StudentModel&&) noexcept = default;
  StudentModel& operator=(StudentModel&&) noexcept = default;

  EncoderBackend& backend() { return *backend_; }
  const EncoderBackend& backend() const { return *backend_; }
  ClassifierHead& head() { return head_; }
  const ClassifierHead& head() const { return head_; }
  double dropout() const { return dropout_; }

  ParameterRefs parameters();

 private:
  std::unique_ptr<EncoderBackend> backend_;
  ClassifierHead head_;
  double dropout_ = 0.0;
};

struct StudentLossConfig {
  double alpha = 0.5;
  double temperature = 3.0;
  double lambda1 = 1e-2;
  // Student log-probabilities at temperature T and a T^2 factor on the soft
  // term, as in classic distillation. Off by default.
  bool classic_kd = false;

  void validate() const;
};

struct StudentExample {
  const TextualSequence* sequence = nullptr;
  std::optional<Label> hard;   // present iff the user is in the hard-label set
  std::optional<Probs> soft;   // present iff the user is in the soft-label set
};

struct StudentLoss {
  double hard = 0.0;  // summed cross-entropy
  double soft = 0.0;  // summed KL(teacher || student)
  double l2 = 0.0;
  double total = 0.0;
};

/// (1 - alpha) * CE(hard) + alpha * KL(soft || student) + lambda1 * sum(theta^2),
/// summed over the batch. With `accumulate` the gradients are zeroed and then
/// filled; dropout is applied only when `dropout_rng` is given.
StudentLoss student_objective(StudentModel& model, std::span<const StudentExample> batch, const StudentLossConfig& cfg,
                              Rng* dropout_rng, bool accumulate);

/// Cross-entropy on hard labels plus L2, then one optimizer update.
double lm_finetune_step(StudentModel& model, AdamW& optimizer, std::span<const StudentExample> batch, double lambda1,
                        Rng& rng);

struct DistillItem {
  const TextualSequence* sequence = nullptr;
  std::size_t node = 0;
  std::optional<Label> hard;
  bool soft_member = false;
};

/// Combined hard/soft objective then one optimizer update. Soft rows
/// are taken from `soft_labels`; a soft member without a row is an error.
double lm_distill_step(StudentModel& model, AdamW& optimizer, std::span<const DistillItem> batch,
                       const SoftLabelTable& soft_labels, const StudentLossConfig& cfg, Rng& rng);

/// Eval-mode bot/human probabilities from the user's own text only.
Probs predict(const StudentModel& model, const TextualSequence& seq);

}  // namespace lmbot
