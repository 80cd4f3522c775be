#include "lmbot/lm_encoder.hpp"

#include <cmath>

#include "lmbot/error.hpp"

namespace lmbot {

BagOfEmbeddings::BagOfEmbeddings(std::size_t vocab_size, Eigen::Index width, Rng& rng)
    : table_("encoder.embedding",
             random_normal(static_cast<Eigen::Index>(vocab_size), width, 1.0 / std::sqrt(static_cast<double>(width)), rng)) {}

Matrix BagOfEmbeddings::hidden_states(const TextualSequence& seq) const {
  Matrix h(static_cast<Eigen::Index>(seq.length()), width());
  for (std::size_t j = 0; j < seq.length(); ++j) h.row(static_cast<Eigen::Index>(j)) = table_.value.row(seq.tokens[j]);
  return h;
}

void BagOfEmbeddings::backward(const TextualSequence& seq, const Matrix& d_hidden) {
  for (std::size_t j = 0; j < seq.length(); ++j) table_.grad.row(seq.tokens[j]) += d_hidden.row(static_cast<Eigen::Index>(j));
}

nlohmann::json BagOfEmbeddings::describe() const {
  return {{"kind", kind()}, {"vocab_size", table_.value.rows()}, {"width", width()}};
}

PositionalEncoder::PositionalEncoder(std::size_t vocab_size, std::size_t max_length, Eigen::Index width, Rng& rng)
    : tokens_("encoder.token_embedding",
              random_normal(static_cast<Eigen::Index>(vocab_size), width, 1.0 / std::sqrt(static_cast<double>(width)), rng)),
      positions_("encoder.position_embedding", random_normal(static_cast<Eigen::Index>(max_length), width,
                                                             0.1 / std::sqrt(static_cast<double>(width)), rng)) {}

Matrix PositionalEncoder::hidden_states(const TextualSequence& seq) const {
  if (seq.length() > static_cast<std::size_t>(positions_.value.rows()))
    throw ConfigError("sequence longer than the positional table");
  Matrix h(static_cast<Eigen::Index>(seq.length()), width());
  for (std::size_t j = 0; j < seq.length(); ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    h.row(row) = (tokens_.value.row(seq.tokens[j]) + positions_.value.row(row)).array().tanh();
  }
  return h;
}

void PositionalEncoder::backward(const TextualSequence& seq, const Matrix& d_hidden) {
  const Matrix h = hidden_states(seq);
  for (std::size_t j = 0; j < seq.length(); ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    const RowVector d_pre = d_hidden.row(row).array() * (1.0 - h.row(row).array().square());
    tokens_.grad.row(seq.tokens[j]) += d_pre;
    positions_.grad.row(row) += d_pre;
  }
}

nlohmann::json PositionalEncoder::describe() const {
  return {{"kind", kind()}, {"vocab_size", tokens_.value.rows()}, {"width", width()}, {"max_length", positions_.value.rows()}};
}

std::unique_ptr<EncoderBackend> make_backend(const std::string& kind, std::size_t vocab_size, std::size_t max_length,
                                             Eigen::Index width, Rng& rng) {
  if (width < 1) throw ConfigError("encoder width must be positive");
  if (kind == "bag") return std::make_unique<BagOfEmbeddings>(vocab_size, width, rng);
  if (kind == "positional") return std::make_unique<PositionalEncoder>(vocab_size, max_length, width, rng);
  throw ConfigError("unknown encoder backend '" + kind + "'");
}

namespace {

// Row j of d_hidden receives d_z / count for every non-padding token.
std::vector<Eigen::Index> content_rows(const TextualSequence& seq) {
  std::vector<Eigen::Index> rows;
  for (std::size_t j = 0; j < seq.length(); ++j)
    if (seq.tokens[j] != 0) rows.push_back(static_cast<Eigen::Index>(j));
  return rows;
}

}  // namespace

Vector encode_user(const EncoderBackend& backend, const TextualSequence& seq) {
  const auto rows = content_rows(seq);
  if (rows.empty()) throw DataError("cannot encode a zero-length sequence");
  const Matrix h = backend.hidden_states(seq);
  Vector z = Vector::Zero(backend.width());
  for (auto r : rows) z += h.row(r).transpose();
  return z / static_cast<double>(rows.size());
}

ClassifierHead::ClassifierHead(Eigen::Index input_width, const std::vector<Eigen::Index>& hidden_widths, Rng& rng) {
  Eigen::Index in = input_width;
  std::vector<Eigen::Index> outs = hidden_widths;
  outs.push_back(2);
  for (std::size_t l = 0; l < outs.size(); ++l) {
    if (outs[l] < 1) throw ConfigError("head layer widths must be positive");
    weights_.emplace_back("head.w" + std::to_string(l), fan_in_uniform(outs[l], in, rng));
    biases_.emplace_back("head.b" + std::to_string(l), Matrix::Zero(outs[l], 1));
    in = outs[l];
  }
}

std::vector<Eigen::Index> ClassifierHead::hidden_widths() const {
  std::vector<Eigen::Index> out;
  for (std::size_t l = 0; l + 1 < weights_.size(); ++l) out.push_back(weights_[l].value.rows());
  return out;
}

ParameterRefs ClassifierHead::parameters() {
  ParameterRefs refs;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    refs.push_back(&weights_[l]);
    refs.push_back(&biases_[l]);
  }
  return refs;
}

Eigen::Vector2d ClassifierHead::forward(const Vector& z, Trace* trace, double dropout, Rng* rng) const {
  if (z.size() != input_width())
    throw ConfigError("embedding width " + std::to_string(z.size()) + " does not match head input width " +
                      std::to_string(input_width()));
  Vector x = z;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (rng && dropout > 0.0) {
      Vector mask = dropout_mask(x.size(), 1, dropout, *rng);
      x = x.cwiseProduct(mask);
      if (trace) trace->masks.push_back(std::move(mask));
    } else if (trace) {
      trace->masks.push_back(Vector::Ones(x.size()));
    }
    Vector pre = weights_[l].value * x + biases_[l].value;
    if (trace) {
      trace->inputs.push_back(x);
      trace->pre.push_back(pre);
    }
    x = leaky_relu(pre);
  }
  return x;
}

Vector ClassifierHead::backward(const Trace& trace, const Eigen::Vector2d& d_logits) {
  Vector d = d_logits;
  for (std::size_t l = weights_.size(); l-- > 0;) {
    const Vector d_pre = leaky_relu_backward(trace.pre[l], d);
    weights_[l].grad.noalias() += d_pre * trace.inputs[l].transpose();
    biases_[l].grad += d_pre;
    d = (weights_[l].value.transpose() * d_pre).cwiseProduct(trace.masks[l]);
  }
  return d;
}

Eigen::Vector2d classify(const Vector& embedding, const ClassifierHead& head) { return head.forward(embedding); }

StudentModel::StudentModel(std::unique_ptr<EncoderBackend> backend, ClassifierHead head, double dropout)
    : backend_(std::move(backend)), head_(std::move(head)), dropout_(dropout) {
  if (!backend_) throw ConfigError("student requires an encoder backend");
  if (backend_->width() != head_.input_width()) throw ConfigError("encoder width does not match head input width");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lm dropout must lie in [0, 1)");
}

StudentModel::StudentModel(const StudentModel& other)
    : backend_(other.backend_->clone()), head_(other.head_), dropout_(other.dropout_) {}

StudentModel& StudentModel::operator=(const StudentModel& other) {
  if (this != &other) {
    backend_ = other.backend_->clone();
    head_ = other.head_;
    dropout_ = other.dropout_;
  }
  return *this;
}

ParameterRefs StudentModel::parameters() {
  auto refs = backend_->parameters();
  for (auto* p : head_.parameters()) refs.push_back(p);
  return refs;
}

void StudentLossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(lambda1 >= 0.0)) throw ConfigError("lambda1 must be non-negative");
}

StudentLoss student_objective(StudentModel& model, std::span<const StudentExample> batch, const StudentLossConfig& cfg,
                              Rng* dropout_rng, bool accumulate) {
  cfg.validate();
  auto params = model.parameters();
  if (accumulate) zero_grads(params);

  StudentLoss loss;
  const double T = cfg.temperature;
  for (const auto& ex : batch) {
    if (!ex.sequence) throw DataError("student example without a sequence");
    const auto rows = content_rows(*ex.sequence);
    if (rows.empty()) throw DataError("cannot encode a zero-length sequence");
    const Matrix h = model.backend().hidden_states(*ex.sequence);
    Vector z = Vector::Zero(model.backend().width());
    for (auto r : rows) z += h.row(r).transpose();
    z /= static_cast<double>(rows.size());

    ClassifierHead::Trace trace;
    const Eigen::Vector2d logits = model.head().forward(z, &trace, model.dropout(), dropout_rng);
    Eigen::Vector2d d_logits = Eigen::Vector2d::Zero();

    if (ex.hard) {
      const int y = static_cast<int>(*ex.hard);
      loss.hard += cross_entropy(logits, y);
      const auto p = softmax2(logits(0), logits(1));
      d_logits(0) += (1.0 - cfg.alpha) * (p[0] - (y == 0 ? 1.0 : 0.0));
      d_logits(1) += (1.0 - cfg.alpha) * (p[1] - (y == 1 ? 1.0 : 0.0));
    }
    if (ex.soft) {
      const Probs& target = *ex.soft;
      if (cfg.classic_kd) {
        loss.soft += T * T * kl_divergence(target, logits, T);
        const auto q = softmax2(logits(0), logits(1), T);
        d_logits(0) += cfg.alpha * T * (q[0] - target[0]);
        d_logits(1) += cfg.alpha * T * (q[1] - target[1]);
      } else {
        loss.soft += kl_divergence(target, logits);
        const auto q = softmax2(logits(0), logits(1));
        d_logits(0) += cfg.alpha * (q[0] - target[0]);
        d_logits(1) += cfg.alpha * (q[1] - target[1]);
      }
    }

    if (accumulate) {
      const Vector dz = model.head().backward(trace, d_logits) / static_cast<double>(rows.size());
      Matrix d_hidden = Matrix::Zero(h.rows(), h.cols());
      for (auto r : rows) d_hidden.row(r) = dz.transpose();
      model.backend().backward(*ex.sequence, d_hidden);
    }
  }
  loss.l2 = accumulate ? add_l2(params, cfg.lambda1) : cfg.lambda1 * squared_norm(params);
  loss.total = (1.0 - cfg.alpha) * loss.hard + cfg.alpha * loss.soft + loss.l2;
  if (!std::isfinite(loss.total)) throw TrainingError("student loss is not finite");
  return loss;
}

double lm_finetune_step(StudentModel& model, AdamW& optimizer, std::span<const StudentExample> batch, double lambda1,
                        Rng& rng) {
  for (const auto& ex : batch)
    if (!ex.hard) throw DataError("finetuning batch contains an unlabeled example");
  StudentLossConfig cfg;
  cfg.alpha = 0.0;
  cfg.lambda1 = lambda1;
  const auto loss = student_objective(model, batch, cfg, &rng, true);
  optimizer.step(model.parameters());
  return loss.total;
}

double lm_distill_step(StudentModel& model, AdamW& optimizer, std::span<const DistillItem> batch,
                       const SoftLabelTable& soft_labels, const StudentLossConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<StudentExample> examples;
  examples.reserve(batch.size());
  for (const auto& item : batch) {
    StudentExample ex{item.sequence, item.hard, std::nullopt};
    if (item.soft_member) {
      const Probs* row = soft_labels.find(item.node);
      if (!row) throw DataError("missing soft label for node " + std::to_string(item.node));
      ex.soft = *row;
    }
    examples.push_back(ex);
  }
  const auto loss = student_objective(model, examples, cfg, &rng, true);
  optimizer.step(model.parameters());
  return loss.total;
}

Probs predict(const StudentModel& model, const TextualSequence& seq) {
  const Eigen::Vector2d logits = classify(encode_user(model.backend(), seq), model.head());
  return softmax2(logits(0), logits(1));
}

}  // namespace lmbot
