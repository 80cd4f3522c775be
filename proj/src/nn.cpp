#include "lmbot/nn.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

double squared_norm(const ParameterRefs& params) {
  double s = 0.0;
  for (const auto* p : params) s += p->value.squaredNorm();
  return s;
}

double add_l2(const ParameterRefs& params, double coeff) {
  if (coeff == 0.0) return 0.0;
  double s = 0.0;
  for (auto* p : params) {
    s += p->value.squaredNorm();
    p->grad += (2.0 * coeff) * p->value;
  }
  return coeff * s;
}

void zero_grads(const ParameterRefs& params) {
  for (auto* p : params) p->zero_grad();
}

std::uint64_t parameter_hash(const ParameterRefs& params) {
  std::uint64_t h = fnv1a("");
  for (const auto* p : params) {
    h = fnv1a(p->name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                               static_cast<std::size_t>(p->value.size()) * sizeof(double)),
              h);
  }
  return h;
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

Matrix fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(cols, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

void AdamW::step(const ParameterRefs& params) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw TrainingError("optimizer parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (!p->grad.allFinite()) throw TrainingError("non-finite gradient in parameter " + p->name);
    if (opt_.weight_decay != 0.0) p->value *= (1.0 - opt_.lr * opt_.weight_decay);
    m_[k] = opt_.beta1 * m_[k] + (1.0 - opt_.beta1) * p->grad;
    v_[k] = opt_.beta2 * v_[k] + (1.0 - opt_.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= opt_.lr * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + opt_.eps);
  }
}

Matrix leaky_relu(const Matrix& x, double slope) {
  return x.unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
}

Matrix leaky_relu_backward(const Matrix& pre, const Matrix& upstream, double slope) {
  return upstream.binaryExpr(pre, [slope](double g, double v) { return v > 0 ? g : slope * g; });
}

Probs log_softmax2(double a, double b, double temperature) {
  a /= temperature;
  b /= temperature;
  const double m = std::max(a, b);
  const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
  return {a - lse, b - lse};
}

Probs softmax2(double a, double b, double temperature) {
  const auto l = log_softmax2(a, b, temperature);
  return {std::exp(l[0]), std::exp(l[1])};
}

double cross_entropy(const Eigen::Vector2d& logits, int label) {
  return -log_softmax2(logits(0), logits(1))[static_cast<std::size_t>(label)];
}

double kl_divergence(const Probs& target, const Eigen::Vector2d& logits, double temperature) {
  const auto logq = log_softmax2(logits(0), logits(1), temperature);
  double kl = 0.0;
  for (std::size_t c = 0; c < 2; ++c)
    if (target[c] > 0.0) kl += target[c] * (std::log(target[c]) - logq[c]);
  return kl;
}

double entropy(const Probs& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  if (p <= 0.0) return Matrix::Ones(rows, cols);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep = 1.0 / (1.0 - p);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = unit(rng) < p ? 0.0 : keep;
  return m;
}

namespace {
constexpr char kMagic[8] = {'L', 'M', 'B', 'P', 'A', 'R', '0', '1'};

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::filesystem::path& file) {
  if (pos + sizeof(T) > in.size()) throw DataError(file.string() + ": truncated parameter blob");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace

void save_parameters(const std::filesystem::path& file, const ParameterRefs& params) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint64_t>(out, params.size());
  for (const auto* p : params) {
    put<std::uint64_t>(out, p->name.size());
    out += p->name;
    put<std::int64_t>(out, p->value.rows());
    put<std::int64_t>(out, p->value.cols());
    out.append(reinterpret_cast<const char*>(p->value.data()), static_cast<std::size_t>(p->value.size()) * sizeof(double));
  }
  write_file_atomic(file, out);
}

void load_parameters(const std::filesystem::path& file, const ParameterRefs& params) {
  const std::string in = read_file(file);
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(file.string() + ": not a parameter blob");
  std::size_t pos = sizeof kMagic;
  const auto count = get<std::uint64_t>(in, pos, file);
  if (count != params.size()) throw DataError(file.string() + ": parameter count mismatch");
  for (auto* p : params) {
    const auto len = get<std::uint64_t>(in, pos, file);
    if (pos + len > in.size()) throw DataError(file.string() + ": truncated parameter blob");
    const std::string name = in.substr(pos, len);
    pos += len;
    const auto rows = get<std::int64_t>(in, pos, file);
    const auto cols = get<std::int64_t>(in, pos, file);
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols())
      throw DataError(file.string() + ": parameter '" + name + "' does not match model layout");
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (pos + bytes > in.size()) throw DataError(file.string() + ": truncated parameter blob");
    std::memcpy(p->value.data(), in.data() + pos, bytes);
    pos += bytes;
    p->zero_grad();
  }
}

}  // namespace lmbot
