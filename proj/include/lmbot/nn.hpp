#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmbot/random.hpp"

namespace lmbot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr double kLeakySlope = 0.01;

/// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParameterRefs = std::vector<Parameter*>;

double squared_norm(const ParameterRefs& params);

/// Adds 2 * coeff * theta to every gradient and returns coeff * sum(theta^2).
double add_l2(const ParameterRefs& params, double coeff);

void zero_grads(const ParameterRefs& params);

/// Order-sensitive fingerprint of parameter values.
std::uint64_t parameter_hash(const ParameterRefs& params);

/// Gaussian init with the given standard deviation.
Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer init.
Matrix fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);

class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; the L2 term lives in the loss
  };

  explicit AdamW(Options options) : opt_(options) {}

  void step(const ParameterRefs& params);
  long steps() const { return t_; }

 private:
  Options opt_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

inline double leaky_relu(double x, double slope = kLeakySlope) { return x > 0 ? x : slope * x; }
inline double leaky_relu_grad(double x, double slope = kLeakySlope) { return x > 0 ? 1.0 : slope; }

Matrix leaky_relu(const Matrix& x, double slope = kLeakySlope);
/// Multiplies `upstream` elementwise by LeakyReLU'(pre).
Matrix leaky_relu_backward(const Matrix& pre, const Matrix& upstream, double slope = kLeakySlope);

using Probs = std::array<double, 2>;

/// Numerically stable softmax of a two-logit row, optionally divided by T.
Probs softmax2(double a, double b, double temperature = 1.0);
Probs log_softmax2(double a, double b, double temperature = 1.0);

/// -log softmax(logits)[label].
double cross_entropy(const Eigen::Vector2d& logits, int label);

/// sum_c target_c (log target_c - log softmax(logits / T)_c), with 0 log 0 = 0.
double kl_divergence(const Probs& target, const Eigen::Vector2d& logits, double temperature = 1.0);

double entropy(const Probs& p);

/// Inverted-dropout mask: entries are 0 or 1/(1-p).
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng);

/// Binary parameter blob: magic, count, then (name, rows, cols, doubles).
void save_parameters(const std::filesystem::path& file, const ParameterRefs& params);
/// Loads into already-shaped parameters, checking names and shapes.
void load_parameters(const std::filesystem::path& file, const ParameterRefs& params);

}  // namespace lmbot
