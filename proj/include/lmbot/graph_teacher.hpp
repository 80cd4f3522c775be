#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SparseCore>
#include <nlohmann/json.hpp>

#include "lmbot/corpus.hpp"
#include "lmbot/nn.hpp"
#include "lmbot/soft_labels.hpp"

namespace lmbot {

enum class TeacherKind { relational_gnn, attention_gnn, plain_gnn, mlp };

std::string to_string(TeacherKind kind);
TeacherKind parse_teacher_kind(const std::string& text);
inline bool uses_graph(TeacherKind kind) { return kind != TeacherKind::mlp; }

struct TeacherConfig {
  TeacherKind kind = TeacherKind::relational_gnn;
  int layers = 2;
  int hidden = 128;
  double dropout = 0.4;
  double lambda2 = 1e-5;
  double lr = 5e-4;
  int max_epochs = 300;
  int patience = 30;

  void validate() const;
};

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Precomputed propagation operators for one graph. Row i of a mean operator
/// holds 1/|N(i)| for each in-neighbour j (edge j -> i); rows of nodes with no
/// in-neighbours are empty, so they aggregate to zero.
struct GraphOperators {
  std::size_t num_nodes = 0;
  std::vector<std::string> relation_names;
  std::vector<SparseRowMatrix> relation_mean;
  std::vector<SparseRowMatrix> relation_mean_t;
  SparseRowMatrix merged_mean;  // over all relations, for the homogeneous layers
  SparseRowMatrix merged_mean_t;
  // In-edges grouped by destination (CSR), for attention.
  std::vector<std::size_t> in_offsets;
  std::vector<std::size_t> in_sources;
};

GraphOperators make_graph_operators(const HeteroGraph& graph);

/// Parameters of one message-passing (or MLP) layer.
struct LayerParams {
  Parameter self_weight;                  // hidden x hidden
  Parameter bias;                         // hidden x 1
  std::vector<Parameter> neighbor_weights;  // one per relation (relational) or one shared
  Parameter attention_src;                // hidden x 1, attention kind only
  Parameter attention_dst;

  ParameterRefs parameters(TeacherKind kind);
};

LayerParams make_layer_params(TeacherKind kind, int hidden, std::size_t num_relations, Rng& rng,
                              const std::string& prefix);

/// One layer over node states (rows = nodes).
///   relational: LeakyReLU(W_self h_i + b + sum_r mean_{j in N_r(i)} W_r h_j)
///   plain:      LeakyReLU(W_self h_i + b + mean_{j in N(i)} W h_j)
///   attention:  LeakyReLU(W_self h_i + b + sum_j att_ij W h_j), att softmax over N(i)
///   mlp:        LeakyReLU(W_self h_i + b)
Matrix message_passing_layer(const Matrix& states, const GraphOperators* graph, LayerParams& params, TeacherKind kind);

class TeacherModel {
 public:
  TeacherModel(const TeacherConfig& cfg, Eigen::Index input_width, std::vector<std::string> relation_names, Rng& rng);

  struct LayerTrace {
    Matrix input;  // post-dropout
    Matrix mask;
    Matrix pre;
    std::vector<Matrix> aggregated;  // A_r * input per relation (relational/plain)
    Matrix messages;                 // input * W^T (attention)
    std::vector<double> edge_pre;    // attention scores before LeakyReLU
    std::vector<double> edge_weight; // attention coefficients
  };

  struct Trace {
    Matrix embeddings;
    Matrix projected;
    std::vector<LayerTrace> layers;
    Matrix final_pre;  // h^(L)
    Matrix out_mask;
    Matrix out_input;  // dropout(LeakyReLU(h^(L)))
  };

  /// Logits for every node (N x 2). Dropout only when `rng` is given.
  Matrix forward(const Matrix& embeddings, const GraphOperators* graph, Rng* rng = nullptr, Trace* trace = nullptr);
  void backward(const Trace& trace, const GraphOperators* graph, const Matrix& d_logits);

  ParameterRefs parameters();
  const TeacherConfig& config() const { return cfg_; }
  const std::vector<std::string>& relation_names() const { return relation_names_; }
  Eigen::Index input_width() const { return in_weight_.value.cols(); }

  LayerParams& layer(std::size_t l) { return layers_.at(l); }
  Parameter& input_weight() { return in_weight_; }
  Parameter& input_bias() { return in_bias_; }
  Parameter& output_weight() { return out_weight_; }
  Parameter& output_bias() { return out_bias_; }

  nlohmann::json describe() const;

 private:
  void layer_forward(std::size_t l, const Matrix& input, const GraphOperators* graph, LayerTrace& t);
  Matrix layer_backward(std::size_t l, const LayerTrace& t, const GraphOperators* graph, const Matrix& d_out);

  TeacherConfig cfg_;
  std::vector<std::string> relation_names_;
  Parameter in_weight_, in_bias_;
  std::vector<LayerParams> layers_;
  Parameter out_weight_, out_bias_;
};

/// Input projection, L layers, then W_o LeakyReLU(h^(L)) + b_o.
Matrix teacher_forward(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph);

using HardLabels = std::vector<std::pair<std::size_t, Label>>;

/// Summed cross-entropy over the labeled nodes plus lambda2 * sum(theta^2).
double teacher_objective(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph,
                         const HardLabels& labels, Rng* dropout_rng, bool accumulate);

/// One full-graph optimizer update. The embeddings are constants.
double teacher_train_step(TeacherModel& model, AdamW& optimizer, const Matrix& embeddings, const GraphOperators* graph,
                          const HardLabels& labels, Rng& rng);

/// softmax(logits_i / T) for every i in `nodes`.
SoftLabelTable make_soft_labels(const Matrix& logits, double temperature, const std::vector<std::size_t>& nodes,
                                std::string source = {});

}  // namespace lmbot
