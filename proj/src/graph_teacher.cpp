#include "lmbot/graph_teacher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lmbot/error.hpp"

namespace lmbot {

std::string to_string(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::relational_gnn: return "relational_gnn";
    case TeacherKind::attention_gnn: return "attention_gnn";
    case TeacherKind::plain_gnn: return "plain_gnn";
    case TeacherKind::mlp: return "mlp";
  }
  return "?";
}

TeacherKind parse_teacher_kind(const std::string& text) {
  if (text == "relational_gnn" || text == "rgcn") return TeacherKind::relational_gnn;
  if (text == "attention_gnn" || text == "gat") return TeacherKind::attention_gnn;
  if (text == "plain_gnn" || text == "gcn") return TeacherKind::plain_gnn;
  if (text == "mlp") return TeacherKind::mlp;
  throw ConfigError("unknown teacher kind '" + text + "'");
}

void TeacherConfig::validate() const {
  if (layers < 1) throw ConfigError("gnn.layers must be >= 1");
  if (hidden < 1) throw ConfigError("gnn.hidden must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("gnn.dropout must lie in [0, 1)");
  if (!(lambda2 >= 0.0)) throw ConfigError("gnn.l2 must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("gnn.lr must be positive");
  if (max_epochs < 0) throw ConfigError("gnn.max_epochs must be non-negative");
  if (patience < 1) throw ConfigError("gnn.patience must be >= 1");
}

namespace {

SparseRowMatrix mean_operator(std::size_t n, const std::vector<const std::vector<Edge>*>& lists) {
  std::vector<double> degree(n, 0.0);
  for (const auto* edges : lists)
    for (const auto& e : *edges) degree[e.dst] += 1.0;
  std::vector<Eigen::Triplet<double>> triplets;
  for (const auto* edges : lists)
    for (const auto& e : *edges)
      triplets.emplace_back(static_cast<int>(e.dst), static_cast<int>(e.src), 1.0 / degree[e.dst]);
  SparseRowMatrix a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  a.setFromTriplets(triplets.begin(), triplets.end());
  return a;
}

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Sparse-dense product through a row-major copy; much faster than against
// column-major storage.
Matrix spmm(const SparseRowMatrix& a, const Matrix& x) {
  const RowMajorMatrix xr = x;
  RowMajorMatrix out = a * xr;
  return out;
}

Matrix add_bias(Matrix m, const Parameter& bias) {
  m.rowwise() += bias.value.col(0).transpose();
  return m;
}

}  // namespace

GraphOperators make_graph_operators(const HeteroGraph& graph) {
  GraphOperators ops;
  ops.num_nodes = graph.num_nodes();
  std::vector<const std::vector<Edge>*> all;
  for (const auto& [name, edges] : graph.relations) {
    for (const auto& e : edges)
      if (e.src >= ops.num_nodes || e.dst >= ops.num_nodes) throw DataError("edge endpoint out of range in " + name);
    ops.relation_names.push_back(name);
    ops.relation_mean.push_back(mean_operator(ops.num_nodes, {&edges}));
    ops.relation_mean_t.emplace_back(ops.relation_mean.back().transpose());
    all.push_back(&edges);
  }
  ops.merged_mean = mean_operator(ops.num_nodes, all);
  ops.merged_mean_t = ops.merged_mean.transpose();

  ops.in_offsets.assign(ops.num_nodes + 1, 0);
  for (const auto* edges : all)
    for (const auto& e : *edges) ++ops.in_offsets[e.dst + 1];
  for (std::size_t i = 0; i < ops.num_nodes; ++i) ops.in_offsets[i + 1] += ops.in_offsets[i];
  ops.in_sources.assign(ops.in_offsets.back(), 0);
  std::vector<std::size_t> fill(ops.in_offsets.begin(), ops.in_offsets.end() - 1);
  for (const auto* edges : all)
    for (const auto& e : *edges) ops.in_sources[fill[e.dst]++] = e.src;
  return ops;
}

ParameterRefs LayerParams::parameters(TeacherKind kind) {
  ParameterRefs refs{&self_weight, &bias};
  for (auto& w : neighbor_weights) refs.push_back(&w);
  if (kind == TeacherKind::attention_gnn) {
    refs.push_back(&attention_src);
    refs.push_back(&attention_dst);
  }
  return refs;
}

LayerParams make_layer_params(TeacherKind kind, int hidden, std::size_t num_relations, Rng& rng,
                              const std::string& prefix) {
  const Eigen::Index h = hidden;
  LayerParams p;
  p.self_weight = Parameter(prefix + ".self_weight", fan_in_uniform(h, h, rng));
  p.bias = Parameter(prefix + ".bias", Matrix::Zero(h, 1));
  switch (kind) {
    case TeacherKind::relational_gnn:
      for (std::size_t r = 0; r < num_relations; ++r)
        p.neighbor_weights.emplace_back(prefix + ".relation_weight" + std::to_string(r), fan_in_uniform(h, h, rng));
      break;
    case TeacherKind::plain_gnn:
      p.neighbor_weights.emplace_back(prefix + ".neighbor_weight", fan_in_uniform(h, h, rng));
      break;
    case TeacherKind::attention_gnn: {
      p.neighbor_weights.emplace_back(prefix + ".message_weight", fan_in_uniform(h, h, rng));
      const double sd = 1.0 / std::sqrt(static_cast<double>(h));
      p.attention_src = Parameter(prefix + ".attention_src", random_normal(h, 1, sd, rng));
      p.attention_dst = Parameter(prefix + ".attention_dst", random_normal(h, 1, sd, rng));
      break;
    }
    case TeacherKind::mlp: break;
  }
  return p;
}

namespace {

void check_graph(const GraphOperators* graph, TeacherKind kind, Eigen::Index rows, std::size_t relations) {
  if (!uses_graph(kind)) return;
  if (!graph) throw ConfigError("teacher kind " + to_string(kind) + " requires a graph");
  if (static_cast<Eigen::Index>(graph->num_nodes) != rows)
    throw ConfigError("node state rows do not match graph node count");
  if (kind == TeacherKind::relational_gnn && graph->relation_mean.size() != relations)
    throw ConfigError("graph relation count does not match the teacher");
}

// Attention aggregation; fills edge traces and returns the aggregate.
Matrix attention_aggregate(const Matrix& messages, const GraphOperators& g, const Parameter& a_src,
                           const Parameter& a_dst, std::vector<double>& edge_pre, std::vector<double>& edge_weight) {
  const RowMajorMatrix msg = messages;
  const Vector s_src = messages * a_src.value.col(0);
  const Vector s_dst = messages * a_dst.value.col(0);
  RowMajorMatrix agg = RowMajorMatrix::Zero(messages.rows(), messages.cols());
  edge_pre.assign(g.in_sources.size(), 0.0);
  edge_weight.assign(g.in_sources.size(), 0.0);
  for (std::size_t i = 0; i < g.num_nodes; ++i) {
    const std::size_t b = g.in_offsets[i], e = g.in_offsets[i + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = b; k < e; ++k) {
      edge_pre[k] = s_src(static_cast<Eigen::Index>(g.in_sources[k])) + s_dst(static_cast<Eigen::Index>(i));
      mx = std::max(mx, leaky_relu(edge_pre[k]));
    }
    double z = 0.0;
    for (std::size_t k = b; k < e; ++k) {
      edge_weight[k] = std::exp(leaky_relu(edge_pre[k]) - mx);
      z += edge_weight[k];
    }
    for (std::size_t k = b; k < e; ++k) {
      edge_weight[k] /= z;
      agg.row(static_cast<Eigen::Index>(i)) += edge_weight[k] * msg.row(static_cast<Eigen::Index>(g.in_sources[k]));
    }
  }
  return agg;
}

}  // namespace

Matrix message_passing_layer(const Matrix& states, const GraphOperators* graph, LayerParams& params, TeacherKind kind) {
  if (states.cols() != params.self_weight.value.cols())
    throw ConfigError("state width " + std::to_string(states.cols()) + " does not match layer width " +
                      std::to_string(params.self_weight.value.cols()));
  check_graph(graph, kind, states.rows(), params.neighbor_weights.size());
  Matrix pre = add_bias(states * params.self_weight.value.transpose(), params.bias);
  switch (kind) {
    case TeacherKind::relational_gnn:
      for (std::size_t r = 0; r < params.neighbor_weights.size(); ++r)
        pre.noalias() += spmm(graph->relation_mean[r], states) * params.neighbor_weights[r].value.transpose();
      break;
    case TeacherKind::plain_gnn:
      pre.noalias() += spmm(graph->merged_mean, states) * params.neighbor_weights[0].value.transpose();
      break;
    case TeacherKind::attention_gnn: {
      std::vector<double> edge_pre, edge_weight;
      const Matrix messages = states * params.neighbor_weights[0].value.transpose();
      pre += attention_aggregate(messages, *graph, params.attention_src, params.attention_dst, edge_pre, edge_weight);
      break;
    }
    case TeacherKind::mlp: break;
  }
  return leaky_relu(pre);
}

TeacherModel::TeacherModel(const TeacherConfig& cfg, Eigen::Index input_width, std::vector<std::string> relation_names,
                           Rng& rng)
    : cfg_(cfg), relation_names_(std::move(relation_names)) {
  cfg_.validate();
  if (input_width < 1) throw ConfigError("teacher input width must be positive");
  if (cfg_.kind == TeacherKind::relational_gnn && relation_names_.empty())
    throw ConfigError("relational teacher needs at least one relation");
  const Eigen::Index h = cfg_.hidden;
  in_weight_ = Parameter("teacher.input_weight", fan_in_uniform(h, input_width, rng));
  in_bias_ = Parameter("teacher.input_bias", Matrix::Zero(h, 1));
  for (int l = 0; l < cfg_.layers; ++l)
    layers_.push_back(make_layer_params(cfg_.kind, cfg_.hidden, relation_names_.size(), rng,
                                        "teacher.layer" + std::to_string(l)));
  out_weight_ = Parameter("teacher.output_weight", fan_in_uniform(2, h, rng));
  out_bias_ = Parameter("teacher.output_bias", Matrix::Zero(2, 1));
}

ParameterRefs TeacherModel::parameters() {
  ParameterRefs refs{&in_weight_, &in_bias_};
  for (auto& l : layers_)
    for (auto* p : l.parameters(cfg_.kind)) refs.push_back(p);
  refs.push_back(&out_weight_);
  refs.push_back(&out_bias_);
  return refs;
}

nlohmann::json TeacherModel::describe() const {
  return {{"kind", to_string(cfg_.kind)},          {"layers", cfg_.layers},   {"hidden", cfg_.hidden},
          {"input_width", in_weight_.value.cols()}, {"relations", relation_names_}, {"dropout", cfg_.dropout}};
}

void TeacherModel::layer_forward(std::size_t l, const Matrix& input, const GraphOperators* graph, LayerTrace& t) {
  auto& p = layers_[l];
  t.input = input;
  Matrix pre = add_bias(input * p.self_weight.value.transpose(), p.bias);
  switch (cfg_.kind) {
    case TeacherKind::relational_gnn:
      t.aggregated.resize(p.neighbor_weights.size());
      for (std::size_t r = 0; r < p.neighbor_weights.size(); ++r) {
        t.aggregated[r] = spmm(graph->relation_mean[r], input);
        pre.noalias() += t.aggregated[r] * p.neighbor_weights[r].value.transpose();
      }
      break;
    case TeacherKind::plain_gnn:
      t.aggregated = {spmm(graph->merged_mean, input)};
      pre.noalias() += t.aggregated[0] * p.neighbor_weights[0].value.transpose();
      break;
    case TeacherKind::attention_gnn:
      t.messages = input * p.neighbor_weights[0].value.transpose();
      pre += attention_aggregate(t.messages, *graph, p.attention_src, p.attention_dst, t.edge_pre, t.edge_weight);
      break;
    case TeacherKind::mlp: break;
  }
  t.pre = std::move(pre);
}

Matrix TeacherModel::layer_backward(std::size_t l, const LayerTrace& t, const GraphOperators* graph,
                                    const Matrix& d_out) {
  auto& p = layers_[l];
  const Matrix d_pre = leaky_relu_backward(t.pre, d_out);
  p.self_weight.grad.noalias() += d_pre.transpose() * t.input;
  p.bias.grad += d_pre.colwise().sum().transpose();
  Matrix d_input = d_pre * p.self_weight.value;

  switch (cfg_.kind) {
    case TeacherKind::relational_gnn:
      for (std::size_t r = 0; r < p.neighbor_weights.size(); ++r) {
        p.neighbor_weights[r].grad.noalias() += d_pre.transpose() * t.aggregated[r];
        d_input += spmm(graph->relation_mean_t[r], d_pre * p.neighbor_weights[r].value);
      }
      break;
    case TeacherKind::plain_gnn:
      p.neighbor_weights[0].grad.noalias() += d_pre.transpose() * t.aggregated[0];
      d_input += spmm(graph->merged_mean_t, d_pre * p.neighbor_weights[0].value);
      break;
    case TeacherKind::attention_gnn: {
      const auto& g = *graph;
      const RowMajorMatrix msg = t.messages;
      const RowMajorMatrix d_agg = d_pre;
      RowMajorMatrix d_msg = RowMajorMatrix::Zero(msg.rows(), msg.cols());
      Vector d_src = Vector::Zero(msg.rows());
      Vector d_dst = Vector::Zero(msg.rows());
      std::vector<double> d_weight;
      for (std::size_t i = 0; i < g.num_nodes; ++i) {
        const std::size_t b = g.in_offsets[i], e = g.in_offsets[i + 1];
        if (b == e) continue;
        const auto row_i = static_cast<Eigen::Index>(i);
        d_weight.assign(e - b, 0.0);
        double weighted = 0.0;
        for (std::size_t k = b; k < e; ++k) {
          const auto j = static_cast<Eigen::Index>(g.in_sources[k]);
          d_msg.row(j) += t.edge_weight[k] * d_agg.row(row_i);
          d_weight[k - b] = d_agg.row(row_i).dot(msg.row(j));
          weighted += t.edge_weight[k] * d_weight[k - b];
        }
        for (std::size_t k = b; k < e; ++k) {
          const double d_score = t.edge_weight[k] * (d_weight[k - b] - weighted);
          const double d_edge = d_score * leaky_relu_grad(t.edge_pre[k]);
          d_src(static_cast<Eigen::Index>(g.in_sources[k])) += d_edge;
          d_dst(row_i) += d_edge;
        }
      }
      Matrix d_messages = d_msg;
      d_messages.noalias() += d_src * p.attention_src.value.transpose();
      d_messages.noalias() += d_dst * p.attention_dst.value.transpose();
      p.attention_src.grad.noalias() += t.messages.transpose() * d_src;
      p.attention_dst.grad.noalias() += t.messages.transpose() * d_dst;
      p.neighbor_weights[0].grad.noalias() += d_messages.transpose() * t.input;
      d_input.noalias() += d_messages * p.neighbor_weights[0].value;
      break;
    }
    case TeacherKind::mlp: break;
  }
  return d_input;
}

Matrix TeacherModel::forward(const Matrix& embeddings, const GraphOperators* graph, Rng* rng, Trace* trace) {
  if (embeddings.cols() != input_width())
    throw ConfigError("embedding width " + std::to_string(embeddings.cols()) + " does not match teacher input width " +
                      std::to_string(input_width()));
  check_graph(graph, cfg_.kind, embeddings.rows(), relation_names_.size());
  const bool train = rng != nullptr && cfg_.dropout > 0.0;

  Trace local;
  Trace& t = trace ? *trace : local;
  t.layers.assign(layers_.size(), {});
  if (trace) t.embeddings = embeddings;
  Matrix h = add_bias(embeddings * in_weight_.value.transpose(), in_bias_);
  if (trace) t.projected = h;

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& lt = t.layers[l];
    if (train) {
      lt.mask = dropout_mask(h.rows(), h.cols(), cfg_.dropout, *rng);
      h = h.cwiseProduct(lt.mask);
    } else {
      lt.mask.resize(0, 0);
    }
    layer_forward(l, h, graph, lt);
    h = leaky_relu(lt.pre);
    if (!trace) {
      lt = {};
    }
  }
  t.final_pre = h;
  Matrix r = leaky_relu(h);
  if (train) {
    t.out_mask = dropout_mask(r.rows(), r.cols(), cfg_.dropout, *rng);
    r = r.cwiseProduct(t.out_mask);
  } else {
    t.out_mask.resize(0, 0);
  }
  t.out_input = r;
  return add_bias(r * out_weight_.value.transpose(), out_bias_);
}

void TeacherModel::backward(const Trace& t, const GraphOperators* graph, const Matrix& d_logits) {
  out_weight_.grad.noalias() += d_logits.transpose() * t.out_input;
  out_bias_.grad += d_logits.colwise().sum().transpose();
  Matrix d = d_logits * out_weight_.value;
  if (t.out_mask.size()) d = d.cwiseProduct(t.out_mask);
  d = leaky_relu_backward(t.final_pre, d);
  for (std::size_t l = layers_.size(); l-- > 0;) {
    d = layer_backward(l, t.layers[l], graph, d);
    if (t.layers[l].mask.size()) d = d.cwiseProduct(t.layers[l].mask);
  }
  in_weight_.grad.noalias() += d.transpose() * t.embeddings;
  in_bias_.grad += d.colwise().sum().transpose();
}

Matrix teacher_forward(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph) {
  return model.forward(embeddings, graph);
}

double teacher_objective(TeacherModel& model, const Matrix& embeddings, const GraphOperators* graph,
                         const HardLabels& labels, Rng* dropout_rng, bool accumulate) {
  auto params = model.parameters();
  if (accumulate) zero_grads(params);
  TeacherModel::Trace trace;
  const Matrix logits = model.forward(embeddings, graph, dropout_rng, accumulate ? &trace : nullptr);
  double ce = 0.0;
  Matrix d_logits = Matrix::Zero(logits.rows(), 2);
  for (const auto& [node, label] : labels) {
    const auto i = static_cast<Eigen::Index>(node);
    if (i >= logits.rows()) throw DataError("labeled node index out of range");
    const int y = static_cast<int>(label);
    ce += cross_entropy(Eigen::Vector2d(logits(i, 0), logits(i, 1)), y);
    const auto p = softmax2(logits(i, 0), logits(i, 1));
    d_logits(i, 0) += p[0] - (y == 0 ? 1.0 : 0.0);
    d_logits(i, 1) += p[1] - (y == 1 ? 1.0 : 0.0);
  }
  double l2 = 0.0;
  if (accumulate) {
    model.backward(trace, graph, d_logits);
    l2 = add_l2(params, model.config().lambda2);
  } else {
    l2 = model.config().lambda2 * squared_norm(params);
  }
  const double total = ce + l2;
  if (!std::isfinite(total)) throw TrainingError("teacher loss is not finite");
  return total;
}

double teacher_train_step(TeacherModel& model, AdamW& optimizer, const Matrix& embeddings, const GraphOperators* graph,
                          const HardLabels& labels, Rng& rng) {
  if (labels.empty()) throw DataError("teacher training needs at least one hard label");
  const double loss = teacher_objective(model, embeddings, graph, labels, &rng, true);
  optimizer.step(model.parameters());
  return loss;
}

SoftLabelTable make_soft_labels(const Matrix& logits, double temperature, const std::vector<std::size_t>& nodes,
                                std::string source) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (logits.cols() != 2) throw ConfigError("soft labels need two logits per node");
  SoftLabelTable table;
  table.temperature = temperature;
  table.source = std::move(source);
  for (auto node : nodes) {
    const auto i = static_cast<Eigen::Index>(node);
    if (i >= logits.rows()) throw DataError("soft-label node index out of range");
    table.rows[node] = softmax2(logits(i, 0), logits(i, 1), temperature);
  }
  return table;
}

}  // namespace lmbot
