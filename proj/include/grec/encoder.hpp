#pragma once

#include "grec/tape.hpp"

namespace grec {

enum class EncoderKind { Wgat, LightGcnGauss };
enum class VarianceRule { ASquared, ASingle };

/// Adjacency-masked, row-stochastic attention weights, aligned edge-for-edge
/// with the joint CSR of the graph they were built from.
struct AttentionMatrix {
  std::vector<double> values;

  double row_sum(const CsrAdjacency& adj, std::int32_t node) const {
    double s = 0.0;
    for (std::int64_t e = adj.row_ptr[node]; e < adj.row_ptr[node + 1]; ++e) s += values[e];
    return s;
  }
};

/// Per-layer mean/variance tables plus their layer average.
struct LayerStack {
  std::vector<Mat> means;  // layers 0..K
  std::vector<Mat> vars;
  Mat mean;  // (K+1)-layer average
  Mat var;
};

/// Tape node ids of one encoder forward pass.
struct EncoderNodes {
  int mean0 = -1;
  int var0 = -1;
  int attention = -1;  // -1 for the LightGCN path
  std::vector<int> mean_layers;
  std::vector<int> var_layers;
  int mean_final = -1;
  int var_final = -1;
};

namespace detail {

inline EncoderNodes average_layers(Tape& tape, EncoderNodes n) {
  const double c = 1.0 / static_cast<double>(n.mean_layers.size());
  const std::vector<double> coeffs(n.mean_layers.size(), c);
  n.mean_final = tape.lin_comb(n.mean_layers, coeffs);
  n.var_final = tape.lin_comb(n.var_layers, coeffs);
  return n;
}

}  // namespace detail

/// W-GAT forward on an existing tape. Attention is computed once from the
/// layer-0 embeddings and reused across layers; means propagate through the
/// attention matrix and variances through its square (or through the matrix
/// itself under VarianceRule::ASingle). The final embedding is the arithmetic
/// mean of layers 0..K.
inline EncoderNodes wgat_on_tape(Tape& tape, int mean0, int var0, const InteractionGraph& graph,
                                 int layers, VarianceRule rule) {
  GREC_CHECK(layers >= 0, "wgat_on_tape: layer count must be >= 0");
  EncoderNodes n;
  n.mean0 = mean0;
  n.var0 = var0;
  const int logits = tape.edge_w2_logits(mean0, var0, graph.joint);
  n.attention = tape.row_softmax(logits, graph.joint);

  n.mean_layers = {mean0};
  n.var_layers = {var0};
  for (int k = 0; k < layers; ++k) {
    n.mean_layers.push_back(tape.spmm(n.attention, n.mean_layers.back(), graph.joint));
    int v = tape.spmm(n.attention, n.var_layers.back(), graph.joint);
    if (rule == VarianceRule::ASquared) v = tape.spmm(n.attention, v, graph.joint);
    n.var_layers.push_back(v);
  }
  return detail::average_layers(tape, n);
}

inline std::vector<double> lightgcn_edge_weights(const InteractionGraph& graph) {
  const CsrAdjacency& adj = graph.joint;
  std::vector<double> w(adj.nnz());
  for (std::int64_t e = 0; e < adj.nnz(); ++e) {
    w[e] = 1.0 / std::sqrt(static_cast<double>(adj.degree(adj.src[e])) *
                           static_cast<double>(adj.degree(adj.col[e])));
  }
  return w;
}

/// LightGCN-style symmetric-normalized propagation applied to both means and
/// variances. Rows of D^-1/2 A D^-1/2 are not stochastic, so variances may
/// shrink; the final variance aggregate is floored at kVarianceFloor.
inline EncoderNodes lightgcn_on_tape(Tape& tape, int mean0, int var0,
                                     const InteractionGraph& graph, int layers) {
  GREC_CHECK(layers >= 0, "lightgcn_on_tape: layer count must be >= 0");
  EncoderNodes n;
  n.mean0 = mean0;
  n.var0 = var0;
  const auto weights = lightgcn_edge_weights(graph);

  n.mean_layers = {mean0};
  n.var_layers = {var0};
  for (int k = 0; k < layers; ++k) {
    n.mean_layers.push_back(tape.spmm_const(weights, n.mean_layers.back(), graph.joint));
    n.var_layers.push_back(tape.spmm_const(weights, n.var_layers.back(), graph.joint));
  }
  n = detail::average_layers(tape, n);
  n.var_final = tape.clamp_min(n.var_final, kVarianceFloor);
  return n;
}

inline EncoderNodes encoder_on_tape(Tape& tape, int mean0, int var0,
                                    const InteractionGraph& graph, int layers,
                                    EncoderKind kind, VarianceRule rule) {
  return kind == EncoderKind::Wgat ? wgat_on_tape(tape, mean0, var0, graph, layers, rule)
                                   : lightgcn_on_tape(tape, mean0, var0, graph, layers);
}

/// Attention from materialized layer-0 embeddings (pure wrapper).
inline AttentionMatrix compute_attention(const Mat& mean0, const Mat& var0,
                                         const InteractionGraph& graph) {
  GREC_CHECK(mean0.rows() == graph.num_nodes() && var0.rows() == graph.num_nodes(),
             "compute_attention: table rows must match node count");
  GREC_CHECK(graph.num_nodes() > 0, "compute_attention: empty graph");
  Tape tape;
  const int m = tape.leaf(mean0, false);
  const int v = tape.leaf(var0, false);
  const int att = tape.row_softmax(tape.edge_w2_logits(m, v, graph.joint), graph.joint);
  AttentionMatrix out;
  const Mat& a = tape.val(att);
  out.values.assign(a.data(), a.data() + a.size());
  return out;
}

namespace detail {

inline LayerStack extract_stack(const Tape& tape, const EncoderNodes& n) {
  LayerStack s;
  for (int id : n.mean_layers) s.means.push_back(tape.val(id));
  for (int id : n.var_layers) s.vars.push_back(tape.val(id));
  s.mean = tape.val(n.mean_final);
  s.var = tape.val(n.var_final);
  return s;
}

}  // namespace detail

/// Pure W-GAT forward from materialized layer-0 tables.
inline LayerStack wgat_forward(const Mat& mean0, const Mat& var0, const InteractionGraph& graph,
                               int layers, VarianceRule rule = VarianceRule::ASquared) {
  Tape tape;
  const auto n = wgat_on_tape(tape, tape.leaf(mean0, false), tape.leaf(var0, false), graph,
                              layers, rule);
  return detail::extract_stack(tape, n);
}

/// Pure LightGCN-Gaussian forward from materialized layer-0 tables.
inline LayerStack lightgcn_gauss_forward(const Mat& mean0, const Mat& var0,
                                         const InteractionGraph& graph, int layers) {
  Tape tape;
  const auto n =
      lightgcn_on_tape(tape, tape.leaf(mean0, false), tape.leaf(var0, false), graph, layers);
  return detail::extract_stack(tape, n);
}

}  // namespace grec
