#pragma once

#include <cassert>
#include <functional>
#include <span>
#include <vector>

#include "grec/gauss.hpp"
#include "grec/graph.hpp"

namespace grec {

/// Reverse-mode engine over a tape of primitive operations. A forward pass
/// records one node per primitive (sparse apply, row softmax, batched W2,
/// log-sum-exp, softplus, reductions) together with the forward values its
/// adjoint needs; backward() replays the adjoints in reverse order and
/// accumulates gradients additively into every leaf that was touched.
/// Leaves that do not feed the root receive exactly zero gradient.
class Tape {
 public:
  enum class Op {
    Leaf,
    SoftplusFloor,
    ClampMin,
    EdgeW2Logits,
    RowSoftmax,
    SpMM,
    SpMMConst,
    LinComb,
    PairW2,
    CrossW2,
    CrossKLSym,
    LipschitzScore,
    RowLogSumExp,
    TakeDiag,
    MeanAll,
    SumSqRows,
    WeightedSum,
  };

  int leaf(Mat value, bool needs_grad = true) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  /// y = softplus(x) + floor, elementwise. floor = 0 gives plain softplus.
  int softplus_floor(int x, double floor) {
    Node n = unary(Op::SoftplusFloor, x);
    n.cof = {floor};
    n.val = val(x).unaryExpr([floor](double v) { return stable_softplus(v) + floor; });
    return push(std::move(n));
  }

  int clamp_min(int x, double floor) {
    Node n = unary(Op::ClampMin, x);
    n.cof = {floor};
    n.val = val(x).cwiseMax(floor);
    return push(std::move(n));
  }

  /// Per directed edge e = (v -> w): -w2_squared(row v, row w) of the given
  /// mean/variance tables. Output is (nnz x 1).
  int edge_w2_logits(int means, int vars, const CsrAdjacency& adj) {
    Node n = binary(Op::EdgeW2Logits, means, vars);
    n.adj = &adj;
    const Mat& m = val(means);
    const Mat& s = val(vars);
    const int dim = static_cast<int>(m.cols());
    n.val.resize(adj.nnz(), 1);
#pragma omp parallel for schedule(static)
    for (std::int64_t e = 0; e < adj.nnz(); ++e) {
      n.val(e, 0) = -w2_squared_rows(m.row(adj.src[e]).data(), s.row(adj.src[e]).data(),
                                     m.row(adj.col[e]).data(), s.row(adj.col[e]).data(), dim);
    }
    return push(std::move(n));
  }

  /// Softmax over each adjacency row of an (nnz x 1) logit vector, with
  /// per-row max subtraction. Empty rows stay empty.
  int row_softmax(int logits, const CsrAdjacency& adj) {
    Node n = unary(Op::RowSoftmax, logits);
    n.adj = &adj;
    const Mat& z = val(logits);
    n.val.resize(adj.nnz(), 1);
#pragma omp parallel for schedule(static)
    for (std::int32_t v = 0; v < adj.num_nodes; ++v) {
      const std::int64_t lo = adj.row_ptr[v], hi = adj.row_ptr[v + 1];
      if (lo == hi) continue;
      double mx = z(lo, 0);
      for (std::int64_t e = lo + 1; e < hi; ++e) mx = std::max(mx, z(e, 0));
      double sum = 0.0;
      for (std::int64_t e = lo; e < hi; ++e) {
        n.val(e, 0) = std::exp(z(e, 0) - mx);
        sum += n.val(e, 0);
      }
      for (std::int64_t e = lo; e < hi; ++e) n.val(e, 0) /= sum;
    }
    return push(std::move(n));
  }

  /// Y[v] = sum_e a_e X[col_e] over row v; rows with no edges copy X[v], so
  /// isolated nodes pass through propagation unchanged.
  int spmm(int edge_vals, int x, const CsrAdjacency& adj) {
    Node n = binary(Op::SpMM, edge_vals, x);
    n.adj = &adj;
    n.val = apply_csr(val(edge_vals).data(), val(x), adj);
    return push(std::move(n));
  }

  /// Same as spmm with constant (non-differentiable) edge weights.
  int spmm_const(std::vector<double> weights, int x, const CsrAdjacency& adj) {
    GREC_CHECK(static_cast<std::int64_t>(weights.size()) == adj.nnz(),
               "spmm_const: weight count must equal edge count");
    Node n = unary(Op::SpMMConst, x);
    n.adj = &adj;
    n.cof = std::move(weights);
    n.val = apply_csr(n.cof.data(), val(x), adj);
    return push(std::move(n));
  }

  /// y = sum_i c_i x_i over equal-shaped inputs.
  int lin_comb(std::vector<int> xs, std::vector<double> cs) {
    GREC_CHECK(!xs.empty() && xs.size() == cs.size(), "lin_comb: inputs/coefficients mismatch");
    Node n;
    n.op = Op::LinComb;
    n.in = std::move(xs);
    n.cof = std::move(cs);
    n.val = n.cof[0] * val(n.in[0]);
    for (std::size_t i = 1; i < n.in.size(); ++i) {
      GREC_CHECK(val(n.in[i]).rows() == n.val.rows() && val(n.in[i]).cols() == n.val.cols(),
                 "lin_comb: shape mismatch");
      n.val += n.cof[i] * val(n.in[i]);
    }
    n.needs_grad = any_needs_grad(n.in);
    return push(std::move(n));
  }

  /// w2_squared between rows a[p] and b[p] of the tables, output (P x 1).
  int pair_w2(int means, int vars, std::vector<std::int32_t> a, std::vector<std::int32_t> b) {
    GREC_CHECK(a.size() == b.size(), "pair_w2: index lists must have equal length");
    Node n = binary(Op::PairW2, means, vars);
    n.idx_a = std::move(a);
    n.idx_b = std::move(b);
    const Mat& m = val(means);
    const Mat& s = val(vars);
    const int dim = static_cast<int>(m.cols());
    n.val.resize(static_cast<Eigen::Index>(n.idx_a.size()), 1);
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < n.idx_a.size(); ++p) {
      n.val(static_cast<Eigen::Index>(p), 0) =
          w2_squared_rows(m.row(n.idx_a[p]).data(), s.row(n.idx_a[p]).data(),
                          m.row(n.idx_b[p]).data(), s.row(n.idx_b[p]).data(), dim);
    }
    return push(std::move(n));
  }

  /// All-pairs w2_squared between gathered row sets, GEMM-backed: output
  /// (|rows| x |cols|), entry (r, c) = w2(rows[r], cols[c]).
  int cross_w2(int means, int vars, std::vector<std::int32_t> rows,
               std::vector<std::int32_t> cols) {
    Node n = binary(Op::CrossW2, means, vars);
    n.idx_a = std::move(rows);
    n.idx_b = std::move(cols);
    Mat u = gather_rows(val(means), n.idx_a);
    Mat p = gather_rows(val(vars), n.idx_a).cwiseSqrt();
    Mat v = gather_rows(val(means), n.idx_b);
    Mat q = gather_rows(val(vars), n.idx_b).cwiseSqrt();
    n.val = cross_w2_matrix(u, p, v, q);
    n.cache = {std::move(u), std::move(p), std::move(v), std::move(q)};
    return push(std::move(n));
  }

  /// All-pairs symmetrized KL, 0.5 (KL(a||b) + KL(b||a)), GEMM-backed.
  int cross_kl_sym(int means, int vars, std::vector<std::int32_t> rows,
                   std::vector<std::int32_t> cols) {
    Node n = binary(Op::CrossKLSym, means, vars);
    n.idx_a = std::move(rows);
    n.idx_b = std::move(cols);
    Mat u = gather_rows(val(means), n.idx_a);
    Mat sa = gather_rows(val(vars), n.idx_a);
    Mat v = gather_rows(val(means), n.idx_b);
    Mat sb = gather_rows(val(vars), n.idx_b);

    const Mat inv_sa = sa.cwiseInverse();
    const Mat inv_sb = sb.cwiseInverse();
    const Mat u_div_sa = u.cwiseProduct(inv_sa);
    const Mat v_div_sb = v.cwiseProduct(inv_sb);
    const Mat u2 = u.cwiseProduct(u);
    const Mat v2 = v.cwiseProduct(v);

    Mat w = -2.0 * (u_div_sa * v.transpose() + u * v_div_sb.transpose());
    w.noalias() += inv_sa * v2.transpose();
    w.noalias() += u2 * inv_sb.transpose();
    w.noalias() += sa * inv_sb.transpose();
    w.noalias() += inv_sa * sb.transpose();
    const Vec row_term = u2.cwiseProduct(inv_sa).rowwise().sum();
    const Vec col_term = v2.cwiseProduct(inv_sb).rowwise().sum();
    w.colwise() += row_term;
    w.rowwise() += col_term.transpose();
    w.array() -= 2.0 * static_cast<double>(u.cols());
    w *= 0.25;

    n.val = std::move(w);
    n.cache = {std::move(u), std::move(sa), std::move(v), std::move(sb)};
    return push(std::move(n));
  }

  /// f = sigmoid(-x) / tau, elementwise; the Lipschitz-bounded score.
  int lipschitz_score(int x, double tau) {
    GREC_CHECK(tau > 0.0, "lipschitz_score: tau must be positive");
    Node n = unary(Op::LipschitzScore, x);
    n.cof = {tau};
    n.val = val(x).unaryExpr([tau](double v) { return stable_sigmoid(-v) / tau; });
    return push(std::move(n));
  }

  int row_log_sum_exp(int x) {
    Node n = unary(Op::RowLogSumExp, x);
    const Mat& z = val(x);
    n.val.resize(z.rows(), 1);
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double mx = z.row(r).maxCoeff();
      double s = 0.0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) s += std::exp(z(r, c) - mx);
      n.val(r, 0) = mx + std::log(s);
    }
    return push(std::move(n));
  }

  int take_diag(int x) {
    GREC_CHECK(val(x).rows() == val(x).cols(), "take_diag: input must be square");
    Node n = unary(Op::TakeDiag, x);
    n.val = val(x).diagonal();
    return push(std::move(n));
  }

  int mean_all(int x) {
    Node n = unary(Op::MeanAll, x);
    n.val = Mat::Constant(1, 1, val(x).mean());
    return push(std::move(n));
  }

  /// Sum of squared entries over the listed rows (scalar output).
  int sum_sq_rows(int x, std::vector<std::int32_t> rows) {
    Node n = unary(Op::SumSqRows, x);
    n.idx_a = std::move(rows);
    double acc = 0.0;
    for (const auto r : n.idx_a) acc += val(x).row(r).squaredNorm();
    n.val = Mat::Constant(1, 1, acc);
    return push(std::move(n));
  }

  /// sum(x .* w) with constant weights; scalarizer used by gradient tests.
  int weighted_sum(int x, Mat w) {
    GREC_CHECK(w.rows() == val(x).rows() && w.cols() == val(x).cols(),
               "weighted_sum: weight shape mismatch");
    Node n = unary(Op::WeightedSum, x);
    n.val = Mat::Constant(1, 1, val(x).cwiseProduct(w).sum());
    n.cache = {std::move(w)};
    return push(std::move(n));
  }

  const Mat& val(int id) const { return nodes_[id].val; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  double scalar(int id) const {
    GREC_CHECK(val(id).size() == 1, "scalar: node is not 1x1");
    return val(id)(0, 0);
  }

  /// Replays adjoints from `root` (which must be scalar) down the tape.
  /// Gradients accumulate additively across every path to each node.
  void backward(int root) {
    GREC_CHECK(root >= 0 && root < static_cast<int>(nodes_.size()), "backward: bad root id");
    GREC_CHECK(nodes_[root].val.size() == 1, "backward: root must be scalar");
    for (int id = 0; id <= root; ++id) {
      nodes_[id].grad = Mat::Zero(nodes_[id].val.rows(), nodes_[id].val.cols());
    }
    nodes_[root].grad(0, 0) = 1.0;
    for (int id = root; id >= 0; --id) {
      if (nodes_[id].needs_grad) adjoint(id);
    }
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> in;
    std::vector<double> cof;
    const CsrAdjacency* adj = nullptr;
    std::vector<std::int32_t> idx_a, idx_b;
    std::vector<Mat> cache;
    Mat val, grad;
    bool needs_grad = true;
  };

  std::vector<Node> nodes_;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
  }

  bool any_needs_grad(const std::vector<int>& ids) const {
    for (int i : ids) {
      if (nodes_[i].needs_grad) return true;
    }
    return false;
  }

  Node unary(Op op, int x) {
    Node n;
    n.op = op;
    n.in = {x};
    n.needs_grad = nodes_[x].needs_grad;
    return n;
  }

  Node binary(Op op, int x, int y) {
    Node n;
    n.op = op;
    n.in = {x, y};
    n.needs_grad = nodes_[x].needs_grad || nodes_[y].needs_grad;
    return n;
  }

  static Mat apply_csr(const double* w, const Mat& x, const CsrAdjacency& adj) {
    Mat y(x.rows(), x.cols());
    assert(x.rows() == adj.num_nodes);
#pragma omp parallel for schedule(static)
    for (std::int32_t v = 0; v < adj.num_nodes; ++v) {
      const std::int64_t lo = adj.row_ptr[v], hi = adj.row_ptr[v + 1];
      if (lo == hi) {
        y.row(v) = x.row(v);
        continue;
      }
      y.row(v).setZero();
      for (std::int64_t e = lo; e < hi; ++e) y.row(v) += w[e] * x.row(adj.col[e]);
    }
    return y;
  }

  // Pulls this node's gradient back into its inputs.
  void adjoint(int id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::SoftplusFloor: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        x.grad += n.grad.cwiseProduct(x.val.unaryExpr([](double v) { return stable_sigmoid(v); }));
        return;
      }
      case Op::ClampMin: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        const double floor = n.cof[0];
        x.grad += n.grad.cwiseProduct(
            x.val.unaryExpr([floor](double v) { return v > floor ? 1.0 : 0.0; }));
        return;
      }
      case Op::EdgeW2Logits:
        adjoint_edge_w2(n);
        return;
      case Op::RowSoftmax:
        adjoint_row_softmax(n);
        return;
      case Op::SpMM:
        adjoint_spmm(n, nodes_[n.in[0]].val.data(), &nodes_[n.in[0]], &nodes_[n.in[1]]);
        return;
      case Op::SpMMConst:
        adjoint_spmm(n, n.cof.data(), nullptr, &nodes_[n.in[0]]);
        return;
      case Op::LinComb:
        for (std::size_t i = 0; i < n.in.size(); ++i) {
          Node& x = nodes_[n.in[i]];
          if (x.needs_grad) x.grad += n.cof[i] * n.grad;
        }
        return;
      case Op::PairW2:
        adjoint_pair_w2(n);
        return;
      case Op::CrossW2:
        adjoint_cross_w2(n);
        return;
      case Op::CrossKLSym:
        adjoint_cross_kl(n);
        return;
      case Op::LipschitzScore: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        const double tau = n.cof[0];
        // dF/dx = -F (1 - tau F), with F the cached forward value.
        x.grad += n.grad.cwiseProduct(
            n.val.unaryExpr([tau](double f) { return -f * (1.0 - tau * f); }));
        return;
      }
      case Op::RowLogSumExp: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
#pragma omp parallel for schedule(static)
        for (Eigen::Index r = 0; r < x.val.rows(); ++r) {
          const double g = n.grad(r, 0);
          const double lse = n.val(r, 0);
          for (Eigen::Index c = 0; c < x.val.cols(); ++c) {
            x.grad(r, c) += g * std::exp(x.val(r, c) - lse);
          }
        }
        return;
      }
      case Op::TakeDiag: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        for (Eigen::Index r = 0; r < n.val.rows(); ++r) x.grad(r, r) += n.grad(r, 0);
        return;
      }
      case Op::MeanAll: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        x.grad.array() += n.grad(0, 0) / static_cast<double>(x.val.size());
        return;
      }
      case Op::SumSqRows: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        const double g = n.grad(0, 0);
        for (const auto r : n.idx_a) x.grad.row(r) += 2.0 * g * x.val.row(r);
        return;
      }
      case Op::WeightedSum: {
        Node& x = nodes_[n.in[0]];
        if (!x.needs_grad) return;
        x.grad += n.grad(0, 0) * n.cache[0];
        return;
      }
    }
  }

  void adjoint_edge_w2(Node& n) {
    Node& means = nodes_[n.in[0]];
    Node& vars = nodes_[n.in[1]];
    if (!means.needs_grad && !vars.needs_grad) return;
    const CsrAdjacency& adj = *n.adj;
    const Mat& m = means.val;
    const Mat& s = vars.val;
    const int dim = static_cast<int>(m.cols());
    // Both directions of an undirected edge contribute the same symmetric
    // partials; folding in rev[e] keeps the accumulation race-free per node.
#pragma omp parallel for schedule(static)
    for (std::int32_t p = 0; p < adj.num_nodes; ++p) {
      for (std::int64_t e = adj.row_ptr[p]; e < adj.row_ptr[p + 1]; ++e) {
        const std::int32_t q = adj.col[e];
        const double g = n.grad(e, 0) + n.grad(adj.rev[e], 0);
        if (g == 0.0) continue;
        for (int d = 0; d < dim; ++d) {
          if (means.needs_grad) means.grad(p, d) += g * -2.0 * (m(p, d) - m(q, d));
          if (vars.needs_grad) {
            vars.grad(p, d) += g * -(1.0 - std::sqrt(s(q, d) / s(p, d)));
          }
        }
      }
    }
  }

  void adjoint_row_softmax(Node& n) {
    Node& z = nodes_[n.in[0]];
    if (!z.needs_grad) return;
    const CsrAdjacency& adj = *n.adj;
#pragma omp parallel for schedule(static)
    for (std::int32_t v = 0; v < adj.num_nodes; ++v) {
      const std::int64_t lo = adj.row_ptr[v], hi = adj.row_ptr[v + 1];
      if (lo == hi) continue;
      double dot = 0.0;
      for (std::int64_t e = lo; e < hi; ++e) dot += n.grad(e, 0) * n.val(e, 0);
      for (std::int64_t e = lo; e < hi; ++e) {
        z.grad(e, 0) += n.val(e, 0) * (n.grad(e, 0) - dot);
      }
    }
  }

  void adjoint_spmm(Node& n, const double* w, Node* edge_vals, Node* x) {
    const CsrAdjacency& adj = *n.adj;
    if (edge_vals && edge_vals->needs_grad) {
#pragma omp parallel for schedule(static)
      for (std::int64_t e = 0; e < adj.nnz(); ++e) {
        edge_vals->grad(e, 0) += n.grad.row(adj.src[e]).dot(x->val.row(adj.col[e]));
      }
    }
    if (x->needs_grad) {
      // Edges targeting p are exactly the reverses of p's out-edges.
#pragma omp parallel for schedule(static)
      for (std::int32_t p = 0; p < adj.num_nodes; ++p) {
        const std::int64_t lo = adj.row_ptr[p], hi = adj.row_ptr[p + 1];
        if (lo == hi) {
          x->grad.row(p) += n.grad.row(p);
          continue;
        }
        for (std::int64_t e = lo; e < hi; ++e) {
          x->grad.row(p) += w[adj.rev[e]] * n.grad.row(adj.col[e]);
        }
      }
    }
  }

  void adjoint_pair_w2(Node& n) {
    Node& means = nodes_[n.in[0]];
    Node& vars = nodes_[n.in[1]];
    if (!means.needs_grad && !vars.needs_grad) return;
    const Mat& m = means.val;
    const Mat& s = vars.val;
    const int dim = static_cast<int>(m.cols());
    // Serial: index lists may repeat rows (a user sampled in several pairs).
    for (std::size_t p = 0; p < n.idx_a.size(); ++p) {
      const double g = n.grad(static_cast<Eigen::Index>(p), 0);
      if (g == 0.0) continue;
      const std::int32_t a = n.idx_a[p];
      const std::int32_t b = n.idx_b[p];
      for (int d = 0; d < dim; ++d) {
        const double dm = 2.0 * (m(a, d) - m(b, d));
        const double root = std::sqrt(s(b, d) / s(a, d));
        if (means.needs_grad) {
          means.grad(a, d) += g * dm;
          means.grad(b, d) -= g * dm;
        }
        if (vars.needs_grad) {
          vars.grad(a, d) += g * (1.0 - root);
          vars.grad(b, d) += g * (1.0 - 1.0 / root);
        }
      }
    }
  }

  void adjoint_cross_w2(Node& n) {
    Node& means = nodes_[n.in[0]];
    Node& vars = nodes_[n.in[1]];
    if (!means.needs_grad && !vars.needs_grad) return;
    const Mat& u = n.cache[0];
    const Mat& p = n.cache[1];
    const Mat& v = n.cache[2];
    const Mat& q = n.cache[3];
    const Vec rs = n.grad.rowwise().sum();
    const Vec cs = n.grad.colwise().sum().transpose();

    if (means.needs_grad) {
      Mat du = 2.0 * (rs.asDiagonal() * u) - 2.0 * (n.grad * v);
      Mat dv = 2.0 * (cs.asDiagonal() * v) - 2.0 * (n.grad.transpose() * u);
      scatter_add(means.grad, n.idx_a, du);
      scatter_add(means.grad, n.idx_b, dv);
    }
    if (vars.needs_grad) {
      // Chain through p = sqrt(var): d var = d p / (2 p).
      Mat dp = 2.0 * (rs.asDiagonal() * p) - 2.0 * (n.grad * q);
      Mat dq = 2.0 * (cs.asDiagonal() * q) - 2.0 * (n.grad.transpose() * p);
      dp = dp.cwiseQuotient(2.0 * p);
      dq = dq.cwiseQuotient(2.0 * q);
      scatter_add(vars.grad, n.idx_a, dp);
      scatter_add(vars.grad, n.idx_b, dq);
    }
  }

  void adjoint_cross_kl(Node& n) {
    Node& means = nodes_[n.in[0]];
    Node& vars = nodes_[n.in[1]];
    if (!means.needs_grad && !vars.needs_grad) return;
    const Mat& u = n.cache[0];
    const Mat& sa = n.cache[1];
    const Mat& v = n.cache[2];
    const Mat& sb = n.cache[3];
    const Mat inv_sa = sa.cwiseInverse();
    const Mat inv_sb = sb.cwiseInverse();
    const Mat u_div_sa = u.cwiseProduct(inv_sa);
    const Mat v_div_sb = v.cwiseProduct(inv_sb);
    const Mat u2 = u.cwiseProduct(u);
    const Mat v2 = v.cwiseProduct(v);

    const Mat g = 0.25 * n.grad;
    const Vec rs = g.rowwise().sum();
    const Vec cs = g.colwise().sum().transpose();

    const Mat g_v = g * v;
    const Mat g_vds = g * v_div_sb;
    const Mat g_isb = g * inv_sb;
    const Mat g_v2 = g * v2;
    const Mat g_sb = g * sb;
    const Mat gt_u = g.transpose() * u;
    const Mat gt_uds = g.transpose() * u_div_sa;
    const Mat gt_isa = g.transpose() * inv_sa;
    const Mat gt_u2 = g.transpose() * u2;
    const Mat gt_sa = g.transpose() * sa;

    if (means.needs_grad) {
      Mat dmu_a = 2.0 * (rs.asDiagonal() * u_div_sa) - 2.0 * g_v.cwiseProduct(inv_sa) -
                  2.0 * g_vds + 2.0 * u.cwiseProduct(g_isb);
      Mat dmu_b = 2.0 * (cs.asDiagonal() * v_div_sb) - 2.0 * gt_uds -
                  2.0 * gt_u.cwiseProduct(inv_sb) + 2.0 * v.cwiseProduct(gt_isa);
      scatter_add(means.grad, n.idx_a, dmu_a);
      scatter_add(means.grad, n.idx_b, dmu_b);
    }
    if (vars.needs_grad) {
      const Mat inv_sa2 = inv_sa.cwiseProduct(inv_sa);
      const Mat inv_sb2 = inv_sb.cwiseProduct(inv_sb);
      Mat dsa = -(rs.asDiagonal() * u2.cwiseProduct(inv_sa2)) +
                2.0 * g_v.cwiseProduct(u).cwiseProduct(inv_sa2) -
                g_v2.cwiseProduct(inv_sa2) + g_isb - g_sb.cwiseProduct(inv_sa2);
      Mat dsb = -(cs.asDiagonal() * v2.cwiseProduct(inv_sb2)) +
                2.0 * gt_u.cwiseProduct(v).cwiseProduct(inv_sb2) -
                gt_u2.cwiseProduct(inv_sb2) + gt_isa - gt_sa.cwiseProduct(inv_sb2);
      scatter_add(vars.grad, n.idx_a, dsa);
      scatter_add(vars.grad, n.idx_b, dsb);
    }
  }

  static void scatter_add(Mat& dst, const std::vector<std::int32_t>& rows, const Mat& src) {
    for (Eigen::Index r = 0; r < src.rows(); ++r) dst.row(rows[r]) += src.row(r);
  }
};

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool nan_seen = false;

  bool ok(double tol) const { return !nan_seen && max_rel_err < tol; }
};

/// Central-difference validation of an analytic gradient. `coords` points at
/// every parameter coordinate and `analytic` holds the matching gradient
/// entries; `samples` coordinates are drawn (without replacement when
/// possible) and perturbed by +-step. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
inline FdReport finite_diff_check(const std::function<double()>& loss,
                                  std::span<double* const> coords,
                                  std::span<const double> analytic, double step,
                                  std::size_t samples, std::uint64_t seed) {
  GREC_CHECK(coords.size() == analytic.size(), "finite_diff_check: size mismatch");
  GREC_CHECK(step > 0.0, "finite_diff_check: step must be positive");

  std::vector<std::size_t> order(coords.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = std::min(samples, coords.size());

  FdReport rep;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t c = order[s];
    double* x = coords[c];
    const double saved = *x;
    *x = saved + step;
    const double up = loss();
    *x = saved - step;
    const double down = loss();
    *x = saved;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[c])) {
      rep.nan_seen = true;
      rep.max_rel_err = std::numeric_limits<double>::infinity();
      rep.worst_coord = c;
      return rep;
    }
    const double rel = std::abs(analytic[c] - numeric) /
                       std::max({std::abs(analytic[c]), std::abs(numeric), 1e-8});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = c;
      rep.analytic_at_worst = analytic[c];
      rep.numeric_at_worst = numeric;
    }
  }
  return rep;
}

}  // namespace grec
