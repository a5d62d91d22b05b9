#pragma once

#include <set>

#include "grec/encoder.hpp"

namespace grec {

enum class LossKind { BprOnly, BprWpc, BprKl };

/// Sampled training triples: (user, positive item, negative item), ids in
/// their own side's space. The (user, positive) pairs double as the in-batch
/// contrastive set.
struct Batch {
  std::vector<std::int32_t> users;
  std::vector<std::int32_t> pos_items;
  std::vector<std::int32_t> neg_items;

  std::size_t size() const { return users.size(); }
};

struct LossConfig {
  LossKind kind = LossKind::BprWpc;
  double omega = 0.1;
  double tau = 0.25;
  double lambda = 1e-5;
};

/// Mean over the batch of -log sigmoid(pos - neg). Depends on score
/// differences only, so it is invariant to shifting both vectors.
inline double bpr_loss(const Vec& pos_scores, const Vec& neg_scores) {
  GREC_CHECK(pos_scores.size() == neg_scores.size(), "bpr_loss: length mismatch");
  GREC_CHECK(pos_scores.size() > 0, "bpr_loss: empty batch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pos_scores.size(); ++i) {
    acc += stable_softplus(neg_scores(i) - pos_scores(i));
  }
  return acc / static_cast<double>(pos_scores.size());
}

/// Contrastive loss from a precomputed score matrix f, where f(r, c) scores
/// user r against the c-th in-batch item and the positive pair sits on the
/// diagonal: mean_r [logsumexp_c f(r, c) - f(r, r)].
inline double contrastive_from_scores(const Mat& f) {
  GREC_CHECK(f.rows() == f.cols(), "contrastive_from_scores: matrix must be square");
  GREC_CHECK(f.rows() >= 2, "contrastive_from_scores: need at least one in-batch negative");
  double acc = 0.0;
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    const double mx = f.row(r).maxCoeff();
    double s = 0.0;
    for (Eigen::Index c = 0; c < f.cols(); ++c) s += std::exp(f(r, c) - mx);
    acc += mx + std::log(s) - f(r, r);
  }
  return acc / static_cast<double>(f.rows());
}

namespace detail {

template <class ScoreFn>
Mat score_matrix(std::span<const Gaussian> users, std::span<const Gaussian> positives,
                 double tau, ScoreFn&& distance) {
  GREC_CHECK(users.size() == positives.size(), "score_matrix: users/items length mismatch");
  GREC_CHECK(users.size() >= 2, "score_matrix: batch of one has no negatives");
  GREC_CHECK(tau > 0.0, "score_matrix: tau must be positive");
  const auto b = static_cast<Eigen::Index>(users.size());
  Mat f(b, b);
  for (Eigen::Index r = 0; r < b; ++r) {
    for (Eigen::Index c = 0; c < b; ++c) {
      f(r, c) = stable_sigmoid(-distance(users[r], positives[c])) / tau;
    }
  }
  return f;
}

}  // namespace detail

/// In-batch Wasserstein contrastive loss over (user, positive) pairs; every
/// other pair's item acts as a negative and the positive itself is kept in
/// the denominator.
inline double wpc_loss(std::span<const Gaussian> users, std::span<const Gaussian> positives,
                       double tau) {
  return contrastive_from_scores(detail::score_matrix(
      users, positives, tau, [](const Gaussian& a, const Gaussian& b) { return w2_squared(a, b); }));
}

/// Same shape as wpc_loss with the symmetrized KL divergence as the distance
/// inside the sigmoid. Comparison arm for the training-stability study.
inline double kl_contrastive_loss(std::span<const Gaussian> users,
                                  std::span<const Gaussian> positives, double tau) {
  return contrastive_from_scores(
      detail::score_matrix(users, positives, tau, [](const Gaussian& a, const Gaussian& b) {
        return 0.5 * (kl_divergence(a, b) + kl_divergence(b, a));
      }));
}

/// lambda * (sum of squared means + squared variances) over the given layer-0
/// rows, divided by the batch size.
inline double l2_regularizer(const Mat& mean0, const Mat& var0,
                             std::span<const std::int32_t> nodes, double lambda,
                             std::size_t batch_size) {
  GREC_CHECK(lambda >= 0.0, "l2_regularizer: lambda must be non-negative");
  GREC_CHECK(batch_size > 0, "l2_regularizer: batch size must be positive");
  double acc = 0.0;
  for (const auto r : nodes) acc += mean0.row(r).squaredNorm() + var0.row(r).squaredNorm();
  return lambda * acc / static_cast<double>(batch_size);
}

/// Unique joint-space node ids touched by a batch, ascending.
inline std::vector<std::int32_t> batch_nodes(const Batch& batch, const InteractionGraph& graph) {
  std::set<std::int32_t> uniq;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    uniq.insert(batch.users[i]);
    uniq.insert(graph.item_node(batch.pos_items[i]));
    uniq.insert(graph.item_node(batch.neg_items[i]));
  }
  return {uniq.begin(), uniq.end()};
}

/// Tape node ids of the assembled objective and its reported components.
struct LossNodes {
  int bpr = -1;
  int contrastive = -1;  // -1 when the loss is BPR-only
  int reg = -1;
  int total = -1;
};

/// Builds L = L_BPR + omega * L_contrastive + lambda/B * (||mu||^2 + ||Sigma||^2)
/// on the tape, reading final embeddings from the encoder pass. The
/// regularizer covers the layer-0 parameters of the batch's unique nodes.
inline LossNodes total_loss_on_tape(Tape& tape, const EncoderNodes& enc, const Batch& batch,
                                    const InteractionGraph& graph, const LossConfig& cfg) {
  GREC_CHECK(batch.size() > 0, "total_loss_on_tape: empty batch");
  LossNodes out;

  std::vector<std::int32_t> users(batch.size()), pos(batch.size()), neg(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    users[i] = batch.users[i];
    pos[i] = graph.item_node(batch.pos_items[i]);
    neg[i] = graph.item_node(batch.neg_items[i]);
  }

  // BPR on scores y = -w2: -log sigmoid(y_pos - y_neg) = softplus(w2_pos - w2_neg).
  const int pos_w2 = tape.pair_w2(enc.mean_final, enc.var_final, users, pos);
  const int neg_w2 = tape.pair_w2(enc.mean_final, enc.var_final, users, neg);
  const int diff = tape.lin_comb({pos_w2, neg_w2}, {1.0, -1.0});
  out.bpr = tape.mean_all(tape.softplus_floor(diff, 0.0));

  std::vector<int> terms = {out.bpr};
  std::vector<double> coeffs = {1.0};

  if (cfg.kind != LossKind::BprOnly) {
    GREC_CHECK(batch.size() >= 2, "total_loss_on_tape: contrastive loss needs batch >= 2");
    const int dist = cfg.kind == LossKind::BprWpc
                         ? tape.cross_w2(enc.mean_final, enc.var_final, users, pos)
                         : tape.cross_kl_sym(enc.mean_final, enc.var_final, users, pos);
    const int f = tape.lipschitz_score(dist, cfg.tau);
    const int lse = tape.row_log_sum_exp(f);
    const int fpos = tape.take_diag(f);
    out.contrastive = tape.mean_all(tape.lin_comb({lse, fpos}, {1.0, -1.0}));
    terms.push_back(out.contrastive);
    coeffs.push_back(cfg.omega);
  }

  if (cfg.lambda > 0.0) {
    const auto nodes = batch_nodes(batch, graph);
    const int sq_mean = tape.sum_sq_rows(enc.mean0, nodes);
    const int sq_var = tape.sum_sq_rows(enc.var0, nodes);
    const double c = cfg.lambda / static_cast<double>(batch.size());
    out.reg = tape.lin_comb({sq_mean, sq_var}, {c, c});
    terms.push_back(out.reg);
    coeffs.push_back(1.0);
  }

  out.total = terms.size() == 1 ? terms[0] : tape.lin_comb(terms, coeffs);
  return out;
}

}  // namespace grec
