#pragma once

#include "grec/encoder.hpp"

namespace grec {

struct PerUserMetrics {
  std::int32_t user = 0;
  double recall = 0.0;
  double ndcg = 0.0;
};

struct EvalResult {
  double recall = 0.0;
  double ndcg = 0.0;
  std::int32_t evaluable_users = 0;
  std::vector<PerUserMetrics> per_user;
};

/// Top-k item ids for one user given a full item score vector (higher is
/// better). The user's train items are masked out; ties break toward the
/// lower item id. Returns fewer than k ids when not enough items remain.
inline std::vector<std::int32_t> topk_from_scores(const Vec& item_scores,
                                                  const InteractionGraph& graph,
                                                  std::int32_t user, std::int32_t k) {
  std::vector<std::int32_t> candidates;
  candidates.reserve(item_scores.size());
  for (std::int32_t i = 0; i < static_cast<std::int32_t>(item_scores.size()); ++i) {
    if (!graph.has_edge(user, i)) candidates.push_back(i);
  }
  const auto better = [&](std::int32_t a, std::int32_t b) {
    if (item_scores(a) != item_scores(b)) return item_scores(a) > item_scores(b);
    return a < b;
  };
  const std::size_t take = std::min<std::size_t>(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + take, candidates.end(), better);
  candidates.resize(take);
  return candidates;
}

/// Scores every unmasked item by -w2 against the user's final embedding and
/// returns the k best.
inline std::vector<std::int32_t> rank_items(std::int32_t user, const Mat& final_mean,
                                            const Mat& final_var, const InteractionGraph& graph,
                                            std::int32_t k) {
  GREC_CHECK(user >= 0 && user < graph.num_users, "rank_items: user id out of range");
  const int dim = static_cast<int>(final_mean.cols());
  Vec scores(graph.num_items);
  for (std::int32_t i = 0; i < graph.num_items; ++i) {
    const auto node = graph.item_node(i);
    scores(i) = -w2_squared_rows(final_mean.row(user).data(), final_var.row(user).data(),
                                 final_mean.row(node).data(), final_var.row(node).data(), dim);
  }
  return topk_from_scores(scores, graph, user, k);
}

/// |topk intersect test| / |test|.
inline double recall_at_k(std::span<const std::int32_t> topk,
                          std::span<const std::int32_t> test_items) {
  GREC_CHECK(!test_items.empty(), "recall_at_k: empty test set");
  std::size_t hits = 0;
  for (const auto i : topk) {
    if (std::binary_search(test_items.begin(), test_items.end(), i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_items.size());
}

/// Binary-relevance NDCG: DCG sums 1/log2(rank+1) over hits, IDCG assumes the
/// test items fill the best ranks.
inline double ndcg_at_k(std::span<const std::int32_t> topk,
                        std::span<const std::int32_t> test_items, std::int32_t k) {
  GREC_CHECK(!test_items.empty(), "ndcg_at_k: empty test set");
  double dcg = 0.0;
  for (std::size_t r = 0; r < topk.size(); ++r) {
    if (std::binary_search(test_items.begin(), test_items.end(), topk[r])) {
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  }
  double idcg = 0.0;
  const std::size_t ideal = std::min<std::size_t>(k, test_items.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

/// Full-ranking evaluation over every user with at least one test item.
/// `score_fn(user)` returns the item score vector (higher is better).
template <class ScoreFn>
EvalResult evaluate_ranked(ScoreFn&& score_fn, const InteractionGraph& graph,
                           const std::vector<std::vector<std::int32_t>>& test_by_user,
                           std::int32_t k) {
  EvalResult out;
  for (std::int32_t u = 0; u < graph.num_users; ++u) {
    if (u >= static_cast<std::int32_t>(test_by_user.size()) || test_by_user[u].empty()) continue;
    const Vec scores = score_fn(u);
    const auto topk = topk_from_scores(scores, graph, u, k);
    PerUserMetrics m;
    m.user = u;
    m.recall = recall_at_k(topk, test_by_user[u]);
    m.ndcg = ndcg_at_k(topk, test_by_user[u], k);
    out.per_user.push_back(m);
    out.recall += m.recall;
    out.ndcg += m.ndcg;
  }
  out.evaluable_users = static_cast<std::int32_t>(out.per_user.size());
  GREC_CHECK(out.evaluable_users > 0, "evaluate: no evaluable users");
  out.recall /= out.evaluable_users;
  out.ndcg /= out.evaluable_users;
  return out;
}

/// Embedding-based evaluation; scores are computed in user blocks through the
/// GEMM-backed cross-distance kernel.
inline EvalResult evaluate_all(const Mat& final_mean, const Mat& final_var,
                               const InteractionGraph& graph,
                               const std::vector<std::vector<std::int32_t>>& test_by_user,
                               std::int32_t k) {
  std::vector<std::int32_t> item_rows(graph.num_items);
  for (std::int32_t i = 0; i < graph.num_items; ++i) item_rows[i] = graph.item_node(i);
  const Mat item_mean = gather_rows(final_mean, item_rows);
  const Mat item_sd = gather_rows(final_var, item_rows).cwiseSqrt();

  constexpr std::int32_t kBlock = 256;
  Mat block_scores;
  std::int32_t block_start = -1;
  const auto score_fn = [&](std::int32_t u) -> Vec {
    const std::int32_t lo = (u / kBlock) * kBlock;
    if (lo != block_start) {
      const std::int32_t hi = std::min(graph.num_users, lo + kBlock);
      std::vector<std::int32_t> rows(hi - lo);
      for (std::int32_t r = 0; r < hi - lo; ++r) rows[r] = lo + r;
      const Mat u_mean = gather_rows(final_mean, rows);
      const Mat u_sd = gather_rows(final_var, rows).cwiseSqrt();
      block_scores = -cross_w2_matrix(u_mean, u_sd, item_mean, item_sd);
      block_start = lo;
    }
    return block_scores.row(u - block_start).transpose();
  };
  return evaluate_ranked(score_fn, graph, test_by_user, k);
}

/// Item-degree scores: the non-personalized popularity baseline.
inline EvalResult evaluate_popularity(const InteractionGraph& graph,
                                      const std::vector<std::vector<std::int32_t>>& test_by_user,
                                      std::int32_t k) {
  Vec pop(graph.num_items);
  for (std::int32_t i = 0; i < graph.num_items; ++i) {
    pop(i) = static_cast<double>(graph.item_degree(i));
  }
  return evaluate_ranked([&](std::int32_t) { return pop; }, graph, test_by_user, k);
}

}  // namespace grec
