#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <vector>

#include "grec/common.hpp"

namespace grec {

struct InteractionTriple {
  std::int32_t user = 0;
  std::int32_t item = 0;
  std::int64_t timestamp = 0;
};

enum class SplitRole { Train, Test };

struct InteractionSet {
  std::vector<InteractionTriple> triples;
  SplitRole role = SplitRole::Train;

  std::size_t size() const { return triples.size(); }
  bool empty() const { return triples.empty(); }
};

// Adjacency over the joint node space (users then items), CSR layout with a
// reverse-edge map: rev[e] is the index of the opposite direction of edge e.
struct CsrAdjacency {
  std::int32_t num_nodes = 0;
  std::vector<std::int64_t> row_ptr;  // num_nodes + 1
  std::vector<std::int32_t> col;      // neighbor node ids
  std::vector<std::int32_t> src;      // source node per directed edge
  std::vector<std::int64_t> rev;      // reverse-edge permutation

  std::int64_t nnz() const { return static_cast<std::int64_t>(col.size()); }
  std::int64_t degree(std::int32_t node) const { return row_ptr[node + 1] - row_ptr[node]; }
};

/// Bipartite user-item graph over train interactions. Users occupy joint node
/// ids [0, num_users), items [num_users, num_users + num_items).
struct InteractionGraph {
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;

  // Per-side adjacency in side-local ids, rows sorted ascending.
  std::vector<std::int64_t> user_ptr;
  std::vector<std::int32_t> user_adj;  // item ids
  std::vector<std::int64_t> item_ptr;
  std::vector<std::int32_t> item_adj;  // user ids

  CsrAdjacency joint;

  std::int32_t num_nodes() const { return num_users + num_items; }
  std::int32_t item_node(std::int32_t item) const { return num_users + item; }
  std::int64_t num_edges() const { return static_cast<std::int64_t>(user_adj.size()); }

  std::int64_t user_degree(std::int32_t u) const { return user_ptr[u + 1] - user_ptr[u]; }
  std::int64_t item_degree(std::int32_t i) const { return item_ptr[i + 1] - item_ptr[i]; }

  bool has_edge(std::int32_t u, std::int32_t i) const {
    const auto begin = user_adj.begin() + user_ptr[u];
    const auto end = user_adj.begin() + user_ptr[u + 1];
    return std::binary_search(begin, end, i);
  }
};

/// Iteratively removes users and items of degree < k until a fixed point; the
/// result is the maximal k-core. An empty result is legal and signals a
/// dataset too sparse for the requested k. `trace`, when given, receives the
/// surviving edge count after each peeling iteration.
inline InteractionSet k_core_filter(const InteractionSet& interactions, int k,
                                    std::vector<std::size_t>* trace = nullptr) {
  GREC_CHECK(k >= 1, "k_core_filter: k must be >= 1");
  std::vector<InteractionTriple> edges = interactions.triples;
  if (trace) trace->clear();

  std::int32_t max_user = -1, max_item = -1;
  for (const auto& t : edges) {
    max_user = std::max(max_user, t.user);
    max_item = std::max(max_item, t.item);
  }
  std::vector<std::int32_t> user_deg(max_user + 1), item_deg(max_item + 1);

  bool changed = true;
  while (changed && !edges.empty()) {
    std::fill(user_deg.begin(), user_deg.end(), 0);
    std::fill(item_deg.begin(), item_deg.end(), 0);
    for (const auto& t : edges) {
      ++user_deg[t.user];
      ++item_deg[t.item];
    }
    const auto keep = [&](const InteractionTriple& t) {
      return user_deg[t.user] >= k && item_deg[t.item] >= k;
    };
    const std::size_t before = edges.size();
    edges.erase(std::remove_if(edges.begin(), edges.end(),
                               [&](const InteractionTriple& t) { return !keep(t); }),
                edges.end());
    changed = edges.size() != before;
    if (trace && changed) trace->push_back(edges.size());
  }

  InteractionSet out;
  out.triples = std::move(edges);
  out.role = interactions.role;
  return out;
}

struct SplitResult {
  InteractionSet train;
  InteractionSet test;
  std::vector<std::int32_t> users_without_test;  // single-interaction users, non-evaluable
};

/// Per-user random split: ceil(ratio * |N_u|) interactions go to train, capped
/// so every user with >= 2 interactions keeps at least one test item. Users
/// with a single interaction contribute it to train and are flagged.
inline SplitResult split_interactions(const InteractionSet& interactions, double ratio,
                                      std::uint64_t seed) {
  GREC_CHECK(ratio > 0.0 && ratio < 1.0, "split_interactions: ratio must lie in (0,1)");

  std::int32_t max_user = -1;
  for (const auto& t : interactions.triples) max_user = std::max(max_user, t.user);

  std::vector<std::vector<InteractionTriple>> per_user(max_user + 1);
  for (const auto& t : interactions.triples) per_user[t.user].push_back(t);

  SplitResult out;
  out.train.role = SplitRole::Train;
  out.test.role = SplitRole::Test;

  for (std::int32_t u = 0; u <= max_user; ++u) {
    auto& items = per_user[u];
    if (items.empty()) continue;
    // Per-user stream so the split does not depend on iteration order.
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(u)));
    rng.shuffle(items);

    const auto n = items.size();
    std::size_t n_train = static_cast<std::size_t>(
        std::ceil(ratio * static_cast<double>(n)));
    n_train = std::max<std::size_t>(1, n_train);
    if (n >= 2) n_train = std::min(n_train, n - 1);

    for (std::size_t j = 0; j < n; ++j) {
      (j < n_train ? out.train : out.test).triples.push_back(items[j]);
    }
    if (n < 2) out.users_without_test.push_back(u);
  }
  return out;
}

/// Builds the bipartite adjacency from train edges only. Duplicate edges are
/// dropped with a logged count. Expects densely re-indexed ids.
inline InteractionGraph build_graph(const InteractionSet& train, std::int32_t num_users,
                                    std::int32_t num_items) {
  InteractionGraph g;
  g.num_users = num_users;
  g.num_items = num_items;

  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  edges.reserve(train.size());
  for (const auto& t : train.triples) {
    GREC_CHECK(t.user >= 0 && t.user < num_users, "build_graph: user id out of range");
    GREC_CHECK(t.item >= 0 && t.item < num_items, "build_graph: item id out of range");
    edges.emplace_back(t.user, t.item);
  }
  std::sort(edges.begin(), edges.end());
  const auto last = std::unique(edges.begin(), edges.end());
  const auto dups = std::distance(last, edges.end());
  if (dups > 0) {
    std::cerr << "build_graph: dropped " << dups << " duplicate edge(s)\n";
    edges.erase(last, edges.end());
  }

  g.user_ptr.assign(num_users + 1, 0);
  g.item_ptr.assign(num_items + 1, 0);
  for (const auto& [u, i] : edges) {
    ++g.user_ptr[u + 1];
    ++g.item_ptr[i + 1];
  }
  std::partial_sum(g.user_ptr.begin(), g.user_ptr.end(), g.user_ptr.begin());
  std::partial_sum(g.item_ptr.begin(), g.item_ptr.end(), g.item_ptr.begin());

  g.user_adj.resize(edges.size());
  g.item_adj.resize(edges.size());
  {
    std::vector<std::int64_t> ucur(g.user_ptr.begin(), g.user_ptr.end() - 1);
    std::vector<std::int64_t> icur(g.item_ptr.begin(), g.item_ptr.end() - 1);
    for (const auto& [u, i] : edges) {
      g.user_adj[ucur[u]++] = i;  // sorted: edges sorted by (u, i)
      g.item_adj[icur[i]++] = u;
    }
  }

  // Joint CSR over users then items, with the reverse-edge permutation.
  const std::int32_t n = g.num_nodes();
  auto& j = g.joint;
  j.num_nodes = n;
  j.row_ptr.assign(n + 1, 0);
  for (std::int32_t u = 0; u < num_users; ++u) j.row_ptr[u + 1] = g.user_degree(u);
  for (std::int32_t i = 0; i < num_items; ++i) j.row_ptr[num_users + i + 1] = g.item_degree(i);
  std::partial_sum(j.row_ptr.begin(), j.row_ptr.end(), j.row_ptr.begin());

  j.col.resize(2 * edges.size());
  j.src.resize(2 * edges.size());
  for (std::int32_t u = 0; u < num_users; ++u) {
    std::int64_t at = j.row_ptr[u];
    for (std::int64_t e = g.user_ptr[u]; e < g.user_ptr[u + 1]; ++e) {
      j.col[at] = g.item_node(g.user_adj[e]);
      j.src[at] = u;
      ++at;
    }
  }
  for (std::int32_t i = 0; i < num_items; ++i) {
    std::int64_t at = j.row_ptr[num_users + i];
    for (std::int64_t e = g.item_ptr[i]; e < g.item_ptr[i + 1]; ++e) {
      j.col[at] = g.item_adj[e];
      j.src[at] = g.item_node(i);
      ++at;
    }
  }

  j.rev.resize(j.col.size());
  for (std::int64_t e = 0; e < j.nnz(); ++e) {
    const std::int32_t v = j.src[e];
    const std::int32_t w = j.col[e];
    // Rows are sorted, so the reverse edge is found by binary search in row w.
    const auto begin = j.col.begin() + j.row_ptr[w];
    const auto end = j.col.begin() + j.row_ptr[w + 1];
    const auto it = std::lower_bound(begin, end, v);
    j.rev[e] = std::distance(j.col.begin(), it);
  }
  return g;
}

/// Groups test interactions by user; rows beyond max user id are empty.
inline std::vector<std::vector<std::int32_t>> test_items_by_user(const InteractionSet& test,
                                                                 std::int32_t num_users) {
  std::vector<std::vector<std::int32_t>> out(num_users);
  for (const auto& t : test.triples) {
    if (t.user >= 0 && t.user < num_users) out[t.user].push_back(t.item);
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

}  // namespace grec
