#pragma once

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "grec/gauss.hpp"

namespace grec {

/// Item id -> set of category labels. Items may be unlabeled (absent).
using CategoryTable = std::unordered_map<std::int32_t, std::set<std::string>>;

/// Euclidean norm of the variance vector; the scalar uncertainty readout.
inline double variance_norm(const Vec& var) { return var.norm(); }

inline double variance_norm(const Gaussian& g) { return g.var.norm(); }

inline double variance_mean_entry(const Vec& var) {
  return var.size() == 0 ? 0.0 : var.mean();
}

struct BucketStat {
  std::string label;
  std::size_t population = 0;
  double mean_value = 0.0;  // meaningful only when population > 0
};

/// Buckets users by log10(interaction count) against ascending edges
/// (default 1.0/1.5/2.0/2.5) and reports the mean variance norm per bucket.
inline std::vector<BucketStat> group_by_o1(std::span<const double> variance_norms,
                                           std::span<const std::int64_t> train_counts,
                                           std::vector<double> bucket_edges = {1.0, 1.5, 2.0,
                                                                               2.5}) {
  GREC_CHECK(variance_norms.size() == train_counts.size(), "group_by_o1: length mismatch");
  GREC_CHECK(std::is_sorted(bucket_edges.begin(), bucket_edges.end()),
             "group_by_o1: bucket edges must ascend");

  std::vector<BucketStat> buckets(bucket_edges.size() + 1);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    std::ostringstream label;
    label.precision(2);
    if (b == 0) {
      label << "0.0~" << bucket_edges.front();
    } else if (b == bucket_edges.size()) {
      label << ">" << bucket_edges.back();
    } else {
      label << bucket_edges[b - 1] << "~" << bucket_edges[b];
    }
    buckets[b].label = label.str();
  }

  for (std::size_t u = 0; u < variance_norms.size(); ++u) {
    if (train_counts[u] <= 0) continue;
    const double o1 = std::log10(static_cast<double>(train_counts[u]));
    std::size_t b = 0;
    while (b < bucket_edges.size() && o1 >= bucket_edges[b]) ++b;
    buckets[b].population += 1;
    buckets[b].mean_value += variance_norms[u];
  }
  for (auto& bucket : buckets) {
    if (bucket.population > 0) bucket.mean_value /= static_cast<double>(bucket.population);
  }
  return buckets;
}

/// Diversity of a top-K list: 1 minus the fraction of item pairs sharing a
/// category (label-set intersection). Unlabeled items are skipped; fewer than
/// two labeled items leave the value undefined.
inline std::optional<double> o2_diversity(std::span<const std::int32_t> topk,
                                          const CategoryTable& categories) {
  std::vector<const std::set<std::string>*> labels;
  for (const auto i : topk) {
    const auto it = categories.find(i);
    if (it != categories.end() && !it->second.empty()) labels.push_back(&it->second);
  }
  const std::size_t k = labels.size();
  if (k < 2) return std::nullopt;

  const auto intersects = [](const std::set<std::string>& a, const std::set<std::string>& b) {
    const auto& small = a.size() <= b.size() ? a : b;
    const auto& large = a.size() <= b.size() ? b : a;
    for (const auto& s : small) {
      if (large.count(s)) return true;
    }
    return false;
  };

  std::size_t same = 0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      if (intersects(*labels[i], *labels[j])) ++same;
    }
  }
  const double pairs = 0.5 * static_cast<double>(k) * static_cast<double>(k - 1);
  return 1.0 - static_cast<double>(same) / pairs;
}

/// Buckets users by their o2 value into fixed-width 0.2 bins over [0, 1].
inline std::vector<BucketStat> group_by_o2(std::span<const double> o2_values,
                                           std::span<const double> variance_norms) {
  GREC_CHECK(o2_values.size() == variance_norms.size(), "group_by_o2: length mismatch");
  std::vector<BucketStat> buckets(5);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    std::ostringstream label;
    label << 0.2 * static_cast<double>(b) << "~" << 0.2 * static_cast<double>(b + 1);
    buckets[b].label = label.str();
  }
  for (std::size_t u = 0; u < o2_values.size(); ++u) {
    auto b = static_cast<std::size_t>(o2_values[u] / 0.2);
    b = std::min<std::size_t>(b, buckets.size() - 1);
    buckets[b].population += 1;
    buckets[b].mean_value += variance_norms[u];
  }
  for (auto& bucket : buckets) {
    if (bucket.population > 0) bucket.mean_value /= static_cast<double>(bucket.population);
  }
  return buckets;
}

/// Mean item variance norm grouped by label count {1, 2, 3+}. Unlabeled items
/// are excluded.
inline std::vector<BucketStat> variance_by_label_count(std::span<const double> variance_norms,
                                                       const CategoryTable& categories) {
  std::vector<BucketStat> buckets(3);
  buckets[0].label = "1";
  buckets[1].label = "2";
  buckets[2].label = "3+";
  for (const auto& [item, labels] : categories) {
    if (labels.empty()) continue;
    if (item < 0 || item >= static_cast<std::int32_t>(variance_norms.size())) continue;
    const std::size_t b = std::min<std::size_t>(labels.size(), 3) - 1;
    buckets[b].population += 1;
    buckets[b].mean_value += variance_norms[item];
  }
  for (auto& bucket : buckets) {
    if (bucket.population > 0) bucket.mean_value /= static_cast<double>(bucket.population);
  }
  return buckets;
}

/// Oscillation statistic of a loss curve: population standard deviation of
/// the epoch-to-epoch differences over the first `window` epochs. Zero
/// exactly for affine curves.
inline double oscillation_statistic(std::span<const double> losses, std::size_t window = 100) {
  const std::size_t n = std::min(window, losses.size());
  if (n < 2) return 0.0;
  std::vector<double> diffs(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) diffs[i] = losses[i + 1] - losses[i];
  double mean = 0.0;
  for (const double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double var = 0.0;
  for (const double d : diffs) var += (d - mean) * (d - mean);
  return std::sqrt(var / static_cast<double>(diffs.size()));
}

inline std::vector<double> moving_average(std::span<const double> xs, std::size_t window) {
  std::vector<double> out;
  if (xs.size() < window || window == 0) return out;
  double acc = 0.0;
  for (std::size_t i = 0; i < window; ++i) acc += xs[i];
  out.push_back(acc / static_cast<double>(window));
  for (std::size_t i = window; i < xs.size(); ++i) {
    acc += xs[i] - xs[i - window];
    out.push_back(acc / static_cast<double>(window));
  }
  return out;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman_correlation(std::span<const double> xs, std::span<const double> ys) {
  GREC_CHECK(xs.size() == ys.size() && xs.size() >= 2, "spearman: need two equal-length series");
  const auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(xs);
  const auto ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

inline std::string render_buckets_csv(const std::vector<BucketStat>& buckets,
                                      const std::string& key_name) {
  std::ostringstream os;
  os << key_name << ",population,mean_variance_norm\n";
  for (const auto& b : buckets) {
    os << b.label << "," << b.population << ",";
    if (b.population > 0) os << b.mean_value;
    os << "\n";
  }
  return os.str();
}

inline std::string render_buckets_markdown(const std::vector<BucketStat>& buckets,
                                           const std::string& key_name) {
  std::ostringstream os;
  os << "| " << key_name << " | population | mean variance norm |\n";
  os << "|---|---|---|\n";
  for (const auto& b : buckets) {
    os << "| " << b.label << " | " << b.population << " | ";
    if (b.population > 0) {
      os << b.mean_value;
    } else {
      os << "-";
    }
    os << " |\n";
  }
  return os.str();
}

}  // namespace grec
