#pragma once

#include <algorithm>
#include <span>

#include "grec/common.hpp"

namespace grec {

/// Diagonal Gaussian embedding: a mean vector plus a strictly positive
/// per-dimension variance vector of the same length.
struct Gaussian {
  Vec mean;
  Vec var;

  Eigen::Index dim() const { return mean.size(); }
};

namespace detail {

inline void check_embedding(const Gaussian& g) {
  GREC_CHECK(g.mean.size() == g.var.size(), "gaussian: mean/variance length mismatch");
  GREC_CHECK((g.var.array() > 0.0).all(), "gaussian: variance must be strictly positive");
}

inline void check_pair(const Gaussian& a, const Gaussian& b) {
  check_embedding(a);
  check_embedding(b);
  GREC_CHECK(a.dim() == b.dim(), "gaussian: dimension mismatch between operands");
}

}  // namespace detail

// Row-level kernel shared by the batched paths. No contract checks.
inline double w2_squared_rows(const double* mean_a, const double* var_a,
                              const double* mean_b, const double* var_b, int dim) {
  double acc = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double dm = mean_a[d] - mean_b[d];
    const double ds = std::sqrt(var_a[d]) - std::sqrt(var_b[d]);
    acc += dm * dm + ds * ds;
  }
  return acc;
}

inline double kl_rows(const double* mean_a, const double* var_a,
                      const double* mean_b, const double* var_b, int dim) {
  double acc = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double dm = mean_b[d] - mean_a[d];
    acc += dm * dm / var_b[d] + var_a[d] / var_b[d] - 1.0 + std::log(var_b[d] / var_a[d]);
  }
  return 0.5 * acc;
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
///   ||mean_a - mean_b||^2 + sum_d (sqrt(var_a_d) - sqrt(var_b_d))^2.
/// Symmetric; clamped at zero against floating-point negativity.
inline double w2_squared(const Gaussian& a, const Gaussian& b) {
  detail::check_pair(a, b);
  return std::max(0.0, w2_squared_rows(a.mean.data(), a.var.data(),
                                       b.mean.data(), b.var.data(),
                                       static_cast<int>(a.dim())));
}

/// KL(a || b) for diagonal Gaussians. Asymmetric in its arguments.
inline double kl_divergence(const Gaussian& a, const Gaussian& b) {
  detail::check_pair(a, b);
  return std::max(0.0, kl_rows(a.mean.data(), a.var.data(),
                               b.mean.data(), b.var.data(),
                               static_cast<int>(a.dim())));
}

/// Similarity score: negated squared W2, so identical embeddings score 0 and
/// all other pairs score below it.
inline double prediction_score(const Gaussian& u, const Gaussian& i) {
  return -w2_squared(u, i);
}

inline double lipschitz_score_from_w2(double w2, double tau) {
  GREC_CHECK(tau > 0.0, "lipschitz_score: tau must be positive");
  return stable_sigmoid(-w2) / tau;
}

/// Bounded contrastive score f(u,i) = sigmoid(-W2(u,i)) / tau, in (0, 1/tau).
inline double lipschitz_score(const Gaussian& u, const Gaussian& i, double tau) {
  GREC_CHECK(tau > 0.0, "lipschitz_score: tau must be positive");
  return stable_sigmoid(-w2_squared(u, i)) / tau;
}

struct W2Partials {
  Vec d_mean_a, d_var_a, d_mean_b, d_var_b;
};

/// Analytic partials of w2_squared with respect to both operands:
///   d/d mean_a = 2 (mean_a - mean_b)
///   d/d var_a,d = 1 - sqrt(var_b,d / var_a,d)
/// and symmetrically for b.
inline W2Partials w2_squared_partials(const Gaussian& a, const Gaussian& b) {
  detail::check_pair(a, b);
  W2Partials p;
  p.d_mean_a = 2.0 * (a.mean - b.mean);
  p.d_mean_b = -p.d_mean_a;
  const auto ratio = (b.var.array() / a.var.array()).sqrt();
  p.d_var_a = (1.0 - ratio).matrix();
  p.d_var_b = (1.0 - ratio.inverse()).matrix();
  return p;
}

inline Mat gather_rows(const Mat& x, std::span<const std::int32_t> idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = x.row(idx[r]);
  return out;
}

/// All-pairs squared W2 between two gathered embedding sets, GEMM-backed.
/// `sqrt_var_*` rows hold per-dimension standard deviations. Entry (r, c) is
/// w2_squared(row r of the a-side, row c of the b-side); tiny negative values
/// from cancellation are possible and left unclamped.
inline Mat cross_w2_matrix(const Mat& mean_a, const Mat& sqrt_var_a,
                           const Mat& mean_b, const Mat& sqrt_var_b) {
  Mat w = -2.0 * (mean_a * mean_b.transpose() + sqrt_var_a * sqrt_var_b.transpose());
  const Vec row_norm = mean_a.rowwise().squaredNorm() + sqrt_var_a.rowwise().squaredNorm();
  const Vec col_norm = mean_b.rowwise().squaredNorm() + sqrt_var_b.rowwise().squaredNorm();
  w.colwise() += row_norm;
  w.rowwise() += col_norm.transpose();
  return w;
}

}  // namespace grec
