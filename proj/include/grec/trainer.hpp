#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <optional>

#include "grec/losses.hpp"

namespace grec {

/// Trainable tables plus Adam state. Variances are stored as unconstrained
/// pre-activations; the materialized variance is softplus(raw) + floor, so it
/// stays strictly positive under any gradient step.
struct ModelParams {
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;
  std::int32_t dim = 0;

  Mat mean;     // (num_users + num_items) x dim
  Mat raw_var;  // same shape, pre-activation
  Mat m_mean, v_mean, m_raw_var, v_raw_var;
  std::int64_t step = 0;

  std::int32_t num_nodes() const { return num_users + num_items; }

  Mat variances() const {
    return raw_var.unaryExpr([](double v) { return stable_softplus(v) + kVarianceFloor; });
  }

  Gaussian embedding(std::int32_t node) const {
    Gaussian g;
    g.mean = mean.row(node).transpose();
    g.var = raw_var.row(node)
                .unaryExpr([](double v) { return stable_softplus(v) + kVarianceFloor; })
                .transpose();
    return g;
  }
};

struct TrainConfig {
  std::int32_t dim = 64;
  std::int32_t layers = 2;
  double lr = 1e-3;
  double lambda = 1e-5;
  double omega = 0.1;
  double tau = 0.25;
  std::int32_t batch_size = 2048;
  std::int32_t epochs = 100;
  std::uint64_t seed = 42;
  EncoderKind encoder = EncoderKind::Wgat;
  VarianceRule variance_rule = VarianceRule::ASquared;
  LossKind loss = LossKind::BprWpc;
  std::int32_t negatives_per_positive = 1;
  std::int32_t eval_every = 0;  // 0 disables validation during training
  std::int32_t eval_topk = 20;
  std::int32_t threads = 0;

  void validate() const {
    GREC_CHECK(dim > 0 && layers >= 0 && batch_size > 0 && epochs >= 0,
               "train config: sizes must be positive");
    GREC_CHECK(lr > 0.0 && lambda >= 0.0 && omega >= 0.0, "train config: bad coefficients");
    GREC_CHECK(tau > 0.0 && tau <= 1.0, "train config: tau must lie in (0, 1]");
    GREC_CHECK(negatives_per_positive == 1, "train config: only one negative per positive");
  }

  LossConfig loss_config() const { return {loss, omega, tau, lambda}; }
};

/// Xavier-uniform means with fan-in = fan-out = dim; raw variances set so the
/// materialized variance starts at exactly 1.
inline ModelParams init_params(const TrainConfig& cfg, std::int32_t num_users,
                               std::int32_t num_items, std::uint64_t seed) {
  ModelParams p;
  p.num_users = num_users;
  p.num_items = num_items;
  p.dim = cfg.dim;
  const std::int32_t n = p.num_nodes();

  const double bound = std::sqrt(6.0 / static_cast<double>(cfg.dim + cfg.dim));
  Rng rng(mix_seed(seed, 0x1817));
  p.mean.resize(n, cfg.dim);
  for (Eigen::Index r = 0; r < p.mean.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.mean.cols(); ++c) p.mean(r, c) = rng.uniform(-bound, bound);
  }
  p.raw_var = Mat::Constant(n, cfg.dim, softplus_inverse(1.0 - kVarianceFloor));

  p.m_mean = Mat::Zero(n, cfg.dim);
  p.v_mean = Mat::Zero(n, cfg.dim);
  p.m_raw_var = Mat::Zero(n, cfg.dim);
  p.v_raw_var = Mat::Zero(n, cfg.dim);
  return p;
}

inline ModelParams init_params(const TrainConfig& cfg, std::int32_t num_users,
                               std::int32_t num_items) {
  return init_params(cfg, num_users, num_items, cfg.seed);
}

/// Uniformly samples (user, positive) train edges and rejection-samples the
/// negative; after 100 rejections the complement is enumerated. Users whose
/// neighborhood covers every item are skipped with a warning.
inline Batch sample_triplets(const InteractionGraph& graph, std::int32_t batch_size, Rng& rng) {
  GREC_CHECK(graph.num_edges() > 0, "sample_triplets: graph has no train edges");
  Batch batch;
  const auto edges = static_cast<std::uint64_t>(graph.num_edges());
  while (batch.size() < static_cast<std::size_t>(batch_size)) {
    const auto e = static_cast<std::int64_t>(rng.index(edges));
    const auto u = static_cast<std::int32_t>(
        std::distance(graph.user_ptr.begin(),
                      std::upper_bound(graph.user_ptr.begin(), graph.user_ptr.end(), e)) -
        1);
    const std::int32_t i = graph.user_adj[e];
    std::int32_t j = -1;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const auto cand = static_cast<std::int32_t>(rng.index(graph.num_items));
      if (!graph.has_edge(u, cand)) {
        j = cand;
        break;
      }
    }
    if (j < 0) {
      // Fall back to the explicit complement of N_u.
      std::vector<std::int32_t> complement;
      for (std::int32_t cand = 0; cand < graph.num_items; ++cand) {
        if (!graph.has_edge(u, cand)) complement.push_back(cand);
      }
      if (complement.empty()) {
        std::cerr << "sample_triplets: user " << u << " interacts with every item, skipped\n";
        continue;
      }
      j = complement[rng.index(complement.size())];
    }
    batch.users.push_back(u);
    batch.pos_items.push_back(i);
    batch.neg_items.push_back(j);
  }
  return batch;
}

/// Standard bias-corrected Adam over both tables. Gradients containing NaN
/// abort the step.
inline void adam_step(ModelParams& p, const Mat& g_mean, const Mat& g_raw_var, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (!g_mean.allFinite() || !g_raw_var.allFinite()) {
    throw NumericError("adam_step: non-finite gradient");
  }
  p.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.step));

  const auto update = [&](Mat& x, Mat& m, Mat& v, const Mat& g) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
#pragma omp parallel for schedule(static)
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double mh = m(r, c) / bc1;
        const double vh = v(r, c) / bc2;
        x(r, c) -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  };
  update(p.mean, p.m_mean, p.v_mean, g_mean);
  update(p.raw_var, p.m_raw_var, p.v_raw_var, g_raw_var);
}

struct LossBreakdown {
  double bpr = 0.0;
  double contrastive = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

namespace detail {

struct ForwardOut {
  Tape tape;
  EncoderNodes enc;
  LossNodes loss;
  int mean_leaf = -1;
  int raw_var_leaf = -1;
};

inline ForwardOut build_step(const TrainConfig& cfg, const ModelParams& params,
                             const InteractionGraph& graph, const Batch& batch) {
  ForwardOut f;
  f.mean_leaf = f.tape.leaf(params.mean);
  f.raw_var_leaf = f.tape.leaf(params.raw_var);
  const int var0 = f.tape.softplus_floor(f.raw_var_leaf, kVarianceFloor);
  f.enc = encoder_on_tape(f.tape, f.mean_leaf, var0, graph, cfg.layers, cfg.encoder,
                          cfg.variance_rule);
  f.loss = total_loss_on_tape(f.tape, f.enc, batch, graph, cfg.loss_config());
  return f;
}

inline LossBreakdown read_components(const ForwardOut& f) {
  LossBreakdown out;
  out.bpr = f.tape.scalar(f.loss.bpr);
  out.contrastive = f.loss.contrastive >= 0 ? f.tape.scalar(f.loss.contrastive) : 0.0;
  out.reg = f.loss.reg >= 0 ? f.tape.scalar(f.loss.reg) : 0.0;
  out.total = f.tape.scalar(f.loss.total);
  return out;
}

}  // namespace detail

/// Full objective on a fixed batch, forward only. Finite-difference oracles
/// drive this while perturbing coordinates of `params`.
inline LossBreakdown loss_forward(const TrainConfig& cfg, const ModelParams& params,
                                  const InteractionGraph& graph, const Batch& batch) {
  const auto f = detail::build_step(cfg, params, graph, batch);
  return detail::read_components(f);
}

/// One optimization step: forward, backward, Adam. Returns the component
/// values at the pre-update parameters.
inline LossBreakdown train_step(const TrainConfig& cfg, ModelParams& params,
                                const InteractionGraph& graph, const Batch& batch) {
  auto f = detail::build_step(cfg, params, graph, batch);
  f.tape.backward(f.loss.total);
  const auto out = detail::read_components(f);
  adam_step(params, f.tape.grad(f.mean_leaf), f.tape.grad(f.raw_var_leaf), cfg.lr);
  return out;
}

/// Analytic gradient of the full objective on a fixed batch.
inline std::pair<Mat, Mat> loss_gradients(const TrainConfig& cfg, const ModelParams& params,
                                          const InteractionGraph& graph, const Batch& batch) {
  auto f = detail::build_step(cfg, params, graph, batch);
  f.tape.backward(f.loss.total);
  return {f.tape.grad(f.mean_leaf), f.tape.grad(f.raw_var_leaf)};
}

struct EpochLog {
  std::int32_t epoch = 0;
  double l_bpr = 0.0;
  double l_wpc = 0.0;
  double l_reg = 0.0;
  double l_total = 0.0;
  double recall20 = std::numeric_limits<double>::quiet_NaN();
  double ndcg20 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

/// Hook for validation metrics during training; wired up by the CLI so the
/// trainer does not depend on the evaluator.
using EvalHook = std::function<std::pair<double, double>(const ModelParams&)>;
using EpochHook = std::function<void(const EpochLog&)>;

/// Runs the epoch loop: each epoch shuffles the train edges, walks them in
/// batches with one sampled negative per positive, rebuilds the forward pass
/// (attention included) per batch, and applies Adam. Loss components are
/// averaged over the epoch's batches. Throws NumericError with the epoch and
/// batch index if the loss stops being finite.
inline TrainResult train(const TrainConfig& cfg, const InteractionGraph& graph,
                         const EvalHook& eval_hook = nullptr,
                         const EpochHook& epoch_hook = nullptr) {
  cfg.validate();
  if (cfg.threads > 0) set_num_threads(cfg.threads);

  TrainResult result;
  result.params = init_params(cfg, graph.num_users, graph.num_items);

  std::vector<std::int64_t> edge_order(graph.num_edges());
  std::vector<std::int32_t> edge_user(graph.num_edges());
  for (std::int32_t u = 0; u < graph.num_users; ++u) {
    for (std::int64_t e = graph.user_ptr[u]; e < graph.user_ptr[u + 1]; ++e) edge_user[e] = u;
  }
  for (std::int64_t e = 0; e < graph.num_edges(); ++e) edge_order[e] = e;

  Rng rng(mix_seed(cfg.seed, 0x5e5d));
  for (std::int32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(edge_order);
    LossBreakdown sums;
    std::int32_t batches = 0;

    for (std::size_t at = 0; at < edge_order.size(); at += cfg.batch_size) {
      const std::size_t stop = std::min(edge_order.size(), at + cfg.batch_size);
      Batch batch;
      for (std::size_t b = at; b < stop; ++b) {
        const std::int64_t e = edge_order[b];
        const std::int32_t u = edge_user[e];
        std::int32_t j = -1;
        for (int attempt = 0; attempt < 100; ++attempt) {
          const auto cand = static_cast<std::int32_t>(rng.index(graph.num_items));
          if (!graph.has_edge(u, cand)) {
            j = cand;
            break;
          }
        }
        if (j < 0) {
          std::vector<std::int32_t> complement;
          for (std::int32_t cand = 0; cand < graph.num_items; ++cand) {
            if (!graph.has_edge(u, cand)) complement.push_back(cand);
          }
          if (complement.empty()) continue;
          j = complement[rng.index(complement.size())];
        }
        batch.users.push_back(u);
        batch.pos_items.push_back(graph.user_adj[e]);
        batch.neg_items.push_back(j);
      }
      if (batch.size() < 2 && cfg.loss != LossKind::BprOnly) continue;
      if (batch.size() == 0) continue;

      const auto step = train_step(cfg, result.params, graph, batch);
      if (!std::isfinite(step.total)) {
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches));
      }
      sums.bpr += step.bpr;
      sums.contrastive += step.contrastive;
      sums.reg += step.reg;
      sums.total += step.total;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    if (batches > 0) {
      log.l_bpr = sums.bpr / batches;
      log.l_wpc = sums.contrastive / batches;
      log.l_reg = sums.reg / batches;
      log.l_total = sums.total / batches;
    }
    if (eval_hook && cfg.eval_every > 0 &&
        (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      std::tie(log.recall20, log.ndcg20) = eval_hook(result.params);
    }
    if (epoch_hook) epoch_hook(log);
    result.log.push_back(log);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "GREC1" magic, little-endian u32 header fields (dim,
// layers, num_users, num_items, encoder, variance rule, loss), then the mean
// and raw-variance tables as little-endian f64, row-major.

struct CheckpointHeader {
  std::int32_t dim = 0;
  std::int32_t layers = 0;
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;
  EncoderKind encoder = EncoderKind::Wgat;
  VarianceRule variance_rule = VarianceRule::ASquared;
  LossKind loss = LossKind::BprWpc;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_table(std::ostream& os, const Mat& m) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline void read_table(std::istream& is, Mat& m) {
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const CheckpointHeader& header) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  os.write("GREC1", 5);
  detail::write_u32(os, static_cast<std::uint32_t>(header.dim));
  detail::write_u32(os, static_cast<std::uint32_t>(header.layers));
  detail::write_u32(os, static_cast<std::uint32_t>(header.num_users));
  detail::write_u32(os, static_cast<std::uint32_t>(header.num_items));
  detail::write_u32(os, static_cast<std::uint32_t>(header.encoder));
  detail::write_u32(os, static_cast<std::uint32_t>(header.variance_rule));
  detail::write_u32(os, static_cast<std::uint32_t>(header.loss));
  detail::write_table(os, params.mean);
  detail::write_table(os, params.raw_var);
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

inline std::pair<ModelParams, CheckpointHeader> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "GREC1", 5) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path);
  }
  CheckpointHeader h;
  h.dim = static_cast<std::int32_t>(detail::read_u32(is));
  h.layers = static_cast<std::int32_t>(detail::read_u32(is));
  h.num_users = static_cast<std::int32_t>(detail::read_u32(is));
  h.num_items = static_cast<std::int32_t>(detail::read_u32(is));
  h.encoder = static_cast<EncoderKind>(detail::read_u32(is));
  h.variance_rule = static_cast<VarianceRule>(detail::read_u32(is));
  h.loss = static_cast<LossKind>(detail::read_u32(is));

  ModelParams p;
  p.num_users = h.num_users;
  p.num_items = h.num_items;
  p.dim = h.dim;
  const std::int32_t n = p.num_nodes();
  p.mean.resize(n, h.dim);
  p.raw_var.resize(n, h.dim);
  detail::read_table(is, p.mean);
  detail::read_table(is, p.raw_var);
  if (!is) throw IoError("load_checkpoint: truncated file " + path);
  p.m_mean = Mat::Zero(n, h.dim);
  p.v_mean = Mat::Zero(n, h.dim);
  p.m_raw_var = Mat::Zero(n, h.dim);
  p.v_raw_var = Mat::Zero(n, h.dim);
  return {std::move(p), h};
}

/// Final embeddings for scoring: encoder forward from materialized layer-0.
inline LayerStack encode(const ModelParams& params, const InteractionGraph& graph,
                         std::int32_t layers, EncoderKind kind, VarianceRule rule) {
  const Mat var0 = params.variances();
  return kind == EncoderKind::Wgat ? wgat_forward(params.mean, var0, graph, layers, rule)
                                   : lightgcn_gauss_forward(params.mean, var0, graph, layers);
}

}  // namespace grec
