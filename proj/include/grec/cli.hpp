#pragma once

#include <chrono>
#include <iomanip>

#include <CLI11.hpp>

#include "grec/data_io.hpp"
#include "grec/evaluator.hpp"
#include "grec/trainer.hpp"

namespace grec::cli {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 numerical/acceptance failure, 2 usage or IO error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitNumeric = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

class PhaseTimer {
 public:
  void start(const std::string& name) {
    name_ = name;
    t0_ = std::chrono::steady_clock::now();
  }
  void stop() {
    const auto dt = std::chrono::steady_clock::now() - t0_;
    phases_.emplace_back(name_,
                         std::chrono::duration_cast<std::chrono::duration<double>>(dt).count());
  }
  const std::vector<std::pair<std::string, double>>& phases() const { return phases_; }

 private:
  std::string name_;
  std::chrono::steady_clock::time_point t0_;
  std::vector<std::pair<std::string, double>> phases_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  os << text;
}

inline std::string cache_checksum(const std::string& cache_dir) {
  const auto manifest =
      grec::detail::read_file(std::filesystem::path(cache_dir) / "manifest.txt");
  return sha256_hex(manifest.data(), manifest.size());
}

inline void write_run_manifest(const std::filesystem::path& out_dir, const std::string& command,
                               const std::vector<std::pair<std::string, std::string>>& config,
                               const PhaseTimer& timer) {
  std::ostringstream os;
  os << "version=" << kVersion << "\n";
  os << "command=" << command << "\n";
  for (const auto& [k, v] : config) os << k << "=" << v << "\n";
  for (const auto& [name, secs] : timer.phases()) {
    os << "phase." << name << "_seconds=" << secs << "\n";
  }
  write_text(out_dir / "run_manifest.txt", os.str());
}

inline std::string epoch_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,l_bpr,l_wpc,l_reg,l_total,recall20,ndcg20\n";
  for (const auto& e : log) {
    os << e.epoch << "," << e.l_bpr << "," << e.l_wpc << "," << e.l_reg << "," << e.l_total
       << ",";
    if (std::isfinite(e.recall20)) os << e.recall20;
    os << ",";
    if (std::isfinite(e.ndcg20)) os << e.ndcg20;
    os << "\n";
  }
  return os.str();
}

inline EncoderKind parse_encoder(const std::string& s) {
  if (s == "wgat") return EncoderKind::Wgat;
  if (s == "lightgcn" || s == "lightgcn_gauss") return EncoderKind::LightGcnGauss;
  throw ContractViolation("unknown encoder: " + s + " (valid: wgat, lightgcn_gauss)");
}

inline VarianceRule parse_variance_rule(const std::string& s) {
  if (s == "a2") return VarianceRule::ASquared;
  if (s == "a1" || s == "single") return VarianceRule::ASingle;
  throw ContractViolation("unknown variance rule: " + s + " (valid: a2, a1)");
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "bpr_only") return LossKind::BprOnly;
  if (s == "bpr+wpc") return LossKind::BprWpc;
  if (s == "bpr+kl" || s == "bpr+kl_contrastive") return LossKind::BprKl;
  throw ContractViolation("unknown loss: " + s + " (valid: bpr_only, bpr+wpc, bpr+kl)");
}

inline std::string encoder_name(EncoderKind k) {
  return k == EncoderKind::Wgat ? "wgat" : "lightgcn_gauss";
}

inline std::string variance_rule_name(VarianceRule r) {
  return r == VarianceRule::ASquared ? "a2" : "a1";
}

inline std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::BprOnly:
      return "bpr_only";
    case LossKind::BprWpc:
      return "bpr+wpc";
    case LossKind::BprKl:
      return "bpr+kl";
  }
  return "?";
}

struct TrainFlags {
  std::string cache;
  std::string out;
  TrainConfig cfg;
  std::string encoder = "wgat";
  std::string variance_rule = "a2";
  std::string loss = "bpr+wpc";

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.encoder = parse_encoder(encoder);
    c.variance_rule = parse_variance_rule(variance_rule);
    c.loss = parse_loss(loss);
    c.validate();
    return c;
  }
};

inline void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--cache", f.cache, "preprocessed cache directory")->required();
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--dim", f.cfg.dim, "embedding size");
  cmd->add_option("--layers", f.cfg.layers, "propagation layers K");
  cmd->add_option("--lr", f.cfg.lr, "Adam learning rate");
  cmd->add_option("--reg", f.cfg.lambda, "L2 regularization strength");
  cmd->add_option("--batch", f.cfg.batch_size, "batch size");
  cmd->add_option("--tau", f.cfg.tau, "contrastive temperature");
  cmd->add_option("--omega", f.cfg.omega, "contrastive loss weight");
  cmd->add_option("--epochs", f.cfg.epochs, "training epochs");
  cmd->add_option("--seed", f.cfg.seed, "RNG seed");
  cmd->add_option("--encoder", f.encoder, "encoder: wgat | lightgcn_gauss");
  cmd->add_option("--variance-rule", f.variance_rule, "variance propagation: a2 | a1");
  cmd->add_option("--loss", f.loss, "loss: bpr_only | bpr+wpc | bpr+kl");
  cmd->add_option("--eval-every", f.cfg.eval_every, "validate every N epochs (0 = off)");
  cmd->add_option("--threads", f.cfg.threads, "worker thread cap (0 = hardware)");
}

inline std::vector<std::pair<std::string, std::string>> config_kv(const TrainConfig& c) {
  return {
      {"dim", std::to_string(c.dim)},
      {"layers", std::to_string(c.layers)},
      {"lr", std::to_string(c.lr)},
      {"reg", std::to_string(c.lambda)},
      {"batch", std::to_string(c.batch_size)},
      {"tau", std::to_string(c.tau)},
      {"omega", std::to_string(c.omega)},
      {"epochs", std::to_string(c.epochs)},
      {"seed", std::to_string(c.seed)},
      {"encoder", encoder_name(c.encoder)},
      {"variance_rule", variance_rule_name(c.variance_rule)},
      {"loss", loss_name(c.loss)},
  };
}

inline TrainResult run_training(const TrainConfig& cfg, const Dataset& ds,
                                const InteractionGraph& graph, bool verbose) {
  const auto test_by_user = test_items_by_user(ds.test, ds.num_users);
  EvalHook eval_hook = nullptr;
  if (cfg.eval_every > 0) {
    eval_hook = [&graph, &test_by_user, &cfg](const ModelParams& p) {
      const auto stack = encode(p, graph, cfg.layers, cfg.encoder, cfg.variance_rule);
      const auto r = evaluate_all(stack.mean, stack.var, graph, test_by_user, cfg.eval_topk);
      return std::make_pair(r.recall, r.ndcg);
    };
  }
  EpochHook epoch_hook = nullptr;
  if (verbose) {
    epoch_hook = [](const EpochLog& e) {
      std::cout << "epoch " << e.epoch << " total " << e.l_total << " bpr " << e.l_bpr
                << " wpc " << e.l_wpc << " reg " << e.l_reg;
      if (std::isfinite(e.recall20)) {
        std::cout << " recall@20 " << e.recall20 << " ndcg@20 " << e.ndcg20;
      }
      std::cout << "\n";
    };
  }
  return train(cfg, graph, eval_hook, epoch_hook);
}

}  // namespace detail

inline int cmd_preprocess(const std::string& input, const std::string& format, int k_core,
                          double ratio, std::uint64_t seed, double threshold,
                          const std::string& delimiter, std::vector<int> columns, bool header,
                          const std::string& out) {
  detail::PhaseTimer timer;
  timer.start("parse");
  std::vector<RawInteraction> raw;
  if (format == "movielens") {
    raw = parse_movielens(input);
  } else if (format == "delimited") {
    ColumnMap map;
    map.header = header;
    if (columns.size() >= 2) {
      map.user = columns[0];
      map.item = columns[1];
      map.rating = columns.size() > 2 ? columns[2] : -1;
      map.timestamp = columns.size() > 3 ? columns[3] : -1;
    }
    GREC_CHECK(delimiter.size() == 1, "preprocess: delimiter must be one character");
    raw = parse_delimited(input, delimiter[0], map);
  } else {
    throw ContractViolation("unknown format: " + format + " (valid: movielens, delimited)");
  }
  timer.stop();

  timer.start("preprocess");
  const auto ds = preprocess(raw, k_core, ratio, seed, threshold);
  timer.stop();

  timer.start("write");
  write_cache(ds, out);
  timer.stop();

  detail::write_run_manifest(out, "preprocess",
                             {{"input", input},
                              {"format", format},
                              {"k_core", std::to_string(k_core)},
                              {"ratio", std::to_string(ratio)},
                              {"seed", std::to_string(seed)},
                              {"threshold", std::to_string(threshold)}},
                             timer);
  std::cout << "cache written to " << out << ": " << ds.num_users << " users, " << ds.num_items
            << " items, " << ds.train.size() << " train / " << ds.test.size()
            << " test interactions\n";
  return kExitOk;
}

inline int cmd_train(const detail::TrainFlags& flags, bool verbose) {
  const TrainConfig cfg = flags.resolve();
  detail::PhaseTimer timer;

  timer.start("load");
  const Dataset ds = load_cache(flags.cache);
  const InteractionGraph graph = build_graph(ds.train, ds.num_users, ds.num_items);
  timer.stop();

  timer.start("train");
  const TrainResult result = detail::run_training(cfg, ds, graph, verbose);
  timer.stop();

  timer.start("write");
  std::filesystem::create_directories(flags.out);
  CheckpointHeader header;
  header.dim = cfg.dim;
  header.layers = cfg.layers;
  header.num_users = ds.num_users;
  header.num_items = ds.num_items;
  header.encoder = cfg.encoder;
  header.variance_rule = cfg.variance_rule;
  header.loss = cfg.loss;
  save_checkpoint((std::filesystem::path(flags.out) / "checkpoint.bin").string(), result.params,
                  header);
  detail::write_text(std::filesystem::path(flags.out) / "epoch_log.csv",
                     detail::epoch_csv(result.log));
  timer.stop();

  auto kv = detail::config_kv(cfg);
  kv.emplace_back("cache_sha256", detail::cache_checksum(flags.cache));
  detail::write_run_manifest(flags.out, "train", kv, timer);

  const double final_loss = result.log.empty() ? 0.0 : result.log.back().l_total;
  std::cout << "final total loss " << final_loss << " after " << result.log.size()
            << " epoch(s); checkpoint in " << flags.out << "\n";
  return std::isfinite(final_loss) ? kExitOk : kExitNumeric;
}

inline int cmd_evaluate(const std::string& checkpoint, const std::string& cache, int topk,
                        bool per_user, const std::string& out) {
  detail::PhaseTimer timer;
  timer.start("load");
  const Dataset ds = load_cache(cache);
  const InteractionGraph graph = build_graph(ds.train, ds.num_users, ds.num_items);
  const auto [params, header] = load_checkpoint(checkpoint);
  GREC_CHECK(params.num_users == ds.num_users && params.num_items == ds.num_items,
             "evaluate: checkpoint and cache disagree on counts");
  timer.stop();

  timer.start("evaluate");
  const auto stack = encode(params, graph, header.layers, header.encoder, header.variance_rule);
  const auto test_by_user = test_items_by_user(ds.test, ds.num_users);
  const auto result = evaluate_all(stack.mean, stack.var, graph, test_by_user, topk);
  timer.stop();

  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "user_id,recall,ndcg\n";
  if (per_user) {
    for (const auto& m : result.per_user) {
      csv << m.user << "," << m.recall << "," << m.ndcg << "\n";
    }
  }
  csv << "aggregate," << result.recall << "," << result.ndcg << "\n";

  std::cout << "recall@" << topk << " " << result.recall << " ndcg@" << topk << " "
            << result.ndcg << " over " << result.evaluable_users << " users\n";
  if (!out.empty()) {
    detail::write_text(std::filesystem::path(out) / "metrics.csv", csv.str());
    detail::write_run_manifest(out, "evaluate",
                               {{"checkpoint", checkpoint},
                                {"cache_sha256", detail::cache_checksum(cache)},
                                {"topk", std::to_string(topk)}},
                               timer);
  }
  return kExitOk;
}

inline int cmd_analyze(const std::string& checkpoint, const std::string& cache,
                       const std::string& categories_path, const std::string& report, int topk,
                       bool markdown, bool mean_entry, const std::string& out) {
  const Dataset ds = load_cache(cache);
  const InteractionGraph graph = build_graph(ds.train, ds.num_users, ds.num_items);
  const auto [params, header] = load_checkpoint(checkpoint);
  const auto stack = encode(params, graph, header.layers, header.encoder, header.variance_rule);

  const auto norm_of = [&](std::int32_t node) {
    const Vec v = stack.var.row(node).transpose();
    return mean_entry ? variance_mean_entry(v) : variance_norm(v);
  };

  CategoryTable categories;
  if (report == "o2" || report == "labels") {
    GREC_CHECK(!categories_path.empty(), "analyze: --categories required for this report");
    std::size_t dropped = 0;
    categories = map_categories(parse_categories(categories_path), ds, &dropped);
    if (dropped > 0) {
      std::cerr << "analyze: dropped " << dropped << " labeled item(s) absent from the cache\n";
    }
  }

  std::vector<BucketStat> buckets;
  std::string key_name;
  if (report == "o1") {
    std::vector<double> norms;
    std::vector<std::int64_t> counts;
    for (std::int32_t u = 0; u < ds.num_users; ++u) {
      norms.push_back(norm_of(u));
      counts.push_back(graph.user_degree(u));
    }
    buckets = group_by_o1(norms, counts);
    key_name = "o1";
  } else if (report == "o2") {
    std::vector<double> o2s, norms;
    for (std::int32_t u = 0; u < ds.num_users; ++u) {
      const auto topk_items = rank_items(u, stack.mean, stack.var, graph, topk);
      const auto o2 = o2_diversity(topk_items, categories);
      if (!o2) continue;
      o2s.push_back(*o2);
      norms.push_back(norm_of(u));
    }
    GREC_CHECK(!o2s.empty(), "analyze: no user had two labeled items in the top-k");
    buckets = group_by_o2(o2s, norms);
    key_name = "o2";
  } else if (report == "labels") {
    std::vector<double> norms(ds.num_items);
    for (std::int32_t i = 0; i < ds.num_items; ++i) norms[i] = norm_of(graph.item_node(i));
    buckets = variance_by_label_count(norms, categories);
    key_name = "labels";
  } else {
    throw ContractViolation("unknown report: " + report + " (valid: o1, o2, labels)");
  }

  const auto text = markdown ? render_buckets_markdown(buckets, key_name)
                             : render_buckets_csv(buckets, key_name);
  std::cout << text;
  if (!out.empty()) {
    detail::write_text(std::filesystem::path(out) / ("report_" + report + (markdown ? ".md" : ".csv")),
                       text);
  }
  return kExitOk;
}

inline int cmd_gradcheck(int users, int items, int edges, int samples, std::uint64_t seed,
                         double step, int dim, int batch_size) {
  if (step < 1e-6 || step > 1e-4) {
    std::cerr << "gradcheck: step " << step
              << " outside [1e-6, 1e-4]; truncation or cancellation error may dominate\n";
  }
  GREC_CHECK(users > 0 && items > 0 && edges > 0, "gradcheck: sizes must be positive");
  GREC_CHECK(edges <= users * items, "gradcheck: more edges than user-item pairs");

  // Random bipartite toy graph: a shuffled prefix of all pairs.
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
  for (std::int32_t u = 0; u < users; ++u) {
    for (std::int32_t i = 0; i < items; ++i) pairs.emplace_back(u, i);
  }
  Rng rng(mix_seed(seed, 0x6c6c));
  rng.shuffle(pairs);
  InteractionSet train;
  for (int e = 0; e < edges; ++e) pairs_to_set: {
    train.triples.push_back({pairs[e].first, pairs[e].second, 0});
  }
  const auto graph = build_graph(train, users, items);

  TrainConfig cfg;
  cfg.dim = dim;
  cfg.layers = 2;
  cfg.loss = LossKind::BprWpc;
  cfg.encoder = EncoderKind::Wgat;
  cfg.seed = seed;

  ModelParams params = init_params(cfg, users, items, seed);
  Batch batch = sample_triplets(graph, std::min<std::int32_t>(batch_size, edges), rng);

  const auto [g_mean, g_raw] = loss_gradients(cfg, params, graph, batch);
  std::vector<double*> coords;
  std::vector<double> analytic;
  for (Eigen::Index i = 0; i < params.mean.size(); ++i) {
    coords.push_back(params.mean.data() + i);
    analytic.push_back(g_mean.data()[i]);
  }
  for (Eigen::Index i = 0; i < params.raw_var.size(); ++i) {
    coords.push_back(params.raw_var.data() + i);
    analytic.push_back(g_raw.data()[i]);
  }
  const auto loss = [&]() { return loss_forward(cfg, params, graph, batch).total; };
  const auto report = finite_diff_check(loss, coords, analytic, step,
                                        static_cast<std::size_t>(samples), mix_seed(seed, 0xfd));

  std::cout << "gradcheck: max relative error " << report.max_rel_err << " over "
            << std::min<std::size_t>(samples, coords.size()) << " coordinates\n";
  const bool pass = report.ok(1e-4);
  std::cout << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? kExitOk : kExitNumeric;
}

inline int cmd_stability(const std::string& cache, const std::string& batch_sizes,
                         const std::string& arms, int epochs, std::uint64_t seed,
                         const std::string& out) {
  const Dataset ds = load_cache(cache);
  const InteractionGraph graph = build_graph(ds.train, ds.num_users, ds.num_items);
  std::filesystem::create_directories(out);

  std::vector<int> batches;
  for (const auto tok : grec::detail::split_view(batch_sizes, ",")) {
    batches.push_back(std::stoi(std::string(tok)));
  }
  std::vector<std::string> arm_names;
  for (const auto tok : grec::detail::split_view(arms, ",")) {
    arm_names.emplace_back(tok);
  }
  GREC_CHECK(!batches.empty() && !arm_names.empty(), "stability: need batch sizes and arms");

  detail::PhaseTimer timer;
  timer.start("runs");
  std::ostringstream summary;
  summary << "arm,batch,oscillation\n";
  for (const auto& arm : arm_names) {
    GREC_CHECK(arm == "w2" || arm == "kl", "stability: arm must be w2 or kl");
    for (const int b : batches) {
      TrainConfig cfg;
      cfg.batch_size = b;
      cfg.epochs = epochs;
      cfg.seed = seed;
      cfg.loss = arm == "w2" ? LossKind::BprWpc : LossKind::BprKl;
      const auto result = detail::run_training(cfg, ds, graph, false);

      std::vector<double> curve;
      for (const auto& e : result.log) curve.push_back(e.l_total);
      const double osc = oscillation_statistic(curve, 100);
      summary << arm << "," << b << "," << osc << "\n";

      std::ostringstream csv;
      csv << std::setprecision(17);
      csv << "epoch,l_bpr,l_wpc,l_reg,l_total\n";
      for (const auto& e : result.log) {
        csv << e.epoch << "," << e.l_bpr << "," << e.l_wpc << "," << e.l_reg << ","
            << e.l_total << "\n";
      }
      detail::write_text(std::filesystem::path(out) /
                             ("loss_curve_" + arm + "_b" + std::to_string(b) + ".csv"),
                         csv.str());
      std::cout << "arm " << arm << " batch " << b << " oscillation " << osc << "\n";
    }
  }
  timer.stop();
  detail::write_text(std::filesystem::path(out) / "stability_summary.csv", summary.str());
  detail::write_run_manifest(out, "stability",
                             {{"cache_sha256", detail::cache_checksum(cache)},
                              {"batch_sizes", batch_sizes},
                              {"arms", arms},
                              {"epochs", std::to_string(epochs)},
                              {"seed", std::to_string(seed)}},
                             timer);
  return kExitOk;
}

/// Parses argv-style arguments (without the program name) and dispatches.
inline int run(const std::vector<std::string>& args) {
  CLI::App app{"grec: Gaussian-embedding graph recommender"};
  app.require_subcommand(1);

  // preprocess
  std::string pp_input, pp_format = "movielens", pp_out, pp_delimiter = "\t";
  int pp_kcore = 5;
  double pp_ratio = 0.8, pp_threshold = 1.0;
  std::uint64_t pp_seed = 42;
  std::vector<int> pp_columns;
  bool pp_header = false;
  auto* pp = app.add_subcommand("preprocess", "parse, filter, split and cache a dataset");
  pp->add_option("--input", pp_input, "raw interaction file")->required();
  pp->add_option("--format", pp_format, "movielens | delimited");
  pp->add_option("--k-core", pp_kcore, "k-core filter threshold");
  pp->add_option("--ratio", pp_ratio, "train fraction per user");
  pp->add_option("--seed", pp_seed, "split seed");
  pp->add_option("--threshold", pp_threshold, "binarization rating threshold");
  pp->add_option("--delimiter", pp_delimiter, "field delimiter for delimited format");
  pp->add_option("--columns", pp_columns, "column indices: user item [rating [timestamp]]");
  pp->add_flag("--header", pp_header, "first line is a header naming the columns");
  pp->add_option("--out", pp_out, "cache output directory")->required();

  // train
  detail::TrainFlags tf;
  bool tr_quiet = false;
  auto* tr = app.add_subcommand("train", "train a model from a cache");
  detail::add_train_flags(tr, tf);
  tr->add_flag("--quiet", tr_quiet, "suppress per-epoch output");

  // evaluate
  std::string ev_checkpoint, ev_cache, ev_out;
  int ev_topk = 20;
  bool ev_per_user = false;
  auto* ev = app.add_subcommand("evaluate", "full-ranking top-k evaluation");
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file")->required();
  ev->add_option("--cache", ev_cache, "cache directory")->required();
  ev->add_option("--topk", ev_topk, "ranking cutoff");
  ev->add_flag("--per-user", ev_per_user, "emit one CSV row per user");
  ev->add_option("--out", ev_out, "output directory (optional)");

  // analyze
  std::string an_checkpoint, an_cache, an_categories, an_report = "o1", an_out;
  int an_topk = 20;
  bool an_markdown = false, an_mean_entry = false;
  auto* an = app.add_subcommand("analyze", "uncertainty reports");
  an->add_option("--checkpoint", an_checkpoint, "checkpoint file")->required();
  an->add_option("--cache", an_cache, "cache directory")->required();
  an->add_option("--categories", an_categories, "item category file (MovieLens item format)");
  an->add_option("--report", an_report, "o1 | o2 | labels");
  an->add_option("--topk", an_topk, "ranking cutoff for the o2 report");
  an->add_flag("--markdown", an_markdown, "render tables as markdown");
  an->add_flag("--mean-entry", an_mean_entry,
               "report mean variance entry instead of the norm");
  an->add_option("--out", an_out, "output directory (optional)");

  // gradcheck
  int gc_users = 5, gc_items = 7, gc_edges = 20, gc_samples = 200, gc_dim = 8, gc_batch = 16;
  std::uint64_t gc_seed = 42;
  double gc_step = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full gradient");
  gc->add_option("--users", gc_users, "toy graph users");
  gc->add_option("--items", gc_items, "toy graph items");
  gc->add_option("--edges", gc_edges, "toy graph edges");
  gc->add_option("--samples", gc_samples, "sampled coordinates");
  gc->add_option("--seed", gc_seed, "RNG seed");
  gc->add_option("--step", gc_step, "finite-difference step");
  gc->add_option("--dim", gc_dim, "embedding size");
  gc->add_option("--batch", gc_batch, "batch size");

  // stability
  std::string st_cache, st_batches = "512,1024,2048", st_arms = "w2,kl", st_out;
  int st_epochs = 100;
  std::uint64_t st_seed = 42;
  auto* st = app.add_subcommand("stability", "loss-curve comparison of w2 and kl arms");
  st->add_option("--cache", st_cache, "cache directory")->required();
  st->add_option("--batch-sizes", st_batches, "comma-separated batch sizes");
  st->add_option("--arms", st_arms, "comma-separated arms from {w2, kl}");
  st->add_option("--epochs", st_epochs, "epochs per run");
  st->add_option("--seed", st_seed, "RNG seed");
  st->add_option("--out", st_out, "output directory")->required();

  std::vector<char*> argv;
  std::vector<std::string> storage = args;
  std::string prog = "grec";
  argv.push_back(prog.data());
  for (auto& a : storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (pp->parsed()) {
      return cmd_preprocess(pp_input, pp_format, pp_kcore, pp_ratio, pp_seed, pp_threshold,
                            pp_delimiter, pp_columns, pp_header, pp_out);
    }
    if (tr->parsed()) return cmd_train(tf, !tr_quiet);
    if (ev->parsed()) return cmd_evaluate(ev_checkpoint, ev_cache, ev_topk, ev_per_user, ev_out);
    if (an->parsed()) {
      return cmd_analyze(an_checkpoint, an_cache, an_categories, an_report, an_topk, an_markdown,
                         an_mean_entry, an_out);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(gc_users, gc_items, gc_edges, gc_samples, gc_seed, gc_step, gc_dim,
                           gc_batch);
    }
    if (st->parsed()) {
      return cmd_stability(st_cache, st_batches, st_arms, st_epochs, st_seed, st_out);
    }
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace grec::cli
