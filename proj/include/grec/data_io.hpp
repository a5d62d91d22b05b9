#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <openssl/evp.h>

#include "grec/graph.hpp"
#include "grec/uncertainty.hpp"

namespace grec {

struct RawInteraction {
  std::string user;
  std::string item;
  double rating = 1.0;
  std::int64_t timestamp = 0;
};

struct ParseStats {
  std::size_t total_lines = 0;
  std::size_t malformed = 0;
};

namespace detail {

inline std::vector<std::string_view> split_view(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t at = 0;
  while (true) {
    const auto pos = line.find(sep, at);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(at));
      return out;
    }
    out.push_back(line.substr(at, pos - at));
    at = pos + sep.size();
  }
}

inline bool parse_double(std::string_view s, double& out) {
  const auto end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

inline bool parse_int64(std::string_view s, std::int64_t& out) {
  const auto end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

inline void check_malformed_rate(const ParseStats& stats, const std::string& path) {
  if (stats.total_lines > 0 &&
      static_cast<double>(stats.malformed) > 0.01 * static_cast<double>(stats.total_lines)) {
    throw IoError("parse: more than 1% malformed lines in " + path + " (" +
                  std::to_string(stats.malformed) + "/" + std::to_string(stats.total_lines) + ")");
  }
}

}  // namespace detail

/// MovieLens ratings format: `user::item::rating::timestamp`, one record per
/// line. Malformed lines are counted and skipped; more than 1% of them is an
/// error.
inline std::vector<RawInteraction> parse_movielens(const std::string& path,
                                                   ParseStats* stats_out = nullptr) {
  std::ifstream is(path);
  if (!is) throw IoError("parse_movielens: cannot open " + path);
  std::vector<RawInteraction> out;
  ParseStats stats;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++stats.total_lines;
    const auto fields = detail::split_view(line, "::");
    RawInteraction r;
    if (fields.size() != 4 || fields[0].empty() || fields[1].empty() ||
        !detail::parse_double(fields[2], r.rating) ||
        !detail::parse_int64(fields[3], r.timestamp)) {
      ++stats.malformed;
      continue;
    }
    r.user = std::string(fields[0]);
    r.item = std::string(fields[1]);
    out.push_back(std::move(r));
  }
  detail::check_malformed_rate(stats, path);
  if (stats.total_lines == 0) std::cerr << "parse_movielens: " << path << " is empty\n";
  if (stats_out) *stats_out = stats;
  return out;
}

/// Column positions for delimited files; -1 means absent. When `header` is
/// true the first line is matched against the names user/item/rating/timestamp.
struct ColumnMap {
  int user = 0;
  int item = 1;
  int rating = -1;
  int timestamp = -1;
  bool header = false;
};

/// Generic single-character-delimited parser. Missing rating/timestamp
/// columns default to 1.0 and 0.
inline std::vector<RawInteraction> parse_delimited(const std::string& path, char delimiter,
                                                   ColumnMap columns,
                                                   ParseStats* stats_out = nullptr) {
  std::ifstream is(path);
  if (!is) throw IoError("parse_delimited: cannot open " + path);
  std::vector<RawInteraction> out;
  ParseStats stats;
  std::string line;
  const std::string sep(1, delimiter);
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_view(line, sep);
    if (first && columns.header) {
      first = false;
      columns.user = columns.item = columns.rating = columns.timestamp = -1;
      for (int c = 0; c < static_cast<int>(fields.size()); ++c) {
        if (fields[c] == "user") columns.user = c;
        if (fields[c] == "item") columns.item = c;
        if (fields[c] == "rating") columns.rating = c;
        if (fields[c] == "timestamp") columns.timestamp = c;
      }
      GREC_CHECK(columns.user >= 0 && columns.item >= 0,
                 "parse_delimited: header lacks user/item columns");
      continue;
    }
    first = false;
    ++stats.total_lines;
    const int needed = std::max({columns.user, columns.item, columns.rating, columns.timestamp});
    RawInteraction r;
    bool ok = static_cast<int>(fields.size()) > needed && !fields[columns.user].empty() &&
              !fields[columns.item].empty();
    if (ok && columns.rating >= 0) ok = detail::parse_double(fields[columns.rating], r.rating);
    if (ok && columns.timestamp >= 0) {
      ok = detail::parse_int64(fields[columns.timestamp], r.timestamp);
    }
    if (!ok) {
      ++stats.malformed;
      continue;
    }
    r.user = std::string(fields[columns.user]);
    r.item = std::string(fields[columns.item]);
    out.push_back(std::move(r));
  }
  detail::check_malformed_rate(stats, path);
  if (stats_out) *stats_out = stats;
  return out;
}

/// MovieLens item file: `item::title::Genre1|Genre2|...` keyed by item token.
/// Duplicate genre tokens collapse into the set.
inline std::unordered_map<std::string, std::set<std::string>> parse_categories(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("parse_categories: cannot open " + path);
  std::unordered_map<std::string, std::set<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_view(line, "::");
    if (fields.size() < 3 || fields[0].empty()) continue;
    auto& labels = out[std::string(fields[0])];
    for (const auto genre : detail::split_view(fields.back(), "|")) {
      if (!genre.empty()) labels.insert(std::string(genre));
    }
  }
  return out;
}

/// Fully preprocessed dataset: binarized, k-core filtered, densely
/// re-indexed, split. Token tables record the id -> original-token bijection.
struct Dataset {
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;
  InteractionSet train;
  InteractionSet test;
  std::vector<std::string> user_tokens;
  std::vector<std::string> item_tokens;
  std::vector<std::int32_t> users_without_test;

  // Pipeline settings recorded for the manifest.
  int k_core = 0;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  double threshold = 1.0;

  std::unordered_map<std::string, std::int32_t> item_id_by_token() const {
    std::unordered_map<std::string, std::int32_t> out;
    for (std::int32_t i = 0; i < num_items; ++i) out[item_tokens[i]] = i;
    return out;
  }
};

/// Binarize (rating >= threshold), deduplicate, k-core filter, re-index
/// densely in first-appearance order, split per user.
inline Dataset preprocess(const std::vector<RawInteraction>& raw, int k_core, double ratio,
                          std::uint64_t seed, double threshold = 1.0) {
  GREC_CHECK(k_core >= 1, "preprocess: k_core must be >= 1");
  GREC_CHECK(ratio > 0.0 && ratio < 1.0, "preprocess: ratio must lie in (0,1)");

  // Provisional dense ids in first-appearance order.
  std::unordered_map<std::string, std::int32_t> user_ids, item_ids;
  std::vector<std::string> user_tokens, item_tokens;
  std::unordered_set<std::int64_t> seen;
  InteractionSet all;
  for (const auto& r : raw) {
    if (r.rating < threshold) continue;
    const auto uid = user_ids.try_emplace(r.user, static_cast<std::int32_t>(user_tokens.size()));
    if (uid.second) user_tokens.push_back(r.user);
    const auto iid = item_ids.try_emplace(r.item, static_cast<std::int32_t>(item_tokens.size()));
    if (iid.second) item_tokens.push_back(r.item);
    const std::int64_t key =
        static_cast<std::int64_t>(uid.first->second) << 32 | iid.first->second;
    if (!seen.insert(key).second) continue;
    all.triples.push_back({uid.first->second, iid.first->second, r.timestamp});
  }

  std::vector<std::size_t> trace;
  const auto filtered = k_core_filter(all, k_core, &trace);
  if (filtered.empty()) {
    std::string msg = "preprocess: k-core left no interactions; survivors per iteration:";
    for (const auto s : trace) msg += " " + std::to_string(s);
    throw IoError(msg);
  }

  // Final dense re-index over survivors, again in first-appearance order.
  Dataset ds;
  std::unordered_map<std::int32_t, std::int32_t> user_remap, item_remap;
  InteractionSet reindexed;
  for (const auto& t : filtered.triples) {
    const auto u = user_remap.try_emplace(t.user, static_cast<std::int32_t>(user_remap.size()));
    if (u.second) ds.user_tokens.push_back(user_tokens[t.user]);
    const auto i = item_remap.try_emplace(t.item, static_cast<std::int32_t>(item_remap.size()));
    if (i.second) ds.item_tokens.push_back(item_tokens[t.item]);
    reindexed.triples.push_back({u.first->second, i.first->second, t.timestamp});
  }
  ds.num_users = static_cast<std::int32_t>(ds.user_tokens.size());
  ds.num_items = static_cast<std::int32_t>(ds.item_tokens.size());

  auto split = split_interactions(reindexed, ratio, seed);
  ds.train = std::move(split.train);
  ds.test = std::move(split.test);
  ds.users_without_test = std::move(split.users_without_test);
  ds.k_core = k_core;
  ds.ratio = ratio;
  ds.seed = seed;
  ds.threshold = threshold;
  return ds;
}

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int dlen = 0;
  if (EVP_Digest(data, len, digest, &dlen, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * dlen);
  for (unsigned int i = 0; i < dlen; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

namespace detail {

inline std::string edges_blob(const InteractionSet& set) {
  // Little-endian u32 pairs (user, item), in stored order.
  std::string blob;
  blob.reserve(set.size() * 8);
  const auto put_u32 = [&blob](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  for (const auto& t : set.triples) {
    put_u32(static_cast<std::uint32_t>(t.user));
    put_u32(static_cast<std::uint32_t>(t.item));
  }
  return blob;
}

inline InteractionSet edges_from_blob(const std::string& blob, SplitRole role) {
  GREC_CHECK(blob.size() % 8 == 0, "cache: edge section size must be a multiple of 8");
  InteractionSet set;
  set.role = role;
  const auto get_u32 = [&blob](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[at + i])) << (8 * i);
    }
    return static_cast<std::int32_t>(v);
  };
  for (std::size_t at = 0; at < blob.size(); at += 8) {
    set.triples.push_back({get_u32(at), get_u32(at + 4), 0});
  }
  return set;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cache: cannot open " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("cache: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cache: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string tokens_blob(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out += std::to_string(i);
    out += '\t';
    out += tokens[i];
    out += '\n';
  }
  return out;
}

inline std::vector<std::string> tokens_from_blob(const std::string& blob) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (at < blob.size()) {
    const auto nl = blob.find('\n', at);
    const auto line = blob.substr(at, nl - at);
    const auto tab = line.find('\t');
    GREC_CHECK(tab != std::string::npos, "cache: malformed token map line");
    out.push_back(line.substr(tab + 1));
    at = nl == std::string::npos ? blob.size() : nl + 1;
  }
  return out;
}

}  // namespace detail

/// Writes manifest + binary edge lists + token maps. The manifest is
/// human-readable key=value lines carrying the SHA-256 of every section, and
/// contains nothing volatile, so identical inputs give byte-identical caches.
inline void write_cache(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto train_blob = detail::edges_blob(ds.train);
  const auto test_blob = detail::edges_blob(ds.test);
  const auto user_blob = detail::tokens_blob(ds.user_tokens);
  const auto item_blob = detail::tokens_blob(ds.item_tokens);

  detail::write_file_atomic(fs::path(dir) / "train.bin", train_blob);
  detail::write_file_atomic(fs::path(dir) / "test.bin", test_blob);
  detail::write_file_atomic(fs::path(dir) / "user_map.tsv", user_blob);
  detail::write_file_atomic(fs::path(dir) / "item_map.tsv", item_blob);

  std::ostringstream m;
  m << "format=grec-cache-v1\n";
  m << "num_users=" << ds.num_users << "\n";
  m << "num_items=" << ds.num_items << "\n";
  m << "train_edges=" << ds.train.size() << "\n";
  m << "test_edges=" << ds.test.size() << "\n";
  m << "k_core=" << ds.k_core << "\n";
  m << "ratio=" << ds.ratio << "\n";
  m << "seed=" << ds.seed << "\n";
  m << "threshold=" << ds.threshold << "\n";
  m << "users_without_test=" << ds.users_without_test.size() << "\n";
  m << "sha256_train=" << sha256_hex(train_blob.data(), train_blob.size()) << "\n";
  m << "sha256_test=" << sha256_hex(test_blob.data(), test_blob.size()) << "\n";
  m << "sha256_user_map=" << sha256_hex(user_blob.data(), user_blob.size()) << "\n";
  m << "sha256_item_map=" << sha256_hex(item_blob.data(), item_blob.size()) << "\n";
  detail::write_file_atomic(fs::path(dir) / "manifest.txt", m.str());
}

inline std::unordered_map<std::string, std::string> read_manifest(const std::string& dir) {
  const auto text = detail::read_file(std::filesystem::path(dir) / "manifest.txt");
  std::unordered_map<std::string, std::string> kv;
  std::size_t at = 0;
  while (at < text.size()) {
    auto nl = text.find('\n', at);
    if (nl == std::string::npos) nl = text.size();
    const auto line = text.substr(at, nl - at);
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    at = nl + 1;
  }
  return kv;
}

/// Reads a cache written by write_cache, verifying section checksums.
inline Dataset load_cache(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto kv = read_manifest(dir);
  const auto need = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw IoError("cache: manifest missing key " + key);
    return it->second;
  };
  GREC_CHECK(need("format") == "grec-cache-v1", "cache: unknown format");

  Dataset ds;
  ds.num_users = std::stoi(need("num_users"));
  ds.num_items = std::stoi(need("num_items"));
  ds.k_core = std::stoi(need("k_core"));
  ds.ratio = std::stod(need("ratio"));
  ds.seed = std::stoull(need("seed"));
  ds.threshold = std::stod(need("threshold"));

  const auto verified = [&](const char* file, const std::string& key) {
    const auto blob = detail::read_file(fs::path(dir) / file);
    if (sha256_hex(blob.data(), blob.size()) != need(key)) {
      throw IoError(std::string("cache: checksum mismatch for ") + file);
    }
    return blob;
  };
  ds.train = detail::edges_from_blob(verified("train.bin", "sha256_train"), SplitRole::Train);
  ds.test = detail::edges_from_blob(verified("test.bin", "sha256_test"), SplitRole::Test);
  ds.user_tokens = detail::tokens_from_blob(verified("user_map.tsv", "sha256_user_map"));
  ds.item_tokens = detail::tokens_from_blob(verified("item_map.tsv", "sha256_item_map"));
  GREC_CHECK(static_cast<std::int32_t>(ds.user_tokens.size()) == ds.num_users,
             "cache: user map size mismatch");
  GREC_CHECK(static_cast<std::int32_t>(ds.item_tokens.size()) == ds.num_items,
             "cache: item map size mismatch");

  std::int32_t expected_train = std::stoi(need("train_edges"));
  std::int32_t expected_test = std::stoi(need("test_edges"));
  GREC_CHECK(static_cast<std::int32_t>(ds.train.size()) == expected_train,
             "cache: train edge count mismatch");
  GREC_CHECK(static_cast<std::int32_t>(ds.test.size()) == expected_test,
             "cache: test edge count mismatch");
  return ds;
}

/// Maps token-keyed categories onto dense item ids; items that never made it
/// through preprocessing are dropped with a count.
inline CategoryTable map_categories(
    const std::unordered_map<std::string, std::set<std::string>>& by_token,
    const Dataset& ds, std::size_t* dropped = nullptr) {
  CategoryTable out;
  const auto ids = ds.item_id_by_token();
  std::size_t miss = 0;
  for (const auto& [token, labels] : by_token) {
    const auto it = ids.find(token);
    if (it == ids.end()) {
      ++miss;
      continue;
    }
    out[it->second] = labels;
  }
  if (dropped) *dropped = miss;
  return out;
}

}  // namespace grec
