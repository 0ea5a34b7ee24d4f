#pragma once

// Synthetic unified search & recommendation data with planted structure.
//
// Every item belongs to a cluster and carries a fixed-length code whose first
// token encodes the cluster. Users live in one cluster. Recommendation targets
// walk a per-cluster successor cycle starting from the user's last recommended
// item; search targets come from the opposite cluster and arrive with a noisy
// copy of their code plus the cluster token as the query. History predicts rec
// targets, the query predicts src targets, and the two want different features.

#include <algorithm>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/error.hpp"
#include "gems/model_api.hpp"
#include "gems/rng.hpp"

namespace gems {

using ItemId = std::vector<int>;

struct DataConfig {
  std::size_t users = 200;
  std::size_t items = 128;
  std::size_t history_len = 6;  // N_max, the longest history a prompt keeps
  std::size_t min_interactions = 4;
  std::size_t id_len = 3;
  std::size_t alphabet = 16;
  std::size_t clusters = 8;
  std::size_t negatives = 99;
  double query_noise = 0.1;
  double transition_prob = 0.8;
  double src_fraction = 0.5;
};

struct Interaction {
  ItemId item;
  Task behavior = Task::rec;
  // id_len code symbols followed by the cluster index; present iff src.
  std::optional<std::vector<int>> query;
};

struct EvalRecord {
  std::size_t user = 0;
  std::vector<Interaction> history;
  std::optional<std::vector<int>> query;
  ItemId target;
  std::vector<ItemId> negatives;
  Task task = Task::rec;
};

struct Catalog {
  std::vector<ItemId> codes;
  std::vector<std::size_t> cluster_of;
};

struct Dataset {
  DataConfig config;
  Catalog catalog;
  std::vector<EvalRecord> train, valid, test;
  // Clean query-copy records with empty history: the general-knowledge corpus
  // used for pretraining, projector construction and the intent probe.
  std::vector<EvalRecord> probe;
};

inline void validate(const DataConfig& c) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::config, "dataset: " + msg); };
  if (c.users < 10) bad("users must be >= 10");
  if (c.items < 10) bad("items must be >= 10");
  if (c.items < c.negatives + 1) bad("items must exceed the negative count");
  if (c.id_len < 1) bad("id_len must be positive");
  if (c.alphabet < 2) bad("alphabet must be >= 2");
  if (c.clusters < 2 || c.clusters % 2 != 0) bad("clusters must be even and >= 2");
  if (c.alphabet % c.clusters != 0) bad("alphabet must be a multiple of clusters");
  if (c.min_interactions < 3) bad("min_interactions must be >= 3");
  if (c.min_interactions > c.history_len + 2) bad("min_interactions exceeds history_len + 2");
  if (c.query_noise < 0.0 || c.query_noise > 1.0) bad("query_noise must lie in [0, 1]");
  if (c.transition_prob < 0.0 || c.transition_prob > 1.0) bad("transition_prob must lie in [0, 1]");
  if (c.src_fraction < 0.0 || c.src_fraction > 1.0) bad("src_fraction must lie in [0, 1]");
  std::size_t capacity = c.alphabet / c.clusters;
  for (std::size_t p = 1; p < c.id_len; ++p) {
    capacity *= c.alphabet;
    if (capacity > c.items) break;
  }
  const std::size_t per_cluster = (c.items + c.clusters - 1) / c.clusters;
  if (capacity < per_cluster) bad("identifier space too small for the item count");
}

/// Token ids: specials, then one block of `alphabet` code tokens per code
/// position, then one token per cluster.
struct Vocabulary {
  enum Special : int { src_tag, rec_tag, empty_hist, no_query, sep, trunc, hist_src, hist_rec, qry, num_specials };

  std::size_t id_len = 3;
  std::size_t alphabet = 16;
  std::size_t clusters = 8;

  static Vocabulary from(const DataConfig& c) { return {c.id_len, c.alphabet, c.clusters}; }

  int code_token(std::size_t pos, int symbol) const {
    return num_specials + static_cast<int>(pos * alphabet) + symbol;
  }
  int cluster_token(std::size_t c) const { return num_specials + static_cast<int>(id_len * alphabet + c); }
  std::size_t size() const { return num_specials + id_len * alphabet + clusters; }

  std::vector<int> item_tokens(const ItemId& item) const {
    std::vector<int> out(item.size());
    for (std::size_t p = 0; p < item.size(); ++p) out[p] = code_token(p, item[p]);
    return out;
  }
};

namespace detail {

inline void check_item(const ItemId& item, const DataConfig& c, const char* what) {
  if (item.size() != c.id_len) fail(ErrorKind::invalid_argument, std::string(what) + ": identifier length mismatch");
  for (int t : item)
    if (t < 0 || static_cast<std::size_t>(t) >= c.alphabet)
      fail(ErrorKind::invalid_argument, std::string(what) + ": identifier token outside the alphabet");
}

inline void check_query(const std::optional<std::vector<int>>& q, Task task, const DataConfig& c) {
  if (q.has_value() != (task == Task::src)) fail(ErrorKind::invalid_argument, "record: query presence must match task");
  if (!q) return;
  if (q->size() != c.id_len + 1) fail(ErrorKind::invalid_argument, "record: query length mismatch");
  for (std::size_t p = 0; p < c.id_len; ++p)
    if ((*q)[p] < 0 || static_cast<std::size_t>((*q)[p]) >= c.alphabet)
      fail(ErrorKind::invalid_argument, "record: query token outside the alphabet");
  if (q->back() < 0 || static_cast<std::size_t>(q->back()) >= c.clusters)
    fail(ErrorKind::invalid_argument, "record: query cluster out of range");
}

}  // namespace detail

inline void validate(const EvalRecord& r, const DataConfig& c) {
  detail::check_item(r.target, c, "record target");
  detail::check_query(r.query, r.task, c);
  for (const auto& h : r.history) {
    detail::check_item(h.item, c, "history item");
    detail::check_query(h.query, h.behavior, c);
  }
  if (r.negatives.size() != c.negatives) fail(ErrorKind::invalid_argument, "record: wrong number of negatives");
  std::vector<ItemId> all = r.negatives;
  for (const auto& n : all) detail::check_item(n, c, "negative");
  all.push_back(r.target);
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end())
    fail(ErrorKind::invalid_argument, "record: negatives must be distinct and differ from the target");
}

namespace detail {

inline Catalog make_catalog(const DataConfig& c, Rng& rng) {
  Catalog cat;
  cat.codes.resize(c.items);
  cat.cluster_of.resize(c.items);
  const std::size_t lead = c.alphabet / c.clusters;
  std::size_t capacity = lead;
  for (std::size_t p = 1; p < c.id_len; ++p) capacity *= c.alphabet;
  for (std::size_t cl = 0; cl < c.clusters; ++cl) {
    std::vector<std::size_t> members;
    for (std::size_t i = cl; i < c.items; i += c.clusters) members.push_back(i);
    // draw distinct code indices from this cluster's code space
    std::vector<std::size_t> pool;
    if (capacity <= 4 * members.size() + 4096) {
      pool.resize(capacity);
      for (std::size_t k = 0; k < capacity; ++k) pool[k] = k;
      rng.shuffle(pool);
      pool.resize(members.size());
    } else {
      while (pool.size() < members.size()) {
        const std::size_t k = rng.below(capacity);
        if (std::find(pool.begin(), pool.end(), k) == pool.end()) pool.push_back(k);
      }
    }
    for (std::size_t m = 0; m < members.size(); ++m) {
      std::size_t k = pool[m];
      ItemId code(c.id_len);
      code[0] = static_cast<int>(cl * lead + k % lead);
      k /= lead;
      for (std::size_t p = 1; p < c.id_len; ++p) {
        code[p] = static_cast<int>(k % c.alphabet);
        k /= c.alphabet;
      }
      cat.codes[members[m]] = std::move(code);
      cat.cluster_of[members[m]] = cl;
    }
  }
  return cat;
}

inline std::vector<int> noisy_query(const ItemId& code, std::size_t cluster, const DataConfig& c, Rng& rng) {
  std::vector<int> q(code.begin(), code.end());
  for (auto& t : q)
    if (rng.bernoulli(c.query_noise)) t = static_cast<int>(rng.below(c.alphabet));
  q.push_back(static_cast<int>(cluster));
  return q;
}

inline std::vector<ItemId> sample_negatives(std::size_t target, const Catalog& cat, std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool;
  pool.reserve(cat.codes.size() - 1);
  for (std::size_t i = 0; i < cat.codes.size(); ++i)
    if (i != target) pool.push_back(i);
  std::vector<ItemId> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::swap(pool[k], pool[k + rng.below(pool.size() - k)]);
    out.push_back(cat.codes[pool[k]]);
  }
  return out;
}

}  // namespace detail

inline Dataset generate_dataset(std::uint64_t seed, const DataConfig& c) {
  validate(c);
  Rng rng(seed, "dataset");
  Dataset ds;
  ds.config = c;
  ds.catalog = detail::make_catalog(c, rng);
  const auto& cat = ds.catalog;

  std::vector<std::vector<std::size_t>> members(c.clusters);
  for (std::size_t i = 0; i < c.items; ++i) members[cat.cluster_of[i]].push_back(i);
  std::vector<std::size_t> successor(c.items);
  for (auto& m : members) {
    std::vector<std::size_t> cycle = m;
    rng.shuffle(cycle);
    for (std::size_t k = 0; k < cycle.size(); ++k) successor[cycle[k]] = cycle[(k + 1) % cycle.size()];
  }

  for (std::size_t u = 0; u < c.users; ++u) {
    const std::size_t home = rng.below(c.clusters);
    const std::size_t away = (home + c.clusters / 2) % c.clusters;
    const std::size_t len = c.min_interactions + rng.below(c.history_len + 3 - c.min_interactions);
    std::vector<Interaction> seq;
    std::vector<std::size_t> seq_items;
    std::optional<std::size_t> last_rec;
    for (std::size_t k = 0; k < len; ++k) {
      Interaction x;
      std::size_t item;
      if (rng.bernoulli(c.src_fraction)) {
        item = members[away][rng.below(members[away].size())];
        x.behavior = Task::src;
        x.query = detail::noisy_query(cat.codes[item], away, c, rng);
      } else {
        if (last_rec && rng.bernoulli(c.transition_prob))
          item = successor[*last_rec];
        else
          item = members[home][rng.below(members[home].size())];
        x.behavior = Task::rec;
        last_rec = item;
      }
      x.item = cat.codes[item];
      seq.push_back(std::move(x));
      seq_items.push_back(item);
    }
    for (std::size_t k = 0; k < len; ++k) {
      EvalRecord r;
      r.user = u;
      r.history.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(k));
      r.task = seq[k].behavior;
      r.query = seq[k].query;
      r.target = seq[k].item;
      r.negatives = detail::sample_negatives(seq_items[k], cat, c.negatives, rng);
      if (k + 1 == len)
        ds.test.push_back(std::move(r));
      else if (k + 2 == len)
        ds.valid.push_back(std::move(r));
      else
        ds.train.push_back(std::move(r));
    }
  }

  for (std::size_t i = 0; i < c.items; ++i) {
    EvalRecord r;
    r.user = c.users + i;
    r.task = Task::src;
    r.query = cat.codes[i];
    r.query->push_back(static_cast<int>(cat.cluster_of[i]));
    r.target = cat.codes[i];
    r.negatives = detail::sample_negatives(i, cat, c.negatives, rng);
    ds.probe.push_back(std::move(r));
  }
  return ds;
}

/// [task] [history] [query] [SEP]. History items are [HS]/[HR] followed by the
/// code tokens, oldest first; histories longer than `history_max` keep the
/// newest items behind a [TRUNC] marker.
inline std::vector<int> format_prompt(const EvalRecord& r, const Vocabulary& v, std::size_t history_max) {
  std::vector<int> out;
  out.push_back(r.task == Task::src ? Vocabulary::src_tag : Vocabulary::rec_tag);
  if (r.history.empty()) {
    out.push_back(Vocabulary::empty_hist);
  } else {
    std::size_t first = 0;
    if (r.history.size() > history_max) {
      first = r.history.size() - history_max;
      out.push_back(Vocabulary::trunc);
    }
    for (std::size_t k = first; k < r.history.size(); ++k) {
      const auto& h = r.history[k];
      out.push_back(h.behavior == Task::src ? Vocabulary::hist_src : Vocabulary::hist_rec);
      for (int t : v.item_tokens(h.item)) out.push_back(t);
    }
  }
  if (r.query) {
    out.push_back(Vocabulary::qry);
    for (std::size_t p = 0; p + 1 < r.query->size(); ++p) out.push_back(v.code_token(p, (*r.query)[p]));
    out.push_back(v.cluster_token(static_cast<std::size_t>(r.query->back())));
  } else {
    out.push_back(Vocabulary::no_query);
  }
  out.push_back(Vocabulary::sep);
  return out;
}

/// Target plus negatives ordered by identifier, so a candidate's index carries
/// no information about which one is the target.
inline std::vector<ItemId> candidate_list(const EvalRecord& r, std::size_t* target_index = nullptr) {
  std::vector<ItemId> cands = r.negatives;
  cands.push_back(r.target);
  std::sort(cands.begin(), cands.end());
  if (target_index)
    *target_index = static_cast<std::size_t>(std::lower_bound(cands.begin(), cands.end(), r.target) - cands.begin());
  return cands;
}

// ---------------------------------------------------------------------------
// NDJSON files: a header line, then one record per line.

inline constexpr int dataset_schema_version = 1;

inline nlohmann::ordered_json to_json(const DataConfig& c) {
  nlohmann::ordered_json j;
  j["users"] = c.users;
  j["items"] = c.items;
  j["history_len"] = c.history_len;
  j["min_interactions"] = c.min_interactions;
  j["id_len"] = c.id_len;
  j["alphabet"] = c.alphabet;
  j["clusters"] = c.clusters;
  j["negatives"] = c.negatives;
  j["query_noise"] = c.query_noise;
  j["transition_prob"] = c.transition_prob;
  j["src_fraction"] = c.src_fraction;
  return j;
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig c;
  c.users = j.at("users").get<std::size_t>();
  c.items = j.at("items").get<std::size_t>();
  c.history_len = j.at("history_len").get<std::size_t>();
  c.min_interactions = j.at("min_interactions").get<std::size_t>();
  c.id_len = j.at("id_len").get<std::size_t>();
  c.alphabet = j.at("alphabet").get<std::size_t>();
  c.clusters = j.at("clusters").get<std::size_t>();
  c.negatives = j.at("negatives").get<std::size_t>();
  c.query_noise = j.at("query_noise").get<double>();
  c.transition_prob = j.at("transition_prob").get<double>();
  c.src_fraction = j.at("src_fraction").get<double>();
  return c;
}

inline nlohmann::ordered_json to_json(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["user"] = r.user;
  j["task"] = to_string(r.task);
  auto hist = nlohmann::ordered_json::array();
  for (const auto& h : r.history) {
    nlohmann::ordered_json e;
    e["item"] = h.item;
    e["behavior"] = to_string(h.behavior);
    if (h.query) e["query"] = *h.query;
    hist.push_back(std::move(e));
  }
  j["history"] = std::move(hist);
  j["query"] = r.query ? nlohmann::ordered_json(*r.query) : nlohmann::ordered_json(nullptr);
  j["target"] = r.target;
  j["negatives"] = r.negatives;
  return j;
}

inline EvalRecord record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.user = j.at("user").get<std::size_t>();
  r.task = task_from_string(j.at("task").get<std::string>());
  for (const auto& e : j.at("history")) {
    Interaction h;
    h.item = e.at("item").get<ItemId>();
    h.behavior = task_from_string(e.at("behavior").get<std::string>());
    if (e.contains("query")) h.query = e.at("query").get<std::vector<int>>();
    r.history.push_back(std::move(h));
  }
  if (!j.at("query").is_null()) r.query = j.at("query").get<std::vector<int>>();
  r.target = j.at("target").get<ItemId>();
  r.negatives = j.at("negatives").get<std::vector<ItemId>>();
  return r;
}

inline void write_records(std::ostream& os, const std::string& split, const DataConfig& c,
                          const std::vector<EvalRecord>& records) {
  nlohmann::ordered_json header;
  header["schema_version"] = dataset_schema_version;
  header["kind"] = "gems-dataset";
  header["split"] = split;
  header["count"] = records.size();
  header["config"] = to_json(c);
  os << header.dump() << '\n';
  for (const auto& r : records) os << to_json(r).dump() << '\n';
  if (!os) fail(ErrorKind::io, "failed writing " + split + " records");
}

struct RecordFile {
  std::string split;
  DataConfig config;
  std::vector<EvalRecord> records;
};

inline RecordFile read_records(std::istream& is) {
  RecordFile out;
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::io, "dataset file is empty");
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("schema_version").get<int>() != dataset_schema_version)
      fail(ErrorKind::io, "unsupported dataset schema_version");
    out.split = header.at("split").get<std::string>();
    out.config = data_config_from_json(header.at("config"));
    const auto count = header.at("count").get<std::size_t>();
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      out.records.push_back(record_from_json(nlohmann::json::parse(line)));
      validate(out.records.back(), out.config);
    }
    if (out.records.size() != count)
      fail(ErrorKind::io, "dataset header promises " + std::to_string(count) + " records, found " +
                              std::to_string(out.records.size()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed dataset file: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::io) throw;
    fail(ErrorKind::io, std::string("invalid dataset record: ") + e.what());
  }
  return out;
}

/// Ranks candidates by how often they occur in the user's history, ties by
/// candidate index.
inline std::vector<std::size_t> memorization_ranking(const EvalRecord& r, const std::vector<ItemId>& candidates) {
  std::vector<std::size_t> counts(candidates.size(), 0);
  for (std::size_t k = 0; k < candidates.size(); ++k)
    for (const auto& h : r.history)
      if (h.item == candidates[k]) ++counts[k];
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return order;
}

}  // namespace gems
