#pragma once

// Run configuration: one flat JSON object. Every key is also a `--key value`
// command-line flag. Unknown keys are rejected.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "gems/data.hpp"
#include "gems/error.hpp"
#include "gems/gems.hpp"
#include "gems/model.hpp"
#include "gems/nullspace.hpp"
#include "gems/rng.hpp"

namespace gems {

inline constexpr int config_schema_version = 1;

struct RunConfig {
  std::uint64_t seed = 1;
  // model
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t ffn = 128;
  std::size_t blocks = 2;
  std::size_t context = 64;
  // data
  std::size_t users = 200;
  std::size_t items = 128;
  std::size_t history_len = 6;
  std::size_t min_interactions = 4;
  std::size_t id_len = 3;
  std::size_t alphabet = 16;
  std::size_t clusters = 8;
  double query_noise = 0.1;
  double transition_prob = 0.8;
  double src_fraction = 0.5;
  // optimizer
  std::string variant = "full";
  std::size_t rank = 8;
  std::size_t task_rank = 0;
  std::size_t refresh_every = 50;
  double scale = 2.0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double temperature = 1.0;
  std::size_t gate_hidden = 8;
  bool gate_training = false;
  double gate_lr = 0.05;
  double gate_perturbation = 0.1;
  // knowledge-preserving projection
  std::string nullspace = "complement";
  std::int64_t null_k = -1;  // -1 selects k by energy_fraction
  double energy_fraction = 0.9;
  // schedule
  std::size_t batch_size = 32;
  double src_ratio = 0.5;
  std::size_t steps = 300;
  std::size_t eval_every = 0;
  std::size_t pretrain_steps = 300;
  double pretrain_lr = 3e-3;
  std::size_t beam_width = 20;
  std::size_t ablation_seeds = 3;
  std::string output_dir = "runs";
};

namespace detail {

struct FieldIo {
  std::function<nlohmann::ordered_json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<void(RunConfig&, const std::string&)> parse;
};

template <class T>
T parse_scalar(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    T v{};
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw std::invalid_argument("bool");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, double>) {
      v = std::stod(text, &used);
    } else if constexpr (std::is_signed_v<T>) {
      v = static_cast<T>(std::stoll(text, &used));
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      v = static_cast<T>(std::stoull(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::config, "config key '" + key + "': cannot parse '" + text + "'");
  }
}

template <class T>
FieldIo field(T RunConfig::*member, const std::string& key) {
  return {[member](const RunConfig& c) { return nlohmann::ordered_json(c.*member); },
          [member, key](RunConfig& c, const nlohmann::json& j) {
            bool ok;
            if constexpr (std::is_same_v<T, bool>) ok = j.is_boolean();
            else if constexpr (std::is_same_v<T, std::string>) ok = j.is_string();
            else if constexpr (std::is_same_v<T, double>) ok = j.is_number();
            else if constexpr (std::is_signed_v<T>) ok = j.is_number_integer();
            else ok = j.is_number_unsigned();
            if (!ok) fail(ErrorKind::config, "config key '" + key + "' has the wrong type");
            c.*member = j.get<T>();
          },
          [member, key](RunConfig& c, const std::string& text) { c.*member = parse_scalar<T>(key, text); }};
}

// Key order here is the canonical serialization order.
inline const std::vector<std::pair<std::string, FieldIo>>& config_fields() {
  static const std::vector<std::pair<std::string, FieldIo>> fields = [] {
    std::vector<std::pair<std::string, FieldIo>> f;
#define GEMS_FIELD(name) f.emplace_back(#name, field(&RunConfig::name, #name))
    GEMS_FIELD(seed);
    GEMS_FIELD(d_model);
    GEMS_FIELD(n_heads);
    GEMS_FIELD(ffn);
    GEMS_FIELD(blocks);
    GEMS_FIELD(context);
    GEMS_FIELD(users);
    GEMS_FIELD(items);
    GEMS_FIELD(history_len);
    GEMS_FIELD(min_interactions);
    GEMS_FIELD(id_len);
    GEMS_FIELD(alphabet);
    GEMS_FIELD(clusters);
    GEMS_FIELD(query_noise);
    GEMS_FIELD(transition_prob);
    GEMS_FIELD(src_fraction);
    GEMS_FIELD(variant);
    GEMS_FIELD(rank);
    GEMS_FIELD(task_rank);
    GEMS_FIELD(refresh_every);
    GEMS_FIELD(scale);
    GEMS_FIELD(lr);
    GEMS_FIELD(beta1);
    GEMS_FIELD(beta2);
    GEMS_FIELD(eps);
    GEMS_FIELD(temperature);
    GEMS_FIELD(gate_hidden);
    GEMS_FIELD(gate_training);
    GEMS_FIELD(gate_lr);
    GEMS_FIELD(gate_perturbation);
    GEMS_FIELD(nullspace);
    GEMS_FIELD(null_k);
    GEMS_FIELD(energy_fraction);
    GEMS_FIELD(batch_size);
    GEMS_FIELD(src_ratio);
    GEMS_FIELD(steps);
    GEMS_FIELD(eval_every);
    GEMS_FIELD(pretrain_steps);
    GEMS_FIELD(pretrain_lr);
    GEMS_FIELD(beam_width);
    GEMS_FIELD(ablation_seeds);
    GEMS_FIELD(output_dir);
#undef GEMS_FIELD
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::config_fields()) keys.push_back(k);
  return keys;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["schema_version"] = config_schema_version;
  for (const auto& [k, io] : detail::config_fields()) j[k] = io.get(c);
  return j;
}

inline DataConfig data_config(const RunConfig& c);

inline void validate(const RunConfig& c) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::config, "config: " + msg); };
  (void)variant_from_string(c.variant);
  if (c.nullspace != "off") (void)projection_mode_from_string(c.nullspace);
  if (c.rank < 2) bad("rank must be >= 2");
  if (c.refresh_every == 0) bad("refresh_every must be positive");
  if (!(c.scale > 0.0)) bad("scale must be positive");
  if (!(c.lr > 0.0) || !(c.pretrain_lr > 0.0)) bad("learning rates must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("betas must lie in [0, 1)");
  if (!(c.eps > 0.0)) bad("eps must be positive");
  if (!(c.temperature > 0.0)) bad("temperature must be positive");
  if (c.gate_hidden == 0) bad("gate_hidden must be positive");
  if (!(c.gate_lr > 0.0) || !(c.gate_perturbation > 0.0)) bad("gate_lr and gate_perturbation must be positive");
  if (c.null_k < -1) bad("null_k must be -1 (energy selection) or a non-negative rank");
  if (!(c.energy_fraction > 0.0 && c.energy_fraction <= 1.0)) bad("energy_fraction must lie in (0, 1]");
  if (c.batch_size < 2) bad("batch_size must be >= 2");
  if (!(c.src_ratio > 0.0 && c.src_ratio < 1.0)) bad("src_ratio must lie in (0, 1)");
  if (c.beam_width < 10) bad("beam_width must be >= 10 (the largest K)");
  if (c.ablation_seeds == 0) bad("ablation_seeds must be positive");
  if (c.rank > std::min(c.d_model, c.ffn)) bad("rank exceeds the smallest layer dimension min(d_model, ffn)");
  if (c.task_rank > c.rank) bad("task_rank exceeds rank");
  if (c.n_heads == 0 || c.d_model % c.n_heads != 0) bad("d_model must be a positive multiple of n_heads");
  if (c.blocks == 0 || c.ffn == 0) bad("blocks and ffn must be positive");
  validate(data_config(c));
  const std::size_t longest_prompt = 1 + 1 + c.history_len * (c.id_len + 1) + 1 + c.id_len + 1 + 1;
  if (longest_prompt + c.id_len - 1 > c.context) bad("context too short for history_len and id_len");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::config, "config must be a JSON object");
  if (!j.contains("schema_version")) fail(ErrorKind::config, "config is missing schema_version");
  if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != config_schema_version)
    fail(ErrorKind::config, "unsupported config schema_version");
  RunConfig c;
  std::map<std::string, const detail::FieldIo*> index;
  for (const auto& [k, io] : detail::config_fields()) index[k] = &io;
  for (const auto& [k, v] : j.items()) {
    if (k == "schema_version") continue;
    const auto it = index.find(k);
    if (it == index.end()) fail(ErrorKind::config, "unknown config key '" + k + "'");
    it->second->set(c, v);
  }
  validate(c);
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
}

/// Applies one `--key value` override.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, io] : detail::config_fields())
    if (k == key) {
      io.parse(c, value);
      return;
    }
  fail(ErrorKind::config, "unknown config key '" + key + "'");
}

/// FNV-1a of the canonical serialization, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
  return buf;
}

inline DataConfig data_config(const RunConfig& c) {
  DataConfig d;
  d.users = c.users;
  d.items = c.items;
  d.history_len = c.history_len;
  d.min_interactions = c.min_interactions;
  d.id_len = c.id_len;
  d.alphabet = c.alphabet;
  d.clusters = c.clusters;
  d.query_noise = c.query_noise;
  d.transition_prob = c.transition_prob;
  d.src_fraction = c.src_fraction;
  return d;
}

inline ModelConfig model_config(const RunConfig& c) {
  ModelConfig m;
  m.vocab = Vocabulary::from(data_config(c)).size();
  m.d_model = c.d_model;
  m.n_heads = c.n_heads;
  m.ffn = c.ffn;
  m.blocks = c.blocks;
  m.context = c.context;
  return m;
}

inline GemsConfig gems_config(const RunConfig& c) {
  GemsConfig g;
  g.variant = variant_from_string(c.variant);
  g.shared.rank = c.rank;
  g.shared.refresh_every = c.refresh_every;
  g.shared.scale = c.scale;
  g.shared.adam = {c.lr, c.beta1, c.beta2, c.eps};
  g.task_rank = c.task_rank;
  g.dense_adam = {c.lr, c.beta1, c.beta2, c.eps};
  g.gate_hidden = c.gate_hidden;
  g.temperature = c.temperature;
  g.gate_training = c.gate_training;
  g.gate_train = {c.gate_lr, c.gate_perturbation};
  return g;
}

/// The projector is active only for variants that use it and when not off.
inline bool projection_enabled(const RunConfig& c) {
  return c.nullspace != "off" && uses_nullspace(variant_from_string(c.variant));
}

inline RankSelection rank_selection(const RunConfig& c) {
  RankSelection s;
  if (c.null_k >= 0) s.k = static_cast<std::size_t>(c.null_k);
  s.energy_fraction = c.energy_fraction;
  return s;
}

}  // namespace gems
