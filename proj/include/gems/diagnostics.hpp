#pragma once

// Conflict records and heatmaps, the intent-preservation flip rate and the
// optimizer-state memory audit.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gems/error.hpp"
#include "gems/gems.hpp"
#include "gems/subspace.hpp"

namespace gems {

enum class LayerKind { query, key, value, output, ffn_up, ffn_down, other };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::query: return "query";
    case LayerKind::key: return "key";
    case LayerKind::value: return "value";
    case LayerKind::output: return "output";
    case LayerKind::ffn_up: return "ffn_up";
    case LayerKind::ffn_down: return "ffn_down";
    case LayerKind::other: return "other";
  }
  return "other";
}

/// Classifies a layer by the last component of its dotted name.
inline LayerKind classify_layer(const std::string& name) {
  static const std::map<std::string, LayerKind> table = {
      {"wq", LayerKind::query},   {"wk", LayerKind::key},        {"wv", LayerKind::value},
      {"wo", LayerKind::output},  {"up", LayerKind::ffn_up},     {"down", LayerKind::ffn_down},
  };
  const auto dot_pos = name.rfind('.');
  const std::string leaf = dot_pos == std::string::npos ? name : name.substr(dot_pos + 1);
  const auto it = table.find(leaf);
  return it == table.end() ? LayerKind::other : it->second;
}

struct ConflictRecord {
  std::uint64_t step = 0;
  std::size_t layer_index = 0;
  std::string layer_name;
  LayerKind layer_kind = LayerKind::other;
  double rho = 0.0;
};

enum class Pairing { raw, component, routed };

inline const char* to_string(Pairing p) {
  switch (p) {
    case Pairing::raw: return "raw";
    case Pairing::component: return "component";
    case Pairing::routed: return "routed";
  }
  return "raw";
}

/// Flattens step reports into conflict records for one pairing. Degenerate
/// (zero-gradient) entries are skipped.
inline std::vector<ConflictRecord> conflict_records(const std::vector<StepReport>& reports,
                                                    const std::vector<std::string>& layer_names,
                                                    Pairing pairing = Pairing::raw) {
  std::vector<ConflictRecord> out;
  for (const auto& r : reports) {
    for (const auto& row : r.layers) {
      const auto& rho = pairing == Pairing::component ? row.rho_component
                        : pairing == Pairing::routed  ? row.rho_routed
                                                      : row.rho_raw;
      if (!rho) continue;
      const std::string& name = layer_names.at(row.layer);
      out.push_back({r.step, row.layer, name, classify_layer(name), *rho});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const ConflictRecord& a, const ConflictRecord& b) {
    return a.step != b.step ? a.step < b.step : a.layer_index < b.layer_index;
  });
  return out;
}

struct HeatmapCell {
  LayerKind kind = LayerKind::other;
  std::size_t phase = 0;  // training-phase decile, 0..9
  double mean_rho = 0.0;
  std::size_t count = 0;
};

/// Mean ρ per (layer kind, training-phase decile). The decile of step s in a
/// run of `total_steps` steps is floor(10 s / total_steps).
inline std::vector<HeatmapCell> conflict_heatmap(const std::vector<ConflictRecord>& records,
                                                 std::uint64_t total_steps) {
  if (records.empty()) fail(ErrorKind::invalid_argument, "conflict_heatmap: no records");
  if (total_steps == 0) fail(ErrorKind::invalid_argument, "conflict_heatmap: total_steps must be positive");
  std::map<std::pair<int, std::size_t>, std::pair<double, std::size_t>> buckets;
  for (const auto& r : records) {
    const std::size_t phase = std::min<std::uint64_t>(9, r.step * 10 / total_steps);
    auto& b = buckets[{static_cast<int>(r.layer_kind), phase}];
    b.first += r.rho;
    b.second += 1;
  }
  std::vector<HeatmapCell> out;
  for (const auto& [key, acc] : buckets)
    out.push_back({static_cast<LayerKind>(key.first), key.second, acc.first / static_cast<double>(acc.second), acc.second});
  return out;
}

inline std::string heatmap_csv(const std::vector<HeatmapCell>& cells) {
  std::ostringstream os;
  os.precision(17);
  os << "kind,phase,mean_rho,count\n";
  for (const auto& c : cells) os << to_string(c.kind) << ',' << c.phase << ',' << c.mean_rho << ',' << c.count << '\n';
  return os.str();
}

inline std::string conflict_csv(const std::vector<ConflictRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "step,layer,kind,rho\n";
  for (const auto& r : records) os << r.step << ',' << r.layer_name << ',' << to_string(r.layer_kind) << ',' << r.rho << '\n';
  return os.str();
}

/// Fraction of records the base model gets right that the tuned model gets
/// wrong. Both spans are per-record top-1 correctness flags.
inline double intent_flip_fraction(const std::vector<bool>& base_correct, const std::vector<bool>& tuned_correct) {
  if (base_correct.size() != tuned_correct.size())
    fail(ErrorKind::invalid_argument, "intent_preservation: record count mismatch");
  std::size_t denom = 0, flipped = 0;
  for (std::size_t i = 0; i < base_correct.size(); ++i) {
    if (!base_correct[i]) continue;
    ++denom;
    if (!tuned_correct[i]) ++flipped;
  }
  if (denom == 0) fail(ErrorKind::invalid_argument, "intent_preservation: base model is correct on no probe record");
  return static_cast<double>(flipped) / static_cast<double>(denom);
}

struct MemoryAudit {
  std::uint64_t m = 0, n = 0, r = 0;
  bool swapped = false;  // input had m > n
  std::uint64_t gems_weights = 0;
  std::uint64_t gems_states = 0;
  std::uint64_t lora_weights = 0;
  std::uint64_t lora_states = 0;
};

/// Closed-form weight and optimizer-state counts for one m x n layer at rank
/// r, with m taken as the smaller dimension.
inline MemoryAudit memory_audit(std::uint64_t m, std::uint64_t n, std::uint64_t r) {
  MemoryAudit a;
  if (m > n) {
    std::swap(m, n);
    a.swapped = true;
  }
  a.m = m;
  a.n = n;
  a.r = r;
  a.gems_weights = m * n;
  a.gems_states = 2 * m * r + 4 * n * r;
  a.lora_weights = m * n + m * r + n * r;
  a.lora_states = 2 * m * r + 2 * n * r;
  return a;
}

/// Elements actually held by a layer's three subspace states.
inline std::uint64_t live_state_elements(const LayerTuner& t) {
  std::uint64_t total = t.shared.state_elements();
  if (t.src) total += t.src->state_elements();
  if (t.rec) total += t.rec->state_elements();
  return total;
}

}  // namespace gems
