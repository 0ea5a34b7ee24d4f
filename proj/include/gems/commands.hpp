#pragma once

// The operator commands behind the `gems` tool. Each command takes a
// validated RunConfig and paths, writes its outputs into a staging directory
// and renames it into place only when everything succeeded.
//
// Layout under the output root (GEMS_OUT, else output_dir):
//   data/       train, valid, test, probe .jsonl
//   nullspace/  <layer>.bin basis + <layer>.json sidecar per projected layer
//   train/      checkpoint.bin, base.bin, metrics.csv, timing.csv,
//               conflict.csv, conflict_component.csv, eval.json, intent.json
//   eval/       <split>.json
//   audit/      audit.json
//   ablate/     report.json, table.csv
// Every directory carries manifest.json with the config hash.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/checkpoint.hpp"
#include "gems/config.hpp"
#include "gems/diagnostics.hpp"
#include "gems/experiment.hpp"

namespace gems {

namespace fs = std::filesystem;

inline fs::path output_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("GEMS_OUT"); env && *env) return env;
  return cfg.output_dir;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_config_file(const fs::path& p) { return parse_config(read_file(p)); }

/// A directory that appears at `target` only on commit(). Files land in
/// `<target>.partial` first; an abandoned stage is cleared on the next run.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)), stage_(target_.string() + ".partial") {
    std::error_code ec;
    fs::remove_all(stage_, ec);
    fs::create_directories(stage_, ec);
    if (ec) fail(ErrorKind::io, "cannot create " + stage_.string() + ": " + ec.message());
  }

  fs::path path(const std::string& name) const { return stage_ / name; }

  void write(const std::string& name, const std::string& bytes) {
    std::ofstream out(path(name), std::ios::binary);
    out << bytes;
    out.close();
    if (!out) fail(ErrorKind::io, "failed writing " + path(name).string());
    files_.push_back(name);
  }

  void commit(const RunConfig& cfg, nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
    nlohmann::ordered_json m;
    m["config_hash"] = config_hash(cfg);
    m["files"] = files_;
    for (auto& [k, v] : extra.items()) m[k] = v;
    write("manifest.json", m.dump(2) + "\n");
    std::error_code ec;
    fs::remove_all(target_, ec);
    fs::rename(stage_, target_, ec);
    if (ec) fail(ErrorKind::io, "cannot move " + stage_.string() + " to " + target_.string() + ": " + ec.message());
  }

 private:
  fs::path target_, stage_;
  std::vector<std::string> files_;
};

inline std::string checkpoint_bytes(const CheckpointData& cp) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, cp);
  return os.str();
}

inline CheckpointData load_checkpoint(const fs::path& p) {
  std::istringstream is(read_file(p), std::ios::binary);
  return read_checkpoint(is);
}

/// The config stored in a checkpoint header, checked against its hash.
inline RunConfig checkpoint_config(const CheckpointData& cp) {
  if (!cp.header.contains("config")) fail(ErrorKind::io, "checkpoint does not embed its config");
  const RunConfig cfg = config_from_json(cp.header.at("config"));
  if (config_hash(cfg) != cp.header.at("config_hash").get<std::string>())
    fail(ErrorKind::io, "checkpoint config does not match its config_hash");
  return cfg;
}

inline TinyTransformer model_from_checkpoint(const CheckpointData& cp, const RunConfig& cfg) {
  Rng init(cfg.seed, "init");
  TinyTransformer model(model_config(cfg), init);
  GemsOptimizer<TinyTransformer> opt(model, gems_config(cfg), Rng(cfg.seed, "gate"));
  restore_checkpoint(cp, model, opt);
  return model;
}

// ---- gen-data ---------------------------------------------------------------

inline std::string records_text(const std::string& split, const DataConfig& c, const std::vector<EvalRecord>& rs) {
  std::ostringstream os;
  write_records(os, split, c, rs);
  return os.str();
}

inline fs::path cmd_gen_data(const RunConfig& cfg) {
  const fs::path dir = output_root(cfg) / "data";
  const Dataset d = generate_dataset(cfg.seed, data_config(cfg));
  StagedDir out(dir);
  out.write("train.jsonl", records_text("train", d.config, d.train));
  out.write("valid.jsonl", records_text("valid", d.config, d.valid));
  out.write("test.jsonl", records_text("test", d.config, d.test));
  out.write("probe.jsonl", records_text("probe", d.config, d.probe));
  out.commit(cfg);
  return dir;
}

inline RecordFile load_records(const fs::path& p) {
  std::istringstream is(read_file(p));
  return read_records(is);
}

// ---- nullspace-build --------------------------------------------------------

/// Builds the base model from `base_checkpoint` when given, else by
/// pretraining from the config, and writes one projector per matrix layer.
inline fs::path cmd_nullspace_build(const RunConfig& cfg, const std::optional<fs::path>& base_checkpoint) {
  if (cfg.nullspace == "off") fail(ErrorKind::config, "nullspace-build: nullspace is 'off' in the config");
  const PreparedData data = prepare_data(cfg);
  const TinyTransformer base = base_checkpoint ? model_from_checkpoint(load_checkpoint(*base_checkpoint), cfg)
                                               : pretrain_base(cfg, data);
  const auto projectors = build_projectors(cfg, base, data);
  const fs::path dir = output_root(cfg) / "nullspace";
  StagedDir out(dir);
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& p : projectors) {
    if (!p) continue;
    std::ostringstream basis(std::ios::binary);
    write_projector_basis(basis, *p);
    out.write(p->layer() + ".bin", basis.str());
    auto side = sidecar_json(*p);
    side["config_hash"] = config_hash(cfg);
    out.write(p->layer() + ".json", side.dump(2) + "\n");
    layers.push_back({{"layer", p->layer()}, {"k", p->k()}});
  }
  out.commit(cfg, {{"layers", layers}});
  return dir;
}

inline std::vector<std::optional<KnowledgeProjector>> load_projectors(const fs::path& dir, const TinyTransformer& model) {
  std::vector<std::optional<KnowledgeProjector>> out(model.parameters().size());
  for (std::size_t l = 0; l < out.size(); ++l) {
    const auto& param = model.parameters()[l];
    if (!param.matrix_layer) continue;
    const fs::path side = dir / (param.name + ".json"), basis = dir / (param.name + ".bin");
    if (!fs::exists(side)) fail(ErrorKind::io, "projector sidecar missing for " + param.name + " in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(side));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::io, side.string() + ": " + e.what());
    }
    std::istringstream is(read_file(basis), std::ios::binary);
    out[l] = read_projector(is, j);
    if (out[l]->dim() != param.value.cols())
      fail(ErrorKind::io, "projector for " + param.name + " has dimension " + std::to_string(out[l]->dim()));
  }
  return out;
}

// ---- train ------------------------------------------------------------------

struct TrainOptions {
  std::optional<fs::path> data_dir;        // else the dataset is regenerated from the config
  std::optional<fs::path> projector_dir;   // else projectors are built in memory
};

inline PreparedData prepared_from_dir(const RunConfig& cfg, const fs::path& dir) {
  PreparedData p;
  const DataConfig want = data_config(cfg);
  auto load = [&](const char* name) {
    RecordFile f = load_records(dir / name);
    if (to_json(f.config).dump() != to_json(want).dump())
      fail(ErrorKind::config, std::string(name) + " was generated with a different data config");
    return std::move(f.records);
  };
  p.dataset.config = want;
  p.dataset.train = load("train.jsonl");
  p.dataset.valid = load("valid.jsonl");
  p.dataset.test = load("test.jsonl");
  p.dataset.probe = load("probe.jsonl");
  p.vocab = Vocabulary::from(want);
  for (const auto& r : p.dataset.train)
    (r.task == Task::src ? p.train_src : p.train_rec).push_back(to_sample(r, p.vocab, cfg.history_len));
  if (p.train_src.empty() || p.train_rec.empty()) fail(ErrorKind::config, "training split lacks one of the two tasks");
  for (const auto& r : p.dataset.probe) {
    p.probe.push_back(to_sample(r, p.vocab, cfg.history_len));
    p.probe_prompts.push_back(p.probe.back().prompt);
  }
  return p;
}

inline nlohmann::ordered_json intent_json(double flip, double drift, const EvalTable& base_probe) {
  nlohmann::ordered_json j;
  std::size_t correct = 0;
  for (bool b : base_probe.top1_correct) correct += b;
  j["probe_records"] = base_probe.top1_correct.size();
  j["base_top1_correct"] = correct;
  j["flip_fraction"] = flip;
  j["drift_probe"] = drift;
  return j;
}

/// Trains one variant. Reported metrics come from the model as stored in the
/// checkpoint (f32), so `eval` on the checkpoint reproduces them exactly.
inline fs::path cmd_train(const RunConfig& cfg, const TrainOptions& opt = {}) {
  const PreparedData data = opt.data_dir ? prepared_from_dir(cfg, *opt.data_dir) : prepare_data(cfg);
  const TinyTransformer base = pretrain_base(cfg, data);
  std::vector<std::optional<KnowledgeProjector>> projectors;
  if (projection_enabled(cfg))
    projectors = opt.projector_dir ? load_projectors(*opt.projector_dir, base) : build_projectors(cfg, base, data);
  const FineTuneResult run = fine_tune(cfg, base, projectors, data);

  const std::string hash = config_hash(cfg);
  const auto cfg_json = to_json(cfg);
  const std::string ckpt = checkpoint_bytes(capture_checkpoint(run.model, run.optimizer, hash, cfg_json));
  TinyTransformer base_copy = base;
  const GemsOptimizer<TinyTransformer> base_opt(base_copy, gems_config(cfg), Rng(cfg.seed, "gate"));
  const std::string base_ckpt = checkpoint_bytes(capture_checkpoint(base_copy, base_opt, hash, cfg_json));

  std::istringstream reread(ckpt, std::ios::binary);
  const TinyTransformer stored = model_from_checkpoint(read_checkpoint(reread), cfg);
  const EvalOptions eo = eval_options(cfg);
  nlohmann::ordered_json eval;
  eval["config_hash"] = hash;
  eval["split"] = "test";
  eval["metrics"] = to_json(evaluate(stored, data.dataset.test, data.vocab, eo));
  const EvalTable base_probe = evaluate(base, data.dataset.probe, data.vocab, eo);
  const EvalTable tuned_probe = evaluate(stored, data.dataset.probe, data.vocab, eo);
  auto intent = intent_json(intent_flip_fraction(base_probe.top1_correct, tuned_probe.top1_correct),
                            drift_probe(base, stored, data.probe_prompts), base_probe);
  intent["config_hash"] = hash;

  const auto names = parameter_names(base);
  const fs::path dir = output_root(cfg) / "train";
  StagedDir out(dir);
  out.write("checkpoint.bin", ckpt);
  out.write("base.bin", base_ckpt);
  out.write("metrics.csv", metrics_csv(run.reports));
  out.write("timing.csv", timing_csv(run.reports));
  out.write("conflict.csv", conflict_csv(conflict_records(run.reports, names, Pairing::raw)));
  out.write("conflict_component.csv", conflict_csv(conflict_records(run.reports, names, Pairing::component)));
  if (!run.eval_log.empty()) out.write("eval_log.csv", eval_log_csv(run.eval_log));
  out.write("eval.json", eval.dump(2) + "\n");
  out.write("intent.json", intent.dump(2) + "\n");
  out.commit(cfg, {{"steps", cfg.steps}, {"variant", cfg.variant}});
  return dir;
}

// ---- eval -------------------------------------------------------------------

inline nlohmann::ordered_json cmd_eval(const fs::path& checkpoint, const std::optional<fs::path>& data_file,
                                       const std::string& split, const std::optional<fs::path>& out_root) {
  const CheckpointData cp = load_checkpoint(checkpoint);
  RunConfig cfg = checkpoint_config(cp);
  const TinyTransformer model = model_from_checkpoint(cp, cfg);
  std::vector<EvalRecord> records;
  std::string split_name = split;
  if (data_file) {
    RecordFile f = load_records(*data_file);
    if (to_json(f.config).dump() != to_json(data_config(cfg)).dump())
      fail(ErrorKind::config, "dataset was generated with a different data config than the checkpoint");
    records = std::move(f.records);
    split_name = f.split;
  } else {
    const Dataset d = generate_dataset(cfg.seed, data_config(cfg));
    if (split == "test") records = d.test;
    else if (split == "valid") records = d.valid;
    else if (split == "probe") records = d.probe;
    else if (split == "train") records = d.train;
    else fail(ErrorKind::config, "unknown split '" + split + "'");
  }
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["split"] = split_name;
  j["metrics"] = to_json(evaluate(model, records, Vocabulary::from(data_config(cfg)), eval_options(cfg)));
  if (out_root) {
    StagedDir out(*out_root / "eval");
    out.write(split_name + ".json", j.dump(2) + "\n");
    out.commit(cfg);
  }
  return j;
}

// ---- conflict ---------------------------------------------------------------

inline std::vector<ConflictRecord> read_conflict_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::string line;
  if (!std::getline(in, line) || line != "step,layer,kind,rho") fail(ErrorKind::io, p.string() + ": unexpected header");
  std::vector<ConflictRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string step, layer, kind, rho;
    if (!std::getline(row, step, ',') || !std::getline(row, layer, ',') || !std::getline(row, kind, ',') ||
        !std::getline(row, rho))
      fail(ErrorKind::io, p.string() + ": malformed row '" + line + "'");
    try {
      ConflictRecord r;
      r.step = std::stoull(step);
      r.layer_name = layer;
      r.layer_kind = classify_layer(layer);
      r.rho = std::stod(rho);
      out.push_back(std::move(r));
    } catch (const std::exception&) {
      fail(ErrorKind::io, p.string() + ": malformed row '" + line + "'");
    }
  }
  return out;
}

/// Aggregates a train run's conflict logs into heatmaps, written next to them.
inline fs::path cmd_conflict(const fs::path& run_dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(run_dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, "run manifest: " + std::string(e.what()));
  }
  const auto steps = manifest.at("steps").get<std::uint64_t>();
  if (steps == 0) fail(ErrorKind::config, "conflict: the run has no training steps");
  for (const auto& [src, dst] : {std::pair{"conflict.csv", "heatmap.csv"},
                                 std::pair{"conflict_component.csv", "heatmap_component.csv"}}) {
    const auto records = read_conflict_csv(run_dir / src);
    if (records.empty()) continue;
    const fs::path target = run_dir / dst, tmp = run_dir / (std::string(dst) + ".partial");
    {
      std::ofstream out(tmp, std::ios::binary);
      out << heatmap_csv(conflict_heatmap(records, steps));
      if (!out) fail(ErrorKind::io, "failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) fail(ErrorKind::io, "cannot rename " + tmp.string() + ": " + ec.message());
  }
  return run_dir / "heatmap.csv";
}

// ---- audit ------------------------------------------------------------------

/// Closed-form memory counts per matrix layer, checked against the element
/// counts actually allocated by a freshly built optimizer.
inline nlohmann::ordered_json memory_audit_json(const RunConfig& cfg) {
  Rng init(cfg.seed, "init");
  TinyTransformer model(model_config(cfg), init);
  RunConfig full = cfg;
  full.variant = "full";
  GemsOptimizer<TinyTransformer> opt(model, gems_config(full), Rng(cfg.seed, "gate"));
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  std::uint64_t gems_total = 0, lora_total = 0;
  bool all_match = true;
  for (std::size_t l = 0; l < model.parameters().size(); ++l) {
    const auto& p = model.parameters()[l];
    if (!p.matrix_layer) continue;
    const MemoryAudit a = memory_audit(p.value.rows(), p.value.cols(), cfg.rank);
    const std::uint64_t live = opt.tuners()[l] ? live_state_elements(*opt.tuners()[l]) : 0;
    nlohmann::ordered_json e;
    e["layer"] = p.name;
    e["m"] = a.m;
    e["n"] = a.n;
    e["r"] = a.r;
    e["gems_weights"] = a.gems_weights;
    e["gems_states"] = a.gems_states;
    e["lora_weights"] = a.lora_weights;
    e["lora_states"] = a.lora_states;
    e["live_states"] = live;
    e["match"] = live == a.gems_states;
    all_match = all_match && live == a.gems_states;
    gems_total += a.gems_states;
    lora_total += a.lora_states;
    layers.push_back(std::move(e));
  }
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["rank"] = cfg.rank;
  j["task_rank"] = (cfg.task_rank ? cfg.task_rank : (cfg.rank + 1) / 2);
  j["layers"] = std::move(layers);
  j["total_gems_states"] = gems_total;
  j["total_lora_states"] = lora_total;
  j["all_match"] = all_match;
  return j;
}

inline fs::path cmd_audit(const RunConfig& cfg) {
  const fs::path dir = output_root(cfg) / "audit";
  StagedDir out(dir);
  out.write("audit.json", memory_audit_json(cfg).dump(2) + "\n");
  out.commit(cfg);
  return dir;
}

// ---- ablate -----------------------------------------------------------------

inline AblationReport cmd_ablate(const RunConfig& cfg, fs::path* written = nullptr) {
  const AblationReport rep = run_ablation(cfg);
  auto j = to_json(rep);
  j["config_hash"] = config_hash(cfg);
  j["config"] = to_json(cfg);
  const fs::path dir = output_root(cfg) / "ablate";
  StagedDir out(dir);
  out.write("report.json", j.dump(2) + "\n");
  out.write("table.csv", ablation_table(rep));
  out.commit(cfg);
  if (written) *written = dir;
  return rep;
}

}  // namespace gems
