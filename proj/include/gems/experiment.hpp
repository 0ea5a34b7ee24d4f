#pragma once

// End-to-end runs on the synthetic benchmark:
//
//   data -> base model (dense Adam on the probe corpus) -> projectors from
//   the base model's probe activations -> fine-tuning with one optimizer
//   variant on mixed src/rec batches -> evaluation, intent flips, drift.
//
// Every random draw comes from a named stream of the root seed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/config.hpp"
#include "gems/data.hpp"
#include "gems/decode.hpp"
#include "gems/diagnostics.hpp"
#include "gems/gems.hpp"
#include "gems/model.hpp"
#include "gems/nullspace.hpp"

namespace gems {

using Sample = TinyTransformer::Sample;

struct PreparedData {
  Dataset dataset;
  Vocabulary vocab;
  std::vector<Sample> train_src, train_rec, probe;
  std::vector<std::vector<int>> probe_prompts;
};

inline Sample to_sample(const EvalRecord& r, const Vocabulary& v, std::size_t history_max) {
  return {format_prompt(r, v, history_max), v.item_tokens(r.target), r.task};
}

inline PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData p;
  p.dataset = generate_dataset(cfg.seed, data_config(cfg));
  p.vocab = Vocabulary::from(p.dataset.config);
  for (const auto& r : p.dataset.train)
    (r.task == Task::src ? p.train_src : p.train_rec).push_back(to_sample(r, p.vocab, cfg.history_len));
  if (p.train_src.empty() || p.train_rec.empty())
    fail(ErrorKind::config, "training split lacks one of the two tasks; adjust src_fraction or users");
  for (const auto& r : p.dataset.probe) {
    p.probe.push_back(to_sample(r, p.vocab, cfg.history_len));
    p.probe_prompts.push_back(p.probe.back().prompt);
  }
  return p;
}

inline EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.beam_width = cfg.beam_width;
  o.history_max = cfg.history_len;
  return o;
}

/// Deterministic mixed batches: round(batch_size * src_ratio) src samples,
/// the rest rec, drawn with replacement.
class BatchSampler {
 public:
  BatchSampler(const std::vector<Sample>& src, const std::vector<Sample>& rec, std::size_t batch_size, double src_ratio,
               Rng rng)
      : src_(&src), rec_(&rec), rng_(std::move(rng)) {
    n_src_ = static_cast<std::size_t>(std::lround(static_cast<double>(batch_size) * src_ratio));
    n_src_ = std::clamp<std::size_t>(n_src_, src.empty() ? 0 : 1, rec.empty() ? batch_size : batch_size - 1);
    n_rec_ = batch_size - n_src_;
  }

  std::vector<Sample> next() {
    std::vector<Sample> b;
    b.reserve(n_src_ + n_rec_);
    for (std::size_t k = 0; k < n_src_; ++k) b.push_back((*src_)[rng_.below(src_->size())]);
    for (std::size_t k = 0; k < n_rec_; ++k) b.push_back((*rec_)[rng_.below(rec_->size())]);
    return b;
  }

 private:
  const std::vector<Sample>* src_;
  const std::vector<Sample>* rec_;
  Rng rng_;
  std::size_t n_src_ = 0, n_rec_ = 0;
};

/// The base model: initialized from the "init" stream and trained with dense
/// Adam on the probe corpus.
inline TinyTransformer pretrain_base(const RunConfig& cfg, const PreparedData& data) {
  Rng init(cfg.seed, "init");
  TinyTransformer model(model_config(cfg), init);
  if (cfg.pretrain_steps == 0) return model;
  GemsConfig g = gems_config(cfg);
  g.variant = Variant::dense_joint;
  g.dense_adam.lr = cfg.pretrain_lr;
  GemsOptimizer<TinyTransformer> opt(model, g, Rng(cfg.seed, "pretrain-gate"));
  static const std::vector<Sample> none;
  BatchSampler sampler(data.probe, none, cfg.batch_size, 1.0, Rng(cfg.seed, "pretrain"));
  for (std::size_t s = 0; s < cfg.pretrain_steps; ++s) {
    const auto batch = sampler.next();
    opt.train_step(model, std::span<const Sample>(batch));
  }
  return model;
}

inline std::vector<std::optional<KnowledgeProjector>> build_projectors(const RunConfig& cfg, const TinyTransformer& base,
                                                                       const PreparedData& data) {
  std::vector<std::optional<KnowledgeProjector>> out(base.parameters().size());
  if (cfg.nullspace == "off") return out;
  const auto mode = projection_mode_from_string(cfg.nullspace);
  const auto features = collect_all_features(base, data.probe_prompts);
  for (std::size_t l = 0; l < out.size(); ++l)
    if (features[l]) out[l] = build_projector(*features[l], rank_selection(cfg), mode, base.parameters()[l].name);
  return out;
}

struct EvalLogRow {
  std::uint64_t step = 0;
  EvalTable table;
};

struct FineTuneResult {
  TinyTransformer model;
  GemsOptimizer<TinyTransformer> optimizer;
  std::vector<StepReport> reports;
  std::vector<EvalLogRow> eval_log;
};

inline FineTuneResult fine_tune(const RunConfig& cfg, const TinyTransformer& base,
                                const std::vector<std::optional<KnowledgeProjector>>& projectors,
                                const PreparedData& data) {
  TinyTransformer model = base;
  std::vector<std::optional<KnowledgeProjector>> active = projectors;
  if (!projection_enabled(cfg)) active.clear();
  GemsOptimizer<TinyTransformer> opt(model, gems_config(cfg), Rng(cfg.seed, "gate"), active);
  BatchSampler sampler(data.train_src, data.train_rec, cfg.batch_size, cfg.src_ratio, Rng(cfg.seed, "batching"));
  std::vector<StepReport> reports;
  std::vector<EvalLogRow> eval_log;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto batch = sampler.next();
    reports.push_back(opt.train_step(model, std::span<const Sample>(batch)));
    if (cfg.eval_every && (s + 1) % cfg.eval_every == 0)
      eval_log.push_back({s + 1, evaluate(model, data.dataset.valid, data.vocab, eval_options(cfg))});
  }
  return {std::move(model), std::move(opt), std::move(reports), std::move(eval_log)};
}

inline double mean_of(const std::vector<StepReport>& reports, double StepReport::*field) {
  if (reports.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : reports) s += r.*field;
  return s / static_cast<double>(reports.size());
}

inline std::vector<std::string> parameter_names(const TinyTransformer& m) {
  std::vector<std::string> names;
  for (const auto& p : m.parameters()) names.push_back(p.name);
  return names;
}

// ---- text artifacts -------------------------------------------------------

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// The wall_ms column is left empty so the file depends on (config, seed)
// alone; timings go to timing_csv.
inline std::string metrics_csv(const std::vector<StepReport>& reports) {
  std::ostringstream os;
  os << "step,loss_src,loss_rec,alpha_src,alpha_rec,mean_rho,max_rho,wall_ms\n";
  for (const auto& r : reports)
    os << r.step << ',' << format_double(r.loss_src) << ',' << format_double(r.loss_rec) << ','
       << format_double(r.alpha.src) << ',' << format_double(r.alpha.rec) << ',' << format_double(r.mean_rho) << ','
       << format_double(r.max_rho) << ",\n";
  return os.str();
}

inline std::string timing_csv(const std::vector<StepReport>& reports) {
  std::ostringstream os;
  os << "step,wall_ms\n";
  for (const auto& r : reports) os << r.step << ',' << format_double(r.wall_ms) << '\n';
  return os.str();
}

inline std::string eval_log_csv(const std::vector<EvalLogRow>& rows) {
  std::ostringstream os;
  os << "step,task,count,hit@5,ndcg@5,hit@10,ndcg@10\n";
  for (const auto& row : rows)
    for (const auto& [name, m] : {std::pair{"src", &row.table.src}, std::pair{"rec", &row.table.rec}, std::pair{"all", &row.table.all}})
      os << row.step << ',' << name << ',' << m->count << ',' << format_double(m->hit.at(5)) << ','
         << format_double(m->ndcg.at(5)) << ',' << format_double(m->hit.at(10)) << ',' << format_double(m->ndcg.at(10))
         << '\n';
  return os.str();
}

// ---- paired runs ----------------------------------------------------------

/// Everything shared by the variants of one seed.
struct SeedContext {
  RunConfig cfg;
  PreparedData data;
  TinyTransformer base;
  std::vector<std::optional<KnowledgeProjector>> projectors;
  EvalTable base_probe;
};

inline SeedContext prepare_seed(const RunConfig& cfg) {
  PreparedData data = prepare_data(cfg);
  TinyTransformer base = pretrain_base(cfg, data);
  auto projectors = build_projectors(cfg, base, data);
  EvalTable base_probe = evaluate(base, data.dataset.probe, data.vocab, eval_options(cfg));
  return {cfg, std::move(data), std::move(base), std::move(projectors), std::move(base_probe)};
}

struct VariantOutcome {
  std::string variant;
  std::uint64_t seed = 0;
  EvalTable test;
  double mean_rho_raw = 0.0;
  double mean_rho_component = 0.0;
  double mean_rho_routed = 0.0;
  double flip_fraction = 0.0;
  double drift = 0.0;
  double max_null_residual_ratio = 0.0;  // max ‖Δ·U_k‖ / max(1, ‖Δ‖)
};

inline VariantOutcome summarize_variant(const SeedContext& ctx, const std::string& variant, const FineTuneResult& run) {
  VariantOutcome o;
  o.variant = variant;
  o.seed = ctx.cfg.seed;
  o.test = evaluate(run.model, ctx.data.dataset.test, ctx.data.vocab, eval_options(ctx.cfg));
  o.mean_rho_raw = mean_of(run.reports, &StepReport::mean_rho);
  o.mean_rho_component = mean_of(run.reports, &StepReport::mean_rho_component);
  o.mean_rho_routed = mean_of(run.reports, &StepReport::mean_rho_routed);
  const EvalTable tuned_probe = evaluate(run.model, ctx.data.dataset.probe, ctx.data.vocab, eval_options(ctx.cfg));
  o.flip_fraction = intent_flip_fraction(ctx.base_probe.top1_correct, tuned_probe.top1_correct);
  o.drift = drift_probe(ctx.base, run.model, ctx.data.probe_prompts);
  for (const auto& r : run.reports)
    for (const auto& row : r.layers)
      if (row.null_residual)
        o.max_null_residual_ratio = std::max(o.max_null_residual_ratio, *row.null_residual / std::max(1.0, row.update_norm));
  return o;
}

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "shared-only", "no-nullspace", "subspace-only", "dense-joint"};
  return v;
}

struct AblationCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct AblationReport {
  std::vector<VariantOutcome> rows;  // seed-major, variants in ablation order
  std::vector<AblationCheck> checks;
};

inline double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorKind::invalid_argument, "median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<AblationCheck> directional_checks(const std::vector<VariantOutcome>& rows) {
  auto pick = [&](const std::string& variant) {
    std::vector<const VariantOutcome*> out;
    for (const auto& r : rows)
      if (r.variant == variant) out.push_back(&r);
    return out;
  };
  const auto full = pick("full"), shared = pick("shared-only"), off = pick("no-nullspace"), dense = pick("dense-joint");
  std::vector<AblationCheck> checks;
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
  };

  if (!full.empty() && full.size() == dense.size()) {
    std::vector<double> reduction;
    for (std::size_t s = 0; s < full.size(); ++s)
      reduction.push_back(1.0 - full[s]->mean_rho_component / dense[s]->mean_rho_component);
    const double m = median(reduction);
    checks.push_back({"conflict_reduction", m >= 0.30,
                      "median reduction of component rho vs dense-joint = " + fmt(m) + " (need >= 0.30)"});
  }
  if (!full.empty()) {
    bool minimal = true;
    std::vector<double> fv;
    for (const auto* f : full) fv.push_back(f->mean_rho_component);
    const double full_med = median(fv);
    for (const auto& v : ablation_variants()) {
      if (v == "full") continue;
      std::vector<double> xs;
      for (const auto* r : pick(v)) xs.push_back(r->mean_rho_component);
      if (!xs.empty() && median(xs) < full_med) minimal = false;
    }
    checks.push_back({"full_has_min_component_rho", minimal, "median component rho of full = " + fmt(full_med)});
  }
  if (!full.empty() && full.size() == shared.size()) {
    std::vector<double> hf, hs;
    for (const auto* f : full) hf.push_back(f->test.all.hit.at(5));
    for (const auto* s : shared) hs.push_back(s->test.all.hit.at(5));
    const double n = static_cast<double>(full.front()->test.all.count);
    const double floor = 0.05 + 3.0 * std::sqrt(0.05 * 0.95 / n);
    const double mf = median(hf), ms = median(hs);
    checks.push_back({"ablation_ordering", mf >= ms && ms >= floor && mf >= floor,
                      "median Hit@5 full = " + fmt(mf) + ", shared-only = " + fmt(ms) + ", floor = " + fmt(floor)});
  }
  if (!full.empty() && full.size() == off.size()) {
    bool flips = true, drift = true;
    std::string detail;
    for (std::size_t s = 0; s < full.size(); ++s) {
      flips = flips && full[s]->flip_fraction <= off[s]->flip_fraction;
      drift = drift && full[s]->drift < off[s]->drift;
      detail += "seed " + std::to_string(full[s]->seed) + ": flips " + fmt(full[s]->flip_fraction) + " vs " +
                fmt(off[s]->flip_fraction) + ", drift " + fmt(full[s]->drift) + " vs " + fmt(off[s]->drift) + "; ";
    }
    checks.push_back({"intent_preservation", flips && drift, detail});
  }
  return checks;
}

/// Called once per (seed, variant) run, before the run is discarded.
using RunObserver = std::function<void(const SeedContext&, const std::string& variant, const FineTuneResult&)>;

inline AblationReport run_ablation(const RunConfig& cfg, const RunObserver& observe = {}) {
  AblationReport rep;
  for (std::size_t s = 0; s < cfg.ablation_seeds; ++s) {
    RunConfig seed_cfg = cfg;
    seed_cfg.seed = cfg.seed + s;
    const SeedContext ctx = prepare_seed(seed_cfg);
    for (const auto& v : ablation_variants()) {
      RunConfig vc = seed_cfg;
      vc.variant = v;
      const FineTuneResult run = fine_tune(vc, ctx.base, ctx.projectors, ctx.data);
      rep.rows.push_back(summarize_variant(ctx, v, run));
      if (observe) observe(ctx, v, run);
    }
  }
  rep.checks = directional_checks(rep.rows);
  return rep;
}

inline nlohmann::ordered_json to_json(const VariantOutcome& o) {
  nlohmann::ordered_json j;
  j["variant"] = o.variant;
  j["seed"] = o.seed;
  j["metrics"] = to_json(o.test);
  j["mean_rho_raw"] = o.mean_rho_raw;
  j["mean_rho_component"] = o.mean_rho_component;
  j["mean_rho_routed"] = o.mean_rho_routed;
  j["flip_fraction"] = o.flip_fraction;
  j["drift"] = o.drift;
  j["max_null_residual_ratio"] = o.max_null_residual_ratio;
  return j;
}

inline nlohmann::ordered_json to_json(const AblationReport& r) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& o : r.rows) rows.push_back(to_json(o));
  j["rows"] = std::move(rows);
  auto checks = nlohmann::ordered_json::array();
  for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  j["checks"] = std::move(checks);
  return j;
}

inline std::string ablation_table(const AblationReport& r) {
  std::ostringstream os;
  os << "variant,seed,hit@5,ndcg@5,hit@10,ndcg@10,src_hit@5,rec_hit@5,mean_rho_raw,mean_rho_component,mean_rho_routed,flip_fraction,drift\n";
  for (const auto& o : r.rows)
    os << o.variant << ',' << o.seed << ',' << format_double(o.test.all.hit.at(5)) << ','
       << format_double(o.test.all.ndcg.at(5)) << ',' << format_double(o.test.all.hit.at(10)) << ','
       << format_double(o.test.all.ndcg.at(10)) << ',' << format_double(o.test.src.hit.at(5)) << ','
       << format_double(o.test.rec.hit.at(5)) << ',' << format_double(o.mean_rho_raw) << ','
       << format_double(o.mean_rho_component) << ',' << format_double(o.mean_rho_routed) << ','
       << format_double(o.flip_fraction) << ','
       << format_double(o.drift) << '\n';
  return os.str();
}

}  // namespace gems
