// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
// fails. Criteria 8-10 share a single 3-seed ablation on
// configs/benchmark.json; criterion 12 drives the `gems` binary twice.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gems/commands.hpp"
#include "gems/toy_mlp.hpp"
#include "reference_loop.hpp"
#include "test_support.hpp"

using namespace gems;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail << std::endl;
  failures += !pass;
}

// Runs `body`; an exception counts as a failure of that criterion.
void criterion(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [pass, detail] = body();
    verdict(id, name, pass, detail);
  } catch (const std::exception& e) {
    verdict(id, name, false, std::string("exception: ") + e.what());
  }
}

RunConfig benchmark_config() { return load_config_file(fs::path(GEMS_SOURCE_DIR) / "configs" / "benchmark.json"); }

// ---- 1 ----------------------------------------------------------------------

std::vector<ToyMlp::Sample> conflicting_batch(std::size_t n_src, std::size_t n_rec, std::size_t dim, Rng& rng) {
  std::vector<ToyMlp::Sample> batch;
  for (std::size_t i = 0; i < n_src + n_rec; ++i) {
    ToyMlp::Sample s{std::vector<double>(dim), std::vector<double>(dim), i < n_src ? Task::src : Task::rec};
    for (auto& v : s.x) v = rng.normal();
    for (std::size_t k = 0; k < dim; ++k) s.target[k] = (s.task == Task::src ? 1.0 : -0.5) * s.x[(k + 1) % dim];
    batch.push_back(std::move(s));
  }
  return batch;
}

std::pair<bool, std::string> oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng init(7), data(8);
  ToyMlp model(8, 8, 8, init);
  GemsConfig c;
  c.variant = Variant::no_nullspace;
  c.shared.rank = 4;
  c.shared.refresh_every = 3;
  c.shared.scale = 2.0;
  GemsOptimizer<ToyMlp> opt(model, c, Rng(9));

  std::vector<std::vector<ToyMlp::Sample>> batches;
  std::vector<std::vector<testing::RefSample>> ref_batches;
  for (int s = 0; s < 10; ++s) {
    batches.push_back(conflicting_batch(3, 3, 8, data));
    std::vector<testing::RefSample> rb;
    for (const auto& x : batches.back())
      rb.push_back({Eigen::Map<const Eigen::VectorXd>(x.x.data(), 8), Eigen::Map<const Eigen::VectorXd>(x.target.data(), 8),
                    x.task == Task::src});
    ref_batches.push_back(rb);
  }
  const GatingNet& g = opt.gate();
  const testing::RefGate gate{testing::to_eigen(g.w1), Eigen::Map<const Eigen::VectorXd>(g.b1.data(), g.hidden()),
                              testing::to_eigen(g.w2), Eigen::Vector2d(g.b2[0], g.b2[1]), g.temperature};
  const auto ref = testing::reference_training(testing::to_eigen(model.parameters()[0].value),
                                               testing::to_eigen(model.parameters()[1].value), ref_batches, 4,
                                               testing::RefHyper{}, gate, std::nullopt, std::nullopt);
  double worst = 0.0;
  for (int s = 0; s < 10; ++s) {
    opt.train_step(model, std::span<const ToyMlp::Sample>(batches[s]));
    worst = std::max(worst, testing::max_abs_diff(model.parameters()[0].value, testing::from_eigen(ref[s].first)));
    worst = std::max(worst, testing::max_abs_diff(model.parameters()[1].value, testing::from_eigen(ref[s].second)));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-8 && t < 10.0, "max per-weight deviation over 10 steps " + fmt(worst) + " (<= 1e-8), " + fmt(t) + " s"};
}

// ---- 2 ----------------------------------------------------------------------

std::pair<bool, std::string> dense_adam_degeneracy() {
  const std::size_t m = 3, n = 5;
  SubspaceConfig c;
  c.rank = m;
  c.scale = 1.0;
  c.adam = {1e-3, 0.9, 0.999, 1e-8};
  SubspaceState s(m, n, c);
  s.set_basis(Matrix::identity(m), true);
  // textbook Adam, one scalar per weight
  std::vector<double> mom(m * n, 0.0), vel(m * n, 0.0);
  double worst = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const Matrix g = testing::random_matrix(m, n, 900 + t);
    const Matrix d = s.step(g).delta;
    for (std::size_t k = 0; k < m * n; ++k) {
      mom[k] = 0.9 * mom[k] + 0.1 * g.data()[k];
      vel[k] = 0.999 * vel[k] + 0.001 * g.data()[k] * g.data()[k];
      const double mh = mom[k] / (1 - std::pow(0.9, t)), vh = vel[k] / (1 - std::pow(0.999, t));
      worst = std::max(worst, std::abs(d.data()[k] - (-1e-3 * mh / (std::sqrt(vh) + 1e-8))));
    }
  }
  return {worst <= 1e-12, "max deviation from scalar Adam over 100 steps " + fmt(worst) + " (<= 1e-12)"};
}

// ---- 3 ----------------------------------------------------------------------

double orthonormality_error(const Matrix& q) {
  const Matrix g = matmul_tn(q, q);
  double worst = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

std::pair<bool, std::string> svd_suite() {
  const auto t0 = Clock::now();
  Rng shapes(31);
  double recon = 0.0, ortho = 0.0, idem = 0.0, capture = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t m = 1 + shapes.below(64), n = 1 + shapes.below(64);
    const Matrix a = testing::random_matrix(m, n, 4000 + i);
    const SvdResult r = svd(a);
    Matrix us = r.u;
    for (std::size_t k = 0; k < r.sigma.size(); ++k)
      for (std::size_t row = 0; row < m; ++row) us(row, k) *= r.sigma[k];
    recon = std::max(recon, frobenius_norm(a - matmul_nt(us, r.v)) / std::max(1.0, frobenius_norm(a)));
    ortho = std::max({ortho, orthonormality_error(r.u), orthonormality_error(r.v)});

    const std::size_t rank = 1 + shapes.below(std::min(m, n));
    const Matrix p = projector_onto(truncated_basis(a, rank));
    idem = std::max(idem, frobenius_norm(matmul(p, p) - p));
    const Matrix low = testing::low_rank_matrix(m, n, rank, 5000 + i);
    const Matrix pl = projector_onto(truncated_basis(low, rank));
    capture = std::max(capture, frobenius_norm(matmul(pl, low) - low) / std::max(1.0, frobenius_norm(low)));
  }
  const double t = seconds_since(t0);
  const bool pass = recon <= 1e-8 && ortho <= 1e-8 && idem <= 1e-10 && capture <= 1e-8 && t < 30.0;
  return {pass, "50 matrices up to 64x64: reconstruction " + fmt(recon) + ", orthonormality " + fmt(ortho) +
                    ", idempotency " + fmt(idem) + ", rank-r capture " + fmt(capture) + ", " + fmt(t) + " s"};
}

// ---- 4, 5 -------------------------------------------------------------------

struct RunStats {
  std::size_t steps = 0;
  double worst_simplex = 0.0;
  double min_alpha = 1.0;
  std::size_t projected_updates = 0;
  double worst_null_ratio = 0.0;
};

void observe_full_run(const FineTuneResult& run, RunStats& st) {
  for (const auto& r : run.reports) {
    ++st.steps;
    st.worst_simplex = std::max(st.worst_simplex, std::abs(r.alpha.src + r.alpha.rec - 1.0));
    st.min_alpha = std::min({st.min_alpha, r.alpha.src, r.alpha.rec});
    for (const auto& row : r.layers)
      if (row.null_residual) {
        ++st.projected_updates;
        st.worst_null_ratio = std::max(st.worst_null_ratio, *row.null_residual / std::max(1.0, row.update_norm));
      }
  }
}

std::pair<bool, std::string> gating_simplex(const RunStats& st) {
  bool zero_ok = true;
  for (double tau : {0.1, 0.5, 1.0, 2.0, 3.0}) {
    const GateWeights w = softmax_pair(0.0, 0.0, tau);
    zero_ok = zero_ok && w.src == 0.5 && w.rec == 0.5;
  }
  const bool pass = st.steps > 0 && st.min_alpha >= 0.0 && st.worst_simplex <= 1e-9 && zero_ok;
  return {pass, std::to_string(st.steps) + " recorded steps: min alpha " + fmt(st.min_alpha) + ", max |sum-1| " +
                    fmt(st.worst_simplex) + "; o=[0,0] gives (0.5,0.5) for all tau: " + (zero_ok ? "yes" : "no")};
}

std::pair<bool, std::string> nullspace_guarantee(const RunStats& st, const SeedContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  BatchSampler sampler(ctx.data.train_src, ctx.data.train_rec, cfg.batch_size, cfg.src_ratio, Rng(cfg.seed, "c5"));
  const auto batch = sampler.next();
  auto projectors_with = [&](std::optional<std::size_t> k) {
    std::vector<std::optional<KnowledgeProjector>> out(ctx.base.parameters().size());
    if (!k) return out;
    const auto features = collect_all_features(ctx.base, ctx.data.probe_prompts);
    for (std::size_t l = 0; l < out.size(); ++l)
      if (features[l]) {
        const std::size_t kk = *k == SIZE_MAX ? features[l]->rows() : *k;
        out[l] = build_projector(*features[l], {kk, 0.9}, ProjectionMode::complement, ctx.base.parameters()[l].name);
      }
    return out;
  };
  auto one_step = [&](const std::vector<std::optional<KnowledgeProjector>>& proj) {
    TinyTransformer model = ctx.base;
    GemsOptimizer<TinyTransformer> opt(model, gems_config(cfg), Rng(cfg.seed, "gate"), proj);
    opt.train_step(model, std::span<const Sample>(batch));
    return model;
  };
  const TinyTransformer frozen = one_step(projectors_with(SIZE_MAX));
  double moved = 0.0;
  for (std::size_t l = 0; l < frozen.parameters().size(); ++l)
    if (frozen.parameters()[l].matrix_layer)
      moved = std::max(moved, testing::max_abs_diff(frozen.parameters()[l].value, ctx.base.parameters()[l].value));
  const TinyTransformer k0 = one_step(projectors_with(0));
  const TinyTransformer none = one_step({});
  bool identity = true;
  for (std::size_t l = 0; l < k0.parameters().size(); ++l)
    identity = identity && k0.parameters()[l].value == none.parameters()[l].value;

  const bool pass = st.projected_updates > 0 && st.worst_null_ratio <= 1e-8 && moved == 0.0 && identity;
  return {pass, std::to_string(st.projected_updates) + " projected updates: max ||D U_k|| / max(1,||D||) " +
                    fmt(st.worst_null_ratio) + "; k=n max weight change " + fmt(moved) +
                    "; k=0 step bit-identical to unprojected: " + (identity ? "yes" : "no")};
}

// ---- 6 ----------------------------------------------------------------------

std::pair<bool, std::string> rho_suite() {
  const Matrix g = testing::random_matrix(6, 9, 61);
  Matrix e1(2, 2), e2(2, 2);
  e1(0, 0) = 1.0;
  e2(1, 1) = 3.0;
  const double same = *conflict_coefficient(g, g);
  const double opposed = *conflict_coefficient(g, -1.0 * g);
  const double orth = *conflict_coefficient(e1, e2);
  const Matrix h = testing::random_matrix(6, 9, 62);
  const double base = *conflict_coefficient(g, h);
  double scale_dev = 0.0;
  for (double a : {1e-3, 0.5, 7.0, 1e4})
    for (double b : {1e-2, 3.0, 1e3})
      scale_dev = std::max(scale_dev, std::abs(*conflict_coefficient(a * g, b * h) - base));
  const bool pass = std::abs(same) <= 1e-12 && std::abs(opposed - 2.0) <= 1e-12 && orth == 1.0 && scale_dev <= 1e-10;
  return {pass, "rho(g,g)=" + fmt(same) + ", rho(g,-g)=" + fmt(opposed) + ", rho(orth)=" + fmt(orth) +
                    ", max scale deviation " + fmt(scale_dev)};
}

// ---- 7 ----------------------------------------------------------------------

std::pair<bool, std::string> memory_audit_check(const RunConfig& cfg) {
  const auto audit = memory_audit_json(cfg);
  const MemoryAudit a = memory_audit(4, 4, 2);
  Rng rng(3);
  ToyMlp toy(4, 4, 4, rng);
  GemsConfig gc;
  gc.shared.rank = 2;
  GemsOptimizer<ToyMlp> opt(toy, gc, Rng(4));
  const std::uint64_t live = live_state_elements(*opt.tuners()[0]);
  const bool instance = a.gems_states == 48 && a.lora_states == 32 && a.gems_weights == 16 && a.lora_weights == 32 &&
                        live == 48;
  const bool pass = audit.at("all_match").get<bool>() && instance;
  return {pass, std::to_string(audit.at("layers").size()) + " model layers, closed form == live: " +
                    (audit.at("all_match").get<bool>() ? "all" : "NOT all") + "; (4,4,2): gems_states " +
                    std::to_string(a.gems_states) + " (live " + std::to_string(live) + ") vs lora_states " +
                    std::to_string(a.lora_states) + ", weights " + std::to_string(a.gems_weights) + " vs " +
                    std::to_string(a.lora_weights)};
}

// ---- 8, 9, 10 ---------------------------------------------------------------

const AblationCheck* find_check(const AblationReport& rep, const std::string& name) {
  for (const auto& c : rep.checks)
    if (c.name == name) return &c;
  return nullptr;
}

// ---- 11 ---------------------------------------------------------------------

std::pair<bool, std::string> finite_differences(const RunConfig& cfg) {
  const Dataset ds = generate_dataset(cfg.seed, data_config(cfg));
  const Vocabulary v = Vocabulary::from(ds.config);
  double worst = 0.0;
  std::string worst_at;
  std::size_t checked = 0;
  for (std::size_t si = 0; si < 3; ++si) {
    Rng rng(cfg.seed, "fd-" + std::to_string(si));
    TinyTransformer model(model_config(cfg), rng);
    for (auto& p : model.parameters())
      if (!p.matrix_layer)
        for (double& x : p.value.data()) x += 0.2 * rng.normal();
    const auto& r = ds.test[si * 11 + 3];
    const Sample s{format_prompt(r, v, cfg.history_len), v.item_tokens(r.target), r.task};
    Gradients g = zeros_like(model.parameters());
    model.accumulate_gradient(s, g, 1.0);
    for (std::size_t l = 0; l < model.parameters().size(); ++l) {
      for (int e = 0; e < 5; ++e) {
        std::size_t k = rng.below(model.parameters()[l].value.size());
        if (l == 0) {  // embedding rows outside the sequence have zero gradient
          const auto& seq = e % 2 ? s.prompt : s.target;
          k = static_cast<std::size_t>(seq[rng.below(seq.size())]) * cfg.d_model + rng.below(cfg.d_model);
        }
        const double h = 1e-5;
        TinyTransformer plus = model, minus = model;
        plus.parameters()[l].value.data()[k] += h;
        minus.parameters()[l].value.data()[k] -= h;
        const double fd = (plus.sample_loss(s) - minus.sample_loss(s)) / (2 * h);
        const double an = g[l].data()[k];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
        ++checked;
        if (rel > worst) {
          worst = rel;
          worst_at = model.parameters()[l].name;
        }
      }
    }
  }
  return {worst <= 1e-4, std::to_string(checked) + " entries over every layer, 3 samples: max relative error " +
                             fmt(worst) + " at " + worst_at + " (<= 1e-4)"};
}

// ---- 12 ---------------------------------------------------------------------

int run_cli(const fs::path& out, const std::string& args) {
  const std::string cmd = "GEMS_OUT='" + out.string() + "' '" + std::string(GEMS_CLI_PATH) + "' " + args + " > '" +
                          (out / "stdout.log").string() + "' 2>&1";
  fs::create_directories(out);
  return std::system(cmd.c_str());
}

std::vector<std::pair<std::string, std::string>> tree_bytes(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    if (e.path().filename() == "timing.csv" || e.path().filename() == "stdout.log") continue;
    files.emplace_back(rel, read_file(e.path()));
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::pair<bool, std::string> determinism() {
  const fs::path root = fs::path(GEMS_BINARY_DIR) / "acceptance_runs";
  fs::remove_all(root);
  const std::string cfg = "--config '" + (fs::path(GEMS_SOURCE_DIR) / "configs" / "benchmark.json").string() + "'";
  const std::string smoke = "--config '" + (fs::path(GEMS_SOURCE_DIR) / "configs" / "smoke.json").string() + "'";
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const std::vector<std::string> steps{
        "gen-data " + cfg,
        "nullspace-build " + cfg,
        "train " + cfg + " --data '" + (out / "data").string() + "' --projectors '" + (out / "nullspace").string() + "'",
        "eval --checkpoint '" + (out / "train" / "checkpoint.bin").string() + "' --out '" + out.string() + "'",
        "conflict --run '" + (out / "train").string() + "'",
        "audit " + cfg,
        "ablate " + smoke,
    };
    for (const auto& s : steps)
      if (run_cli(out, s) != 0) return {false, "run " + std::string(run) + ": `gems " + s + "` failed"};
  }
  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b");
  if (a.size() != b.size()) return {false, "runs produced different file sets"};
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return {false, "file sets differ at " + a[i].first};
    if (a[i].second != b[i].second) return {false, a[i].first + " differs between runs"};
    bytes += a[i].second.size();
  }
  const bool has_all = std::any_of(a.begin(), a.end(), [](const auto& f) { return f.first == "train/checkpoint.bin"; }) &&
                       std::any_of(a.begin(), a.end(), [](const auto& f) { return f.first == "train/metrics.csv"; }) &&
                       std::any_of(a.begin(), a.end(), [](const auto& f) { return f.first == "ablate/report.json"; });
  return {has_all, std::to_string(a.size()) + " files (" + std::to_string(bytes) +
                       " bytes, incl. checkpoint, metrics, eval, intent, heatmaps, audit, ablation report) byte-identical "
                       "across two CLI runs"};
}

}  // namespace

int main() {
  const RunConfig cfg = benchmark_config();
  std::cout << "benchmark config " << config_hash(cfg) << ": " << to_json(cfg).dump() << std::endl;

  criterion(1, "oracle-equivalence", oracle_equivalence);
  criterion(2, "dense-adam-degeneracy", dense_adam_degeneracy);
  criterion(3, "svd-suite", svd_suite);

  // One 3-seed ablation serves criteria 4, 5, 8, 9 and 10.
  RunStats stats;
  std::optional<SeedContext> first_seed;
  AblationReport rep;
  double ablation_seconds = 0.0;
  std::string ablation_error;
  try {
    const auto t0 = Clock::now();
    rep = run_ablation(cfg, [&](const SeedContext& ctx, const std::string& variant, const FineTuneResult& run) {
      if (variant != "full") return;
      observe_full_run(run, stats);
      if (!first_seed) first_seed = ctx;
    });
    ablation_seconds = seconds_since(t0);
    std::cout << ablation_table(rep);
  } catch (const std::exception& e) {
    ablation_error = e.what();
  }
  auto ablation_failed = [&]() -> std::pair<bool, std::string> { return {false, "ablation failed: " + ablation_error}; };

  criterion(4, "gating-simplex", [&] { return ablation_error.empty() ? gating_simplex(stats) : ablation_failed(); });
  criterion(5, "nullspace-guarantee",
            [&] { return ablation_error.empty() ? nullspace_guarantee(stats, *first_seed) : ablation_failed(); });
  criterion(6, "rho-suite", rho_suite);
  criterion(7, "memory-audit", [&] { return memory_audit_check(cfg); });

  auto ablation_criterion = [&](const std::string& check, double limit) -> std::pair<bool, std::string> {
    if (!ablation_error.empty()) return ablation_failed();
    const AblationCheck* c = find_check(rep, check);
    if (!c) return {false, "check " + check + " missing from the report"};
    const bool in_time = limit <= 0.0 || ablation_seconds < limit;
    std::string detail = c->detail;
    if (limit > 0.0) detail += " (3 seeds x 5 variants in " + fmt(ablation_seconds) + " s, limit " + fmt(limit) + " s)";
    return {c->pass && in_time, detail};
  };
  criterion(8, "conflict-reduction", [&] { return ablation_criterion("conflict_reduction", 300.0); });
  criterion(9, "ablation-ordering", [&] { return ablation_criterion("ablation_ordering", 900.0); });
  criterion(10, "intent-preservation", [&] { return ablation_criterion("intent_preservation", 0.0); });
  criterion(11, "finite-differences", [&] { return finite_differences(cfg); });
  criterion(12, "determinism", determinism);

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all 12 criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
