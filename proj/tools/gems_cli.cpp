// gems: command-line front end. Configuration comes from defaults, then
// --config FILE, then `--key value` flags; see `gems <command> --help`.

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gems/commands.hpp"

namespace {

using namespace gems;

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) options[key] = sub->add_option("--" + key, values[key], "config: " + key);
  }

  RunConfig resolve() const {
    RunConfig cfg = config_file.empty() ? RunConfig{} : load_config_file(config_file);
    for (const auto& key : config_keys())
      if (options.at(key)->count()) set_config_value(cfg, key, values.at(key));
    validate(cfg);
    return cfg;
  }
};

int report(ErrorKind kind, const std::string& message) {
  std::cerr << "gems: error code=" << to_string(kind) << ": " << message << '\n';
  return kind == ErrorKind::invalid_argument ? 2 : static_cast<int>(kind);
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-subspace tuning with knowledge-preserving projection on a synthetic search/recommendation task"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, ns_flags, train_flags, audit_flags, ablate_flags;
  std::string ns_checkpoint, train_data, train_projectors, eval_checkpoint, eval_data, eval_split = "test", eval_out,
      conflict_run;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset splits as JSONL");
  gen_flags.attach(gen);

  auto* ns = app.add_subcommand("nullspace-build", "build per-layer projectors from probe activations of a base model");
  ns_flags.attach(ns);
  ns->add_option("--checkpoint", ns_checkpoint, "base checkpoint (default: pretrain from the config)")
      ->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "fine-tune one variant; writes checkpoint, logs and test metrics");
  train_flags.attach(train);
  train->add_option("--data", train_data, "directory written by gen-data (default: regenerate)")
      ->check(CLI::ExistingDirectory);
  train->add_option("--projectors", train_projectors, "directory written by nullspace-build (default: build in memory)")
      ->check(CLI::ExistingDirectory);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; prints the metrics JSON");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "JSONL split file (default: regenerate from the checkpoint config)")
      ->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "split to regenerate when --data is absent")
      ->check(CLI::IsMember({"train", "valid", "test", "probe"}));
  eval->add_option("--out", eval_out, "also write <out>/eval/<split>.json");

  auto* conflict = app.add_subcommand("conflict", "aggregate a train run's conflict logs into heatmap CSVs");
  conflict->add_option("--run", conflict_run, "train output directory")->required()->check(CLI::ExistingDirectory);

  auto* audit = app.add_subcommand("audit", "closed-form vs allocated optimizer-state counts per layer");
  audit_flags.attach(audit);

  auto* ablate = app.add_subcommand("ablate", "run every variant over several seeds and check the expected orderings");
  ablate_flags.attach(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorKind::config, one_line(e.what()));
  }

  try {
    if (*gen) {
      std::cout << cmd_gen_data(gen_flags.resolve()).string() << '\n';
    } else if (*ns) {
      std::optional<fs::path> ck;
      if (!ns_checkpoint.empty()) ck = ns_checkpoint;
      std::cout << cmd_nullspace_build(ns_flags.resolve(), ck).string() << '\n';
    } else if (*train) {
      TrainOptions opt;
      if (!train_data.empty()) opt.data_dir = train_data;
      if (!train_projectors.empty()) opt.projector_dir = train_projectors;
      std::cout << cmd_train(train_flags.resolve(), opt).string() << '\n';
    } else if (*eval) {
      std::optional<fs::path> data, out;
      if (!eval_data.empty()) data = eval_data;
      if (!eval_out.empty()) out = eval_out;
      std::cout << cmd_eval(eval_checkpoint, data, eval_split, out).dump(2) << '\n';
    } else if (*conflict) {
      std::cout << cmd_conflict(conflict_run).string() << '\n';
    } else if (*audit) {
      std::cout << cmd_audit(audit_flags.resolve()).string() << '\n';
    } else if (*ablate) {
      fs::path dir;
      const AblationReport rep = cmd_ablate(ablate_flags.resolve(), &dir);
      std::cout << ablation_table(rep);
      for (const auto& c : rep.checks) std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
      std::cout << dir.string() << '\n';
    }
  } catch (const Error& e) {
    return report(e.kind(), one_line(e.what()));
  } catch (const std::filesystem::filesystem_error& e) {
    return report(ErrorKind::io, one_line(e.what()));
  } catch (const std::exception& e) {
    std::cerr << "gems: error code=internal: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
