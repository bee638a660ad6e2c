// htlab: batch front-end for the hidden-task attack pipeline.
//
//   htlab run      --config FILE [--out DIR] [--seed N] [--parallel N]
//   htlab sweep    --config FILE [--axis A] [--values v1,v2,...]
//   htlab diagnose --config FILE
//   htlab train | attack | report --config FILE
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hiddentask/errors.hpp"
#include "hiddentask/experiment.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallel;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Experiment config or run manifest")->required();
  cmd->add_option("--out", flags.out, "Output directory (overrides the config)");
  cmd->add_option("--seed", flags.seed, "Experiment seed (overrides the config)");
  cmd->add_option("--parallel", flags.parallel, "Attack worker threads")->check(CLI::PositiveNumber);
}

hiddentask::ExperimentConfig load(const CommonFlags& flags) {
  auto cfg = hiddentask::load_experiment_config(flags.config);
  hiddentask::RunOverrides o;
  o.seed = flags.seed;
  if (!flags.out.empty()) o.out = flags.out;
  o.parallel = flags.parallel;
  hiddentask::apply_overrides(cfg, o);
  cfg.validate();
  return cfg;
}

void print_report(const hiddentask::AttackReport& r) {
  std::cout << r.attack << " on target " << r.target_task << ": " << r.table_cell() << " (adv target / adv non-target, %)\n";
  r.write_csv(std::cout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hidden-task attacks on multi-task classifiers"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string axis;
  std::vector<double> values;

  auto* run = app.add_subcommand("run", "Generate, train, forget, attack and report");
  auto* sweep = app.add_subcommand("sweep", "Sweep one attack hyperparameter and select by the stealth rule");
  auto* diagnose = app.add_subcommand("diagnose", "Inner-product forgetting diagnostic for every target choice");
  auto* train = app.add_subcommand("train", "Stage: dataset and victim training");
  auto* attack = app.add_subcommand("attack", "Stage: forgetting and adversarial batch generation");
  auto* report = app.add_subcommand("report", "Stage: score saved adversarial batches");
  for (auto* cmd : {run, sweep, diagnose, train, attack, report}) add_common(cmd, flags);
  sweep->add_option("--axis", axis, "finetune_epochs, beta or gamma");
  sweep->add_option("--values", values, "Axis values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    const auto cfg = load(flags);
    if (run->parsed()) {
      hiddentask::cmd_train(cfg);
      hiddentask::cmd_attack(cfg);
      print_report(hiddentask::cmd_report(cfg));
      std::cout << "artifacts in " << cfg.output_dir.string() << '\n';
    } else if (sweep->parsed()) {
      std::optional<hiddentask::SweepAxis> ax;
      if (!axis.empty()) {
        try {
          ax = hiddentask::parse_sweep_axis(axis);
        } catch (const hiddentask::LookupError& e) {
          throw hiddentask::ConfigError(std::string("--axis: ") + e.what());
        }
      }
      const auto result = hiddentask::cmd_sweep(cfg, ax, values);
      hiddentask::write_sweep_csv(std::cout, ax.value_or(cfg.sweep_axis), result);
      std::cout << hiddentask::selection_record(ax.value_or(cfg.sweep_axis), result).dump(2) << '\n';
    } else if (diagnose->parsed()) {
      const auto files = hiddentask::cmd_diagnose(cfg);
      std::cout << files.size() << " diagnostic files in " << (cfg.output_dir / "diagnostic").string() << '\n';
    } else if (train->parsed()) {
      hiddentask::cmd_train(cfg);
    } else if (attack->parsed()) {
      hiddentask::cmd_attack(cfg);
    } else if (report->parsed()) {
      print_report(hiddentask::cmd_report(cfg));
    }
  } catch (const hiddentask::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const hiddentask::UnsupportedError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const hiddentask::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
