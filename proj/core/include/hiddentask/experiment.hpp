#pragma once

// Experiment configuration and the staged pipeline behind the htlab tool:
// data -> split -> train -> attacker view -> forget -> attack -> report.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hiddentask/attacks.hpp"
#include "hiddentask/data.hpp"
#include "hiddentask/eval.hpp"
#include "hiddentask/model.hpp"
#include "hiddentask/training.hpp"

namespace hiddentask {

enum class SweepAxis { finetune_epochs, beta, gamma };
std::string_view to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view name);

struct StageSeeds {
  std::uint64_t data = 0;
  std::uint64_t split = 0;
  std::uint64_t model = 0;
  std::uint64_t train = 0;
  std::uint64_t finetune = 0;
  std::uint64_t surrogate = 0;
  std::uint64_t attack = 0;
};

/// Per-stage seeds are fixed offsets of one experiment seed.
StageSeeds derive_seeds(std::uint64_t seed);
nlohmann::json to_json(const StageSeeds& seeds);

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path output_dir = "out";

  /// Exactly one source: a generator config, or a dataset file pair.
  std::optional<SyntheticConfig> synthetic;
  std::filesystem::path dataset_file;
  std::filesystem::path dataset_header;

  BackboneConfig backbone;
  HeadConfig head;
  /// Task table, from the generator or the dataset header, with weights applied.
  std::vector<TaskSpec> tasks;

  double owner_fraction = kDefaultOwnerFraction;
  /// Rows held out of the owner split for scoring.
  std::size_t eval_size = 1000;

  std::string target_task;
  HeadAccess head_access = HeadAccess::white_box;

  TrainConfig train;
  TrainConfig finetune;
  TrainConfig surrogate;

  AttackKind attack = AttackKind::cf_delta;
  AttackConfig attack_config;

  SweepAxis sweep_axis = SweepAxis::beta;
  std::vector<double> sweep_values;

  /// Where the config was read from, for error messages.
  std::string origin;

  StageSeeds seeds() const { return derive_seeds(seed); }
  /// Throws ConfigError; touches no data beyond the dataset header.
  void validate() const;
};

/// Canonical form with every default filled in; parses back to an equal config.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Throws ConfigError naming `origin` and, when `text` is given, the line of
/// the offending key. Relative dataset paths resolve against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, std::string_view origin,
                                             std::string_view text = {},
                                             const std::filesystem::path& base_dir = {});
/// Reads a config file, or a run manifest whose config hash is re-verified.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// A stage of the pipeline failed; exit code 3.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what);
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct PreparedData {
  LabeledDataset dataset;
  DatasetSplit split;
  LabeledDataset train;  // owner rows minus the held-out tail
  LabeledDataset eval;   // last eval_size owner rows
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct TrainedVictim {
  MultiTaskModel model;
  TrainHistory history;
};

TrainedVictim train_victim(const ExperimentConfig& cfg, const PreparedData& data);

/// The victim minus the target head; in black-box mode the remaining heads
/// are replaced by surrogates fitted to the victim's outputs on attacker data.
MultiTaskModel make_attacker_model(const ExperimentConfig& cfg, const MultiTaskModel& victim,
                                   const LabeledDataset& attacker_data, std::string_view target);

struct AttackerKit {
  MultiTaskModel model;
  Backbone forgotten;
  TrainHistory finetune_history;
};

/// make_attacker_model followed by finetune_forget on the attacker split.
AttackerKit prepare_attacker(const ExperimentConfig& cfg, const MultiTaskModel& victim,
                             const LabeledDataset& attacker_data, std::string_view target,
                             const TrainConfig& finetune);

AttackRun execute_attack(const MultiTaskModel& victim, const AttackerKit& kit, std::string_view target,
                         const AttackSpec& spec, const LabeledDataset& eval);

/// Points along one axis, other coordinates from the config.
std::vector<AttackParams> axis_grid(const ExperimentConfig& cfg, SweepAxis axis, std::span<const double> values);

struct SweepResult {
  std::vector<SweepPoint> points;
  std::optional<std::size_t> chosen;
};

/// Scores each point on the attacker split, reusing `victim` and one
/// fine-tuned backbone per distinct epoch count, then applies
/// select_hyperparams.
SweepResult run_sweep(const ExperimentConfig& cfg, const MultiTaskModel& victim, const PreparedData& data,
                      std::string_view target, std::span<const AttackParams> grid);

/// axis value, then adv - clean accuracy per task.
void write_sweep_csv(std::ostream& os, SweepAxis axis, const SweepResult& result);
nlohmann::json selection_record(SweepAxis axis, const SweepResult& result);

/// Command-line overrides applied after loading.
struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::size_t> parallel;
};

void apply_overrides(ExperimentConfig& cfg, const RunOverrides& overrides);

/// Full pipeline; returns the output directory.
std::filesystem::path cmd_run(const ExperimentConfig& cfg);
/// Sweep over `values` (the config's sweep section when empty).
SweepResult cmd_sweep(const ExperimentConfig& cfg, std::optional<SweepAxis> axis, std::vector<double> values);
/// One inner-product CSV per (target choice, evaluated task); returns their paths.
std::vector<std::filesystem::path> cmd_diagnose(const ExperimentConfig& cfg);

/// Stages of cmd_run over a shared output directory.
void cmd_train(const ExperimentConfig& cfg);
void cmd_attack(const ExperimentConfig& cfg);
AttackReport cmd_report(const ExperimentConfig& cfg);

}  // namespace hiddentask
