#pragma once

// Measurement protocol: clean and adversarial accuracy per task, the
// attack-performance / stealthiness deltas, the inner-product forgetting
// diagnostic, and target-free hyperparameter selection.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hiddentask/attacks.hpp"
#include "hiddentask/data.hpp"
#include "hiddentask/model.hpp"

namespace hiddentask {

double accuracy(const MultiTaskModel& model, const Tensor& inputs, std::span<const std::size_t> labels,
                std::string_view task);
double accuracy(const MultiTaskModel& model, const LabeledDataset& dataset, std::string_view task);
/// Accuracy on the perturbed samples against the original labels.
double adv_accuracy(const MultiTaskModel& model, const AdversarialBatch& batch, std::span<const std::size_t> labels,
                    std::string_view task);

enum class TaskRole { target, non_target };

struct TaskOutcome {
  std::string task;
  TaskRole role = TaskRole::non_target;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;

  double delta() const { return clean_accuracy - adv_accuracy; }
};

struct AttackReport {
  std::string attack;
  std::string target_task;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<TaskOutcome> tasks;

  const TaskOutcome& outcome(std::string_view task) const;
  /// Clean minus adversarial accuracy on the target task.
  double attack_performance() const;
  /// Clean minus adversarial accuracy per non-target task, in task order.
  std::vector<double> stealthiness_deltas() const;
  double worst_stealthiness_delta() const;
  double mean_stealthiness_delta() const;

  /// task,role,clean_acc,adv_acc,delta - one row per task.
  void write_csv(std::ostream& os) const;
  nlohmann::json to_json() const;
  /// "adv-target/adv-non-target" in percent, non-target averaged.
  std::string table_cell() const;
};

/// Field-wise arithmetic mean of reports over the same tasks.
AttackReport average_reports(std::span<const AttackReport> reports);

/// Everything an attack may use. `attacker_model` lacks the target head; its
/// non-target heads are the victim's (white-box) or surrogates (black-box).
struct AttackSetup {
  const MultiTaskModel* victim = nullptr;
  const MultiTaskModel* attacker_model = nullptr;
  const Backbone* forgotten = nullptr;
  std::string target_task;
};

struct AttackSpec {
  AttackKind kind = AttackKind::cf_delta;
  AttackConfig config;
};

struct AttackRun {
  AttackReport report;
  std::vector<AdversarialBatch> batches;  // one, or one per proxy for cross_task
};

/// Generates adversarial samples for `eval` and scores the victim on them.
/// Attack code only sees non-target labels; target labels are read here for
/// scoring. fgsm/pgd run against the victim's target head (oracle mode).
AttackRun run_attack_report(const AttackSetup& setup, const AttackSpec& spec, const LabeledDataset& eval);

/// Scores one batch of perturbed `eval` inputs.
AttackReport score_batch(const MultiTaskModel& victim, const AdversarialBatch& batch, const LabeledDataset& eval,
                         std::string_view target_task);

struct InnerProductSeries {
  std::string evaluated_task;
  std::vector<std::size_t> labels;
  std::vector<double> before;  // w_1 . B(x)
  std::vector<double> after;   // w_1 . B'(x)
  double separation_before = 0.0;
  double separation_after = 0.0;

  /// (after - before) / before; 0 when both are 0.
  double relative_change() const;
  /// sample,label,before,after - one row per sample.
  void write_csv(std::ostream& os) const;
};

struct ForgettingDiagnostic {
  std::string target_task;
  std::vector<InnerProductSeries> series;  // one per head, in task order

  const InnerProductSeries& for_task(std::string_view task) const;
};

/// |mean(values | label 1) - mean(values | label 0)|; 0 when a group is empty.
double separation_statistic(std::span<const double> values, std::span<const std::size_t> labels);

/// Inner products of each binary linear head's class-1 weights with the
/// features before and after fine-tuning.
ForgettingDiagnostic forgetting_diagnostic(const MultiTaskModel& model, const Backbone& forgotten,
                                           const LabeledDataset& dataset, std::string_view target_task);

struct AttackParams {
  std::size_t finetune_epochs = 0;
  double beta = 0.0;
  double gamma = 0.0;

  friend bool operator==(const AttackParams&, const AttackParams&) = default;
};

struct SweepPoint {
  AttackParams params;
  AttackReport report;
};

inline constexpr double kStealthThreshold = 0.1;

/// Among points whose every non-target delta is <= threshold, picks the
/// largest beta, then epochs, then gamma. Reads no target-task field.
/// Returns nullopt when no point is feasible.
std::optional<std::size_t> select_hyperparams(std::span<const SweepPoint> sweep,
                                              double threshold = kStealthThreshold);

}  // namespace hiddentask
