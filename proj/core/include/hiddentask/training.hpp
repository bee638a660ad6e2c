#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hiddentask/data.hpp"
#include "hiddentask/model.hpp"

namespace hiddentask {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  /// L2 penalty on trainable weights; applied as decoupled decay each step.
  double weight_decay = 0.0;
  /// Weight of the mean squared logit drift of each trained task against the
  /// model fine-tuning started from. Used by finetune_forget only.
  double anchor_weight = 0.0;
  std::uint64_t seed = 1;
  bool freeze_heads = false;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::vector<double> task_loss;      // mean weighted loss per task over the epoch
  std::vector<double> task_accuracy;  // running accuracy per task over the epoch
  double total_loss = 0.0;
};

struct TrainHistory {
  std::vector<std::string> tasks;
  std::vector<EpochRecord> epochs;

  /// epoch, then loss_<task> and acc_<task> for every task.
  void write_csv(std::ostream& os) const;
};

/// Mini-batch SGD with momentum on the weighted multi-task loss restricted
/// to `tasks`. Updates `model` in place.
TrainHistory train_multitask(MultiTaskModel& model, const DatasetView& data,
                             const std::vector<std::string>& tasks, const TrainConfig& cfg);

struct ForgettingResult {
  Backbone backbone;
  TrainHistory history;
};

/// Fine-tunes a copy of the backbone on every task visible in `attacker_data`
/// with all heads frozen. The view must hide `target_task`. The input model
/// is not modified.
ForgettingResult finetune_forget(const MultiTaskModel& model, const DatasetView& attacker_data,
                                 std::string_view target_task, const TrainConfig& cfg);

/// Label source for surrogate fitting: inputs plus task name to labels.
using LabelOracle = std::function<std::vector<std::size_t>(const Tensor& inputs, std::string_view task)>;

/// Ground-truth labels of the rows of `view`; inputs must be the view's own.
LabelOracle view_label_oracle(const DatasetView& view);
/// Black-box queries of a deployed model's predictions.
LabelOracle model_output_oracle(const MultiTaskModel& model);

/// Linear heads fitted on the frozen features of `backbone`.
std::map<std::string, Head> fit_surrogate_heads(const Backbone& backbone, const Tensor& inputs,
                                                const std::vector<TaskSpec>& tasks,
                                                const LabelOracle& oracle, const TrainConfig& cfg);

}  // namespace hiddentask
