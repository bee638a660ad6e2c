#pragma once

// Procedural multi-attribute datasets, owner/attacker splits and the label
// views that keep a hidden task's labels away from attacker code.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hiddentask/model.hpp"
#include "hiddentask/tensor.hpp"

namespace hiddentask {

/// Label = number of thresholds below sum_f loading_f * z_f.
struct SyntheticTask {
  std::string name;
  std::vector<std::size_t> factors;
  std::vector<double> loadings;    // defaults to 1 per factor
  std::vector<double> thresholds{0.0};

  std::size_t num_classes() const { return thresholds.size() + 1; }
};

struct SyntheticConfig {
  std::size_t num_samples = 12000;
  std::size_t input_dim = 32;
  std::optional<ImageShape> image;
  std::size_t num_latent = 4;
  std::vector<SyntheticTask> tasks;
  /// Row-major num_latent x num_latent; empty means identity.
  std::vector<double> correlation;
  double noise_std = 0.1;
  /// Column standard deviations between the centre 127.5 and either pixel
  /// bound; values beyond are clipped.
  double sigmas_to_edge = 8.0;
  std::uint64_t seed = 7;

  void validate() const;
  std::vector<TaskSpec> task_specs() const;

  /// Three binary tasks A, B, C over four latent factors; A and B read
  /// factors correlated at 0.6, C an independent one.
  static SyntheticConfig benchmark(std::uint64_t seed = 7);
};

nlohmann::json to_json(const SyntheticConfig& cfg);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

class LabeledDataset {
 public:
  LabeledDataset(Tensor inputs, std::vector<TaskSpec> tasks, TaskLabels labels,
                 std::optional<ImageShape> image = std::nullopt);

  std::size_t size() const { return inputs_.dim(0); }
  std::size_t input_dim() const { return inputs_.dim(1); }
  const Tensor& inputs() const noexcept { return inputs_; }
  const std::vector<TaskSpec>& tasks() const noexcept { return tasks_; }
  const std::optional<ImageShape>& image() const noexcept { return image_; }
  bool has_task(std::string_view name) const;
  const std::vector<std::size_t>& labels(std::string_view task) const;
  const TaskLabels& all_labels() const noexcept { return labels_; }

  LabeledDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;

 private:
  Tensor inputs_;
  std::vector<TaskSpec> tasks_;
  TaskLabels labels_;
  std::optional<ImageShape> image_;
};

LabeledDataset generate_synthetic(const SyntheticConfig& cfg);

/// Read-only window on a dataset exposing only some tasks' labels. Holds a
/// reference; the dataset must outlive the view.
class DatasetView {
 public:
  DatasetView(const LabeledDataset& dataset, std::vector<std::string> visible_tasks);

  std::size_t size() const { return dataset_->size(); }
  const Tensor& inputs() const { return dataset_->inputs(); }
  const std::vector<std::string>& visible_tasks() const noexcept { return visible_; }
  bool is_visible(std::string_view task) const;
  /// Throws AccessError for hidden tasks, LookupError for unknown ones.
  const std::vector<std::size_t>& labels(std::string_view task) const;
  /// Visible labels of the given rows.
  TaskLabels gather_labels(std::span<const std::size_t> rows) const;
  TaskLabels visible_labels() const;

 private:
  const LabeledDataset* dataset_;
  std::vector<std::string> visible_;
};

DatasetView full_view(const LabeledDataset& dataset);
/// Every task except `target_task`.
DatasetView attacker_view(const LabeledDataset& dataset, std::string_view target_task);

struct DatasetSplit {
  LabeledDataset owner;
  LabeledDataset attacker;
  std::vector<std::size_t> owner_indices;
  std::vector<std::size_t> attacker_indices;
};

inline constexpr double kDefaultOwnerFraction = 0.9;

DatasetSplit split_dataset(const LabeledDataset& dataset, double owner_fraction, std::uint64_t seed);

/// Binary block ("MTDS", u32 version, inputs tensor, labels tensor [N, T])
/// plus a JSON header with the task table, dims and provenance.
void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& bin_path,
                  const std::filesystem::path& json_path, const nlohmann::json& provenance = {});
LabeledDataset load_dataset(const std::filesystem::path& bin_path, const std::filesystem::path& json_path);

}  // namespace hiddentask
