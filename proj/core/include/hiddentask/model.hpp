#pragma once

// Shared-backbone multi-task classifier: logits_i(x) = head_i(backbone(x)).

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hiddentask/autodiff.hpp"
#include "hiddentask/tensor.hpp"

namespace hiddentask {

struct TaskSpec {
  std::string name;
  std::size_t num_classes = 2;
  double weight = 1.0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

enum class BackboneKind : std::uint32_t { identity = 0, mlp = 1, small_conv = 2 };
enum class HeadKind : std::uint32_t { linear = 0, mlp = 1 };

std::string_view to_string(BackboneKind kind);
std::string_view to_string(HeadKind kind);
BackboneKind parse_backbone_kind(std::string_view name);
HeadKind parse_head_kind(std::string_view name);

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t numel() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Inputs are mapped through (x - input_shift) * input_scale before the
/// first layer. Every layer is followed by ReLU, so features are >= 0.
///
/// mlp: `widths` are the output widths of the dense layers.
/// small_conv: `widths` are the channel counts of two 3x3 conv layers; the
///   first is followed by 2x2 average pooling, the second by global average
///   pooling, so the feature dimension is the last channel count.
struct BackboneConfig {
  BackboneKind kind = BackboneKind::mlp;
  std::size_t input_dim = 32;
  std::vector<std::size_t> widths{64, 128, 64};
  ImageShape image{};
  double input_shift = 0.0;
  double input_scale = 1.0;

  std::size_t feature_dim() const;
  std::size_t layer_count() const;
  /// Width of the flattened output of layer k (1-based).
  std::size_t layer_output_dim(std::size_t k) const;
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct HeadConfig {
  HeadKind kind = HeadKind::linear;
  std::size_t hidden_width = 32;

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

/// Dense layers store weight as [in, out]; conv layers as [out, in, k, k].
struct Layer {
  Tensor weight;
  Tensor bias;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct Backbone {
  BackboneConfig config;
  std::vector<Layer> layers;

  std::size_t feature_dim() const { return config.feature_dim(); }
  friend bool operator==(const Backbone&, const Backbone&) = default;
};

struct Head {
  HeadConfig config;
  std::vector<Layer> layers;

  std::size_t input_dim() const;
  std::size_t num_classes() const;
  friend bool operator==(const Head&, const Head&) = default;
};

Backbone make_backbone(const BackboneConfig& config, std::uint64_t seed);
Head make_head(const HeadConfig& config, std::size_t input_dim, std::size_t num_classes,
               std::uint64_t seed);

class MultiTaskModel {
 public:
  MultiTaskModel(Backbone backbone, std::vector<TaskSpec> tasks, std::vector<Head> heads);

  static MultiTaskModel create(const BackboneConfig& backbone, const HeadConfig& head,
                               std::vector<TaskSpec> tasks, std::uint64_t seed);

  const Backbone& backbone() const noexcept { return backbone_; }
  Backbone& backbone() noexcept { return backbone_; }
  const std::vector<TaskSpec>& tasks() const noexcept { return tasks_; }
  const std::vector<Head>& heads() const noexcept { return heads_; }

  bool has_task(std::string_view name) const;
  std::size_t task_index(std::string_view name) const;
  const TaskSpec& task(std::string_view name) const { return tasks_[task_index(name)]; }
  const Head& head(std::string_view name) const { return heads_[task_index(name)]; }
  Head& head(std::string_view name) { return heads_[task_index(name)]; }
  std::vector<std::string> task_names() const;

  /// Copy without one task and its head: what an attacker with no access to
  /// that head can hold.
  MultiTaskModel without_task(std::string_view name) const;
  MultiTaskModel with_backbone(Backbone backbone) const;
  /// Copy with the named heads replaced.
  MultiTaskModel with_heads(const std::map<std::string, Head>& heads) const;

  friend bool operator==(const MultiTaskModel&, const MultiTaskModel&) = default;

 private:
  void validate() const;

  Backbone backbone_;
  std::vector<TaskSpec> tasks_;
  std::vector<Head> heads_;
};

struct BoundLayer {
  Var weight;
  Var bias;
};

std::vector<BoundLayer> bind_layers(Tape& tape, const std::vector<Layer>& layers, bool trainable);

/// Backbone layers placed on a tape.
class TracedBackbone {
 public:
  TracedBackbone(Tape& tape, const Backbone& backbone, bool trainable = false);

  /// B_k(x) flattened to [N, dim]; k is 1-based, absent means the final features.
  Var features(Var x, std::optional<std::size_t> up_to_layer = std::nullopt) const;
  const std::vector<BoundLayer>& params() const noexcept { return params_; }

 private:
  Tape* tape_;
  const Backbone* backbone_;
  std::vector<BoundLayer> params_;
};

class TracedHead {
 public:
  TracedHead(Tape& tape, const Head& head, bool trainable = false);

  Var logits(Var features) const;
  const std::vector<BoundLayer>& params() const noexcept { return params_; }

 private:
  Tape* tape_;
  const Head* head_;
  std::vector<BoundLayer> params_;
};

/// Whole model on a tape, with per-part trainability.
class TracedModel {
 public:
  TracedModel(Tape& tape, const MultiTaskModel& model, bool train_backbone = false,
              bool train_heads = false);

  const MultiTaskModel& model() const noexcept { return *model_; }
  const TracedBackbone& backbone() const noexcept { return backbone_; }
  const TracedHead& head(std::string_view task) const;
  Var logits(Var x, std::string_view task) const;

 private:
  const MultiTaskModel* model_;
  TracedBackbone backbone_;
  std::vector<TracedHead> heads_;
};

/// Per-task labels for a batch, keyed by task name.
using TaskLabels = std::map<std::string, std::vector<std::size_t>, std::less<>>;

Tensor forward_backbone(const Backbone& backbone, const Tensor& x,
                        std::optional<std::size_t> up_to_layer = std::nullopt);
Tensor forward_backbone(const MultiTaskModel& model, const Tensor& x,
                        std::optional<std::size_t> up_to_layer = std::nullopt);
Tensor forward_head(const Head& head, const Tensor& features);
Tensor forward_task(const MultiTaskModel& model, const Tensor& x, std::string_view task);

/// -log softmax(logits)[label], computed with log-sum-exp.
double cross_entropy(std::span<const double> logits, std::size_t label);

/// Batch mean of sum_{i in subset} weight_i * CE(logits_i, y_i).
double multitask_loss(const MultiTaskModel& model, const Tensor& x, const TaskLabels& labels,
                      std::span<const std::string> subset);
/// Traced per-sample version, [N].
Var multitask_loss(const TracedModel& traced, Var features, const TaskLabels& labels,
                   std::span<const std::string> subset);

/// Argmax per row; ties go to the lowest class index.
std::size_t argmax(std::span<const double> logits);
std::vector<std::size_t> predict(const MultiTaskModel& model, const Tensor& x, std::string_view task);

}  // namespace hiddentask
