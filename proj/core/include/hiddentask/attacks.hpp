#pragma once

// L-infinity adversarial example generators sharing one signed-gradient
// iteration: step, project onto the eps-ball around x, clip into [0, 255],
// and keep the best iterate per sample.
//
// Label-free attacks (nrdm, dr, cf_attack) take only backbones, so they cannot
// read a hidden task's head or labels.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hiddentask/autodiff.hpp"
#include "hiddentask/model.hpp"
#include "hiddentask/tensor.hpp"

namespace hiddentask {

inline constexpr double kPixelMin = 0.0;
inline constexpr double kPixelMax = 255.0;

enum class HeadAccess { white_box, black_box_surrogate };
enum class AttackKind { fgsm, pgd, cross_task, nrdm, dr, cf, cf_delta };

std::string_view to_string(HeadAccess access);
std::string_view to_string(AttackKind kind);
HeadAccess parse_head_access(std::string_view name);
AttackKind parse_attack_kind(std::string_view name);
inline constexpr AttackKind kAllAttacks[] = {AttackKind::fgsm, AttackKind::pgd, AttackKind::cross_task,
                                             AttackKind::nrdm, AttackKind::dr,  AttackKind::cf,
                                             AttackKind::cf_delta};

struct AttackConfig {
  double epsilon = 8.0;
  /// Effective step is min(step_size, 2 * epsilon).
  double step_size = 2.0;
  std::size_t iterations = 10;
  double beta = 10.0;
  double gamma = 0.0;
  /// 1-based backbone layer for nrdm/dr; absent means the final features.
  std::optional<std::size_t> feature_layer;
  HeadAccess head_access = HeadAccess::white_box;
  /// Seeds the random start of nrdm.
  std::uint64_t seed = 0;
  /// Worker threads over sample chunks; results do not depend on it.
  std::size_t parallel = 1;

  void validate() const;
  double effective_step() const;
};

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct AdversarialBatch {
  std::string attack;
  AttackConfig config;
  std::string proxy_task;  // cross-task attacks only
  Tensor originals;
  Tensor perturbed;
  std::vector<double> objectives;          // at the returned iterate
  std::vector<double> initial_objectives;  // at delta = 0

  std::size_t size() const { return originals.empty() ? 0 : originals.dim(0); }
};

void save_adversarial_batch(const AdversarialBatch& batch, const std::filesystem::path& bin_path,
                            const std::filesystem::path& json_path);
AdversarialBatch load_adversarial_batch(const std::filesystem::path& bin_path,
                                        const std::filesystem::path& json_path);

/// x + clip(candidate - x, -eps, eps), then clip into [0, 255].
Tensor project_budget(const Tensor& x, const Tensor& candidate, double epsilon);

/// Per-sample objectives on a tape; each returns an [N] vector.
namespace objectives {

Var cross_entropy(const TracedModel& model, Var x, std::span<const std::size_t> labels, std::string_view task);
/// ||B_k(x) - clean_features||_2 per row (NRDM).
Var feature_distortion(const TracedBackbone& backbone, Var x, const Tensor& clean_features,
                       std::optional<std::size_t> layer);
/// Population std of B_k(x) per row (DR).
Var dispersion(const TracedBackbone& backbone, Var x, std::optional<std::size_t> layer);
/// ||B(x) - target||_2 per row; with target = B'(x_clean) this is L_CF.
Var feature_distance(const TracedBackbone& backbone, Var x, const Tensor& target);
/// B(x) + beta * (B'(x) - B(x)).
Tensor cf_delta_target(const Tensor& clean_features, const Tensor& forgotten_features, double beta);
/// feature_distance(target) + gamma * sum_i lambda_i CE_i over every task of
/// `model`. Labels are only read when gamma > 0.
Var cf_delta(const TracedModel& model, Var x, const Tensor& target, double gamma, const TaskLabels* labels);

}  // namespace objectives

enum class Sense { maximize, minimize };

/// Objective over rows [begin, end) of the batch, evaluated at x_adv.
using BatchObjective = std::function<Var(Tape& tape, Var x_adv, std::size_t begin, std::size_t end)>;

/// Signed-gradient search with projection and best-iterate tracking. Runs
/// `steps` update steps of size `step` starting from `start` (x when empty).
AdversarialBatch signed_gradient_search(std::string attack, const Tensor& x, const BatchObjective& objective,
                                        Sense sense, const AttackConfig& cfg, std::size_t steps, double step,
                                        const Tensor& start = Tensor());

/// Single signed step of size eps on the task loss (oracle baseline).
AdversarialBatch fgsm(const MultiTaskModel& model, const Tensor& x, std::span<const std::size_t> labels,
                      std::string_view task, const AttackConfig& cfg);
/// Iterated signed ascent on the task loss (oracle baseline).
AdversarialBatch pgd(const MultiTaskModel& model, const Tensor& x, std::span<const std::size_t> labels,
                     std::string_view task, const AttackConfig& cfg);

/// PGD on a visible proxy task; `proxy_task == target_task` is rejected.
AdversarialBatch cross_task_attack(const MultiTaskModel& attacker_model, const Tensor& x,
                                   std::span<const std::size_t> proxy_labels, std::string_view proxy_task,
                                   std::string_view target_task, const AttackConfig& cfg);
/// One cross-task batch per task of `attacker_model` other than the target.
std::vector<AdversarialBatch> cross_task_aggregate(const MultiTaskModel& attacker_model, const Tensor& x,
                                                   const TaskLabels& labels, std::string_view target_task,
                                                   const AttackConfig& cfg);

AdversarialBatch nrdm(const Backbone& backbone, const Tensor& x, const AttackConfig& cfg);
AdversarialBatch dr(const Backbone& backbone, const Tensor& x, const AttackConfig& cfg);

/// Minimises ||B(x + delta) - B'(x)||_2.
AdversarialBatch cf_attack(const Backbone& backbone, const Backbone& forgotten, const Tensor& x,
                           const AttackConfig& cfg);
/// Minimises ||B(x + delta) - (B(x) + beta (B'(x) - B(x)))||_2 + gamma * L over
/// the tasks of `attacker_model`, whose backbone is B.
AdversarialBatch cf_delta_attack(const MultiTaskModel& attacker_model, const Backbone& forgotten,
                                 const Tensor& x, const TaskLabels* labels, const AttackConfig& cfg);

}  // namespace hiddentask
