#include "hiddentask/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include "hiddentask/checkpoint.hpp"
#include "hiddentask/errors.hpp"

namespace hiddentask {

std::string_view to_string(HeadAccess access) {
  return access == HeadAccess::white_box ? "white_box" : "black_box_surrogate";
}

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cross_task: return "cross_task";
    case AttackKind::nrdm: return "nrdm";
    case AttackKind::dr: return "dr";
    case AttackKind::cf: return "cf";
    case AttackKind::cf_delta: return "cf_delta";
  }
  return "unknown";
}

HeadAccess parse_head_access(std::string_view name) {
  if (name == "white_box" || name == "white-box") return HeadAccess::white_box;
  if (name == "black_box_surrogate" || name == "black-box-surrogate" || name == "black_box") {
    return HeadAccess::black_box_surrogate;
  }
  throw ContractError("unknown head access mode '" + std::string(name) + "'");
}

AttackKind parse_attack_kind(std::string_view name) {
  for (AttackKind k : kAllAttacks) {
    if (to_string(k) == name) return k;
  }
  if (name == "cf-delta") return AttackKind::cf_delta;
  if (name == "cross-task") return AttackKind::cross_task;
  throw ContractError("unknown attack '" + std::string(name) + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ContractError("epsilon must be > 0");
  if (!(step_size > 0.0)) throw ContractError("step_size must be > 0");
  if (iterations < 1) throw ContractError("iterations must be >= 1");
  if (!(beta >= 0.0)) throw ContractError("beta must be >= 0");
  if (!(gamma >= 0.0)) throw ContractError("gamma must be >= 0");
  if (parallel < 1) throw ContractError("parallel must be >= 1");
}

double AttackConfig::effective_step() const { return std::min(step_size, 2.0 * epsilon); }

nlohmann::json to_json(const AttackConfig& cfg) {
  nlohmann::json j;
  j["epsilon"] = cfg.epsilon;
  j["step_size"] = cfg.step_size;
  j["iterations"] = cfg.iterations;
  j["beta"] = cfg.beta;
  j["gamma"] = cfg.gamma;
  j["feature_layer"] = cfg.feature_layer ? nlohmann::json(*cfg.feature_layer) : nlohmann::json(nullptr);
  j["head_access"] = std::string(to_string(cfg.head_access));
  j["seed"] = cfg.seed;
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig cfg;
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.step_size = j.value("step_size", cfg.step_size);
  cfg.iterations = j.value("iterations", cfg.iterations);
  cfg.beta = j.value("beta", cfg.beta);
  cfg.gamma = j.value("gamma", cfg.gamma);
  if (j.contains("feature_layer") && !j["feature_layer"].is_null()) {
    cfg.feature_layer = j["feature_layer"].get<std::size_t>();
  }
  if (j.contains("head_access")) cfg.head_access = parse_head_access(j["head_access"].get<std::string>());
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

Tensor project_budget(const Tensor& x, const Tensor& candidate, double epsilon) {
  if (x.shape() != candidate.shape()) {
    throw DimensionError("project_budget: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(candidate.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double delta = std::clamp(candidate[i] - x[i], -epsilon, epsilon);
    out[i] = std::clamp(x[i] + delta, kPixelMin, kPixelMax);
  }
  return out;
}

namespace objectives {

Var cross_entropy(const TracedModel& model, Var x, std::span<const std::size_t> labels, std::string_view task) {
  return ops::softmax_cross_entropy(model.logits(x, task), labels);
}

Var feature_distortion(const TracedBackbone& backbone, Var x, const Tensor& clean_features,
                       std::optional<std::size_t> layer) {
  Var f = backbone.features(x, layer);
  return ops::row_l2_norm(ops::sub(f, x.tape().constant(clean_features)));
}

Var dispersion(const TracedBackbone& backbone, Var x, std::optional<std::size_t> layer) {
  return ops::row_std(backbone.features(x, layer));
}

Var feature_distance(const TracedBackbone& backbone, Var x, const Tensor& target) {
  Var f = backbone.features(x);
  return ops::row_l2_norm(ops::sub(f, x.tape().constant(target)));
}

Tensor cf_delta_target(const Tensor& clean_features, const Tensor& forgotten_features, double beta) {
  if (clean_features.shape() != forgotten_features.shape()) {
    throw DimensionError("cf_delta_target: shape mismatch " + shape_to_string(clean_features.shape()) + " vs " +
                         shape_to_string(forgotten_features.shape()));
  }
  Tensor target(clean_features.shape());
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = clean_features[i] + beta * (forgotten_features[i] - clean_features[i]);
  }
  return target;
}

Var cf_delta(const TracedModel& model, Var x, const Tensor& target, double gamma, const TaskLabels* labels) {
  Var f = model.backbone().features(x);
  Var distance = ops::row_l2_norm(ops::sub(f, x.tape().constant(target)));
  if (gamma == 0.0) return distance;
  if (labels == nullptr) throw ContractError("cf_delta with gamma > 0 needs non-target labels");
  const auto tasks = model.model().task_names();
  Var penalty = multitask_loss(model, f, *labels, tasks);
  return ops::add(distance, ops::scale(penalty, gamma));
}

}  // namespace objectives

namespace {

bool improves(double candidate, double incumbent, Sense sense) {
  if (std::isnan(candidate)) return false;
  return sense == Sense::maximize ? candidate > incumbent : candidate < incumbent;
}

struct ChunkState {
  std::vector<double> best_objective;
  std::vector<double> initial_objective;
};

void search_chunk(const Tensor& x_all, const Tensor& start_all, const BatchObjective& objective, Sense sense,
                  double epsilon, std::size_t steps, double step, std::size_t begin, std::size_t end,
                  Tensor& best_all, ChunkState& state) {
  const Tensor x = x_all.rows(begin, end);
  const std::size_t n = end - begin;
  const std::size_t width = x.row_width();

  auto evaluate = [&](const Tensor& point) {
    Tape tape;
    Var obj = objective(tape, tape.constant(point), begin, end);
    return std::vector<double>(obj.value().values().begin(), obj.value().values().end());
  };

  Tensor best = x;
  state.initial_objective = evaluate(x);
  state.best_objective = state.initial_objective;

  auto consider = [&](const Tensor& point, const std::vector<double>& values) {
    for (std::size_t r = 0; r < n; ++r) {
      if (improves(values[r], state.best_objective[r], sense)) {
        state.best_objective[r] = values[r];
        std::copy_n(point.data() + r * width, width, best.data() + r * width);
      }
    }
  };

  Tensor current = start_all.empty() ? x : start_all.rows(begin, end);
  const double direction = sense == Sense::maximize ? 1.0 : -1.0;
  for (std::size_t it = 0; it < steps; ++it) {
    Tape tape;
    Var xv = tape.leaf(current, true);
    Var obj = objective(tape, xv, begin, end);
    consider(current, std::vector<double>(obj.value().values().begin(), obj.value().values().end()));
    const Gradients grads = tape.backward(ops::sum(obj));
    const Tensor g = sign(grads[xv]);
    Tensor candidate = current;
    for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] += direction * step * g[i];
    current = project_budget(x, candidate, epsilon);
  }
  consider(current, evaluate(current));
  std::copy(best.values().begin(), best.values().end(), best_all.data() + begin * width);
}

}  // namespace

AdversarialBatch signed_gradient_search(std::string attack, const Tensor& x, const BatchObjective& objective,
                                        Sense sense, const AttackConfig& cfg, std::size_t steps, double step,
                                        const Tensor& start) {
  cfg.validate();
  if (x.rank() != 2) throw DimensionError("attacks expect [N, d] inputs, got " + shape_to_string(x.shape()));
  if (!start.empty() && start.shape() != x.shape()) {
    throw DimensionError("search start " + shape_to_string(start.shape()) + " does not match inputs " +
                         shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  AdversarialBatch batch;
  batch.attack = std::move(attack);
  batch.config = cfg;
  batch.originals = x;
  batch.perturbed = Tensor(x.shape());
  batch.objectives.resize(n);
  batch.initial_objectives.resize(n);
  if (n == 0) return batch;

  const std::size_t workers = std::min(cfg.parallel, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<ChunkState> states(workers);
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) return;
    try {
      search_chunk(x, start, objective, sense, cfg.epsilon, steps, step, begin, end, batch.perturbed, states[w]);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    std::copy(states[w].best_objective.begin(), states[w].best_objective.end(), batch.objectives.begin() + static_cast<std::ptrdiff_t>(begin));
    std::copy(states[w].initial_objective.begin(), states[w].initial_objective.end(),
              batch.initial_objectives.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return batch;
}

namespace {

std::vector<std::size_t> checked_labels(std::span<const std::size_t> labels, const Tensor& x) {
  if (labels.size() != x.dim(0)) {
    throw ContractError(std::to_string(labels.size()) + " labels for " + std::to_string(x.dim(0)) + " samples");
  }
  return {labels.begin(), labels.end()};
}

BatchObjective task_loss(const MultiTaskModel& model, std::vector<std::size_t> labels, std::string task) {
  return [&model, labels = std::move(labels), task = std::move(task)](Tape& tape, Var xa, std::size_t b, std::size_t e) {
    TracedModel traced(tape, model);
    return objectives::cross_entropy(traced, xa, std::span(labels).subspan(b, e - b), task);
  };
}

TaskLabels slice_labels(const TaskLabels& labels, std::size_t begin, std::size_t end) {
  TaskLabels out;
  for (const auto& [name, ys] : labels) {
    out[name] = std::vector<std::size_t>(ys.begin() + static_cast<std::ptrdiff_t>(begin),
                                         ys.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void require_compatible(const Backbone& backbone, const Backbone& forgotten) {
  bool same = backbone.config == forgotten.config && backbone.layers.size() == forgotten.layers.size();
  for (std::size_t i = 0; same && i < backbone.layers.size(); ++i) {
    same = backbone.layers[i].weight.shape() == forgotten.layers[i].weight.shape() &&
           backbone.layers[i].bias.shape() == forgotten.layers[i].bias.shape();
  }
  if (!same) throw ContractError("fine-tuned backbone is not shape-compatible with the attacked backbone");
}

}  // namespace

AdversarialBatch fgsm(const MultiTaskModel& model, const Tensor& x, std::span<const std::size_t> labels,
                      std::string_view task, const AttackConfig& cfg) {
  model.task_index(task);
  return signed_gradient_search("fgsm", x, task_loss(model, checked_labels(labels, x), std::string(task)),
                                Sense::maximize, cfg, 1, cfg.epsilon);
}

AdversarialBatch pgd(const MultiTaskModel& model, const Tensor& x, std::span<const std::size_t> labels,
                     std::string_view task, const AttackConfig& cfg) {
  model.task_index(task);
  return signed_gradient_search("pgd", x, task_loss(model, checked_labels(labels, x), std::string(task)),
                                Sense::maximize, cfg, cfg.iterations, cfg.effective_step());
}

AdversarialBatch cross_task_attack(const MultiTaskModel& attacker_model, const Tensor& x,
                                   std::span<const std::size_t> proxy_labels, std::string_view proxy_task,
                                   std::string_view target_task, const AttackConfig& cfg) {
  if (proxy_task == target_task) {
    throw ContractError("cross-task proxy must differ from the target task '" + std::string(target_task) + "'");
  }
  attacker_model.task_index(proxy_task);
  AdversarialBatch batch = signed_gradient_search(
      "cross_task", x, task_loss(attacker_model, checked_labels(proxy_labels, x), std::string(proxy_task)),
      Sense::maximize, cfg, cfg.iterations, cfg.effective_step());
  batch.proxy_task = std::string(proxy_task);
  return batch;
}

std::vector<AdversarialBatch> cross_task_aggregate(const MultiTaskModel& attacker_model, const Tensor& x,
                                                   const TaskLabels& labels, std::string_view target_task,
                                                   const AttackConfig& cfg) {
  std::vector<AdversarialBatch> batches;
  for (const auto& task : attacker_model.task_names()) {
    if (task == target_task) continue;
    const auto it = labels.find(task);
    if (it == labels.end()) throw ContractError("no labels for proxy task '" + task + "'");
    batches.push_back(cross_task_attack(attacker_model, x, it->second, task, target_task, cfg));
  }
  return batches;
}

AdversarialBatch nrdm(const Backbone& backbone, const Tensor& x, const AttackConfig& cfg) {
  cfg.validate();
  const Tensor clean = forward_backbone(backbone, x, cfg.feature_layer);
  // The distortion has a zero gradient at delta = 0, so the search starts
  // from a uniform random point of the budget.
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(-cfg.epsilon, cfg.epsilon);
  Tensor start = x;
  for (double& v : start.values()) v += uniform(rng);
  start = project_budget(x, start, cfg.epsilon);
  const auto layer = cfg.feature_layer;
  BatchObjective objective = [&backbone, &clean, layer](Tape& tape, Var xa, std::size_t b, std::size_t e) {
    TracedBackbone traced(tape, backbone);
    return objectives::feature_distortion(traced, xa, clean.rows(b, e), layer);
  };
  return signed_gradient_search("nrdm", x, objective, Sense::maximize, cfg, cfg.iterations, cfg.effective_step(),
                                start);
}

AdversarialBatch dr(const Backbone& backbone, const Tensor& x, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.feature_layer) backbone.config.layer_output_dim(*cfg.feature_layer);
  const auto layer = cfg.feature_layer;
  BatchObjective objective = [&backbone, layer](Tape& tape, Var xa, std::size_t, std::size_t) {
    TracedBackbone traced(tape, backbone);
    return objectives::dispersion(traced, xa, layer);
  };
  return signed_gradient_search("dr", x, objective, Sense::minimize, cfg, cfg.iterations, cfg.effective_step());
}

AdversarialBatch cf_attack(const Backbone& backbone, const Backbone& forgotten, const Tensor& x,
                           const AttackConfig& cfg) {
  cfg.validate();
  require_compatible(backbone, forgotten);
  const Tensor target = forward_backbone(forgotten, x);
  BatchObjective objective = [&backbone, &target](Tape& tape, Var xa, std::size_t b, std::size_t e) {
    TracedBackbone traced(tape, backbone);
    return objectives::feature_distance(traced, xa, target.rows(b, e));
  };
  return signed_gradient_search("cf", x, objective, Sense::minimize, cfg, cfg.iterations, cfg.effective_step());
}

AdversarialBatch cf_delta_attack(const MultiTaskModel& attacker_model, const Backbone& forgotten, const Tensor& x,
                                 const TaskLabels* labels, const AttackConfig& cfg) {
  cfg.validate();
  require_compatible(attacker_model.backbone(), forgotten);
  if (cfg.gamma > 0.0) {
    if (labels == nullptr) throw ContractError("cf_delta with gamma > 0 needs non-target labels");
    for (const auto& task : attacker_model.task_names()) {
      const auto it = labels->find(task);
      if (it == labels->end() || it->second.size() != x.dim(0)) {
        throw ContractError("cf_delta with gamma > 0 is missing labels for task '" + task + "'");
      }
    }
  }
  const Tensor target = objectives::cf_delta_target(forward_backbone(attacker_model.backbone(), x),
                                                    forward_backbone(forgotten, x), cfg.beta);
  const double gamma = cfg.gamma;
  BatchObjective objective = [&attacker_model, &target, labels, gamma](Tape& tape, Var xa, std::size_t b,
                                                                      std::size_t e) {
    TracedModel traced(tape, attacker_model);
    if (gamma == 0.0) return objectives::cf_delta(traced, xa, target.rows(b, e), 0.0, nullptr);
    const TaskLabels rows = slice_labels(*labels, b, e);
    return objectives::cf_delta(traced, xa, target.rows(b, e), gamma, &rows);
  };
  return signed_gradient_search("cf_delta", x, objective, Sense::minimize, cfg, cfg.iterations,
                                cfg.effective_step());
}

void save_adversarial_batch(const AdversarialBatch& batch, const std::filesystem::path& bin_path,
                            const std::filesystem::path& json_path) {
  {
    std::ofstream os(bin_path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + bin_path.string() + " for writing");
    BinaryWriter w(os);
    w.magic("MTAB");
    w.u32(1);
    w.tensor(batch.originals);
    w.tensor(batch.perturbed);
    w.tensor(Tensor({batch.objectives.size()}, batch.objectives));
    w.tensor(Tensor({batch.initial_objectives.size()}, batch.initial_objectives));
    if (!os) throw FormatError("failed writing " + bin_path.string());
  }
  nlohmann::json j;
  j["attack"] = batch.attack;
  j["proxy_task"] = batch.proxy_task;
  j["config"] = to_json(batch.config);
  j["num_samples"] = batch.size();
  j["objectives"] = batch.objectives;
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw FormatError("cannot open " + json_path.string() + " for writing");
  js << j.dump(2) << '\n';
}

AdversarialBatch load_adversarial_batch(const std::filesystem::path& bin_path,
                                        const std::filesystem::path& json_path) {
  std::ifstream js(json_path);
  if (!js) throw FormatError("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad batch sidecar " + json_path.string() + ": " + e.what());
  }
  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + bin_path.string());
  BinaryReader r(is);
  r.expect_magic("MTAB");
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError("unsupported batch version " + std::to_string(version));
  AdversarialBatch batch;
  batch.attack = j.at("attack").get<std::string>();
  batch.proxy_task = j.value("proxy_task", std::string());
  batch.config = attack_config_from_json(j.at("config"));
  batch.originals = r.tensor();
  batch.perturbed = r.tensor();
  const Tensor obj = r.tensor();
  const Tensor init = r.tensor();
  batch.objectives.assign(obj.values().begin(), obj.values().end());
  batch.initial_objectives.assign(init.values().begin(), init.values().end());
  if (batch.originals.shape() != batch.perturbed.shape() || batch.objectives.size() != batch.size()) {
    throw FormatError("adversarial batch blocks disagree");
  }
  return batch;
}

}  // namespace hiddentask
