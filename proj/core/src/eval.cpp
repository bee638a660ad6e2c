#include "hiddentask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

#include "hiddentask/errors.hpp"

namespace hiddentask {

double accuracy(const MultiTaskModel& model, const Tensor& inputs, std::span<const std::size_t> labels,
                std::string_view task) {
  if (inputs.rank() != 2 || inputs.dim(0) == 0) throw ContractError("accuracy of an empty sample set");
  if (labels.size() != inputs.dim(0)) throw ContractError("label count does not match sample count");
  const auto predictions = predict(model, inputs, task);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double accuracy(const MultiTaskModel& model, const LabeledDataset& dataset, std::string_view task) {
  if (dataset.size() == 0) throw ContractError("accuracy of an empty dataset");
  return accuracy(model, dataset.inputs(), dataset.labels(task), task);
}

double adv_accuracy(const MultiTaskModel& model, const AdversarialBatch& batch, std::span<const std::size_t> labels,
                    std::string_view task) {
  if (batch.size() == 0) throw ContractError("adversarial accuracy of an empty batch");
  return accuracy(model, batch.perturbed, labels, task);
}

const TaskOutcome& AttackReport::outcome(std::string_view task) const {
  for (const auto& t : tasks) {
    if (t.task == task) return t;
  }
  throw LookupError("report has no task '" + std::string(task) + "'");
}

double AttackReport::attack_performance() const { return outcome(target_task).delta(); }

std::vector<double> AttackReport::stealthiness_deltas() const {
  std::vector<double> deltas;
  for (const auto& t : tasks) {
    if (t.role == TaskRole::non_target) deltas.push_back(t.delta());
  }
  return deltas;
}

double AttackReport::worst_stealthiness_delta() const {
  const auto deltas = stealthiness_deltas();
  return deltas.empty() ? 0.0 : *std::max_element(deltas.begin(), deltas.end());
}

double AttackReport::mean_stealthiness_delta() const {
  const auto deltas = stealthiness_deltas();
  if (deltas.empty()) return 0.0;
  return std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
}

void AttackReport::write_csv(std::ostream& os) const {
  os << "task,role,clean_acc,adv_acc,delta\n";
  const auto flags = os.flags();
  const auto precision = os.precision();
  os << std::fixed << std::setprecision(6);
  for (const auto& t : tasks) {
    os << t.task << ',' << (t.role == TaskRole::target ? "target" : "non-target") << ',' << t.clean_accuracy << ','
       << t.adv_accuracy << ',' << t.delta() << '\n';
  }
  os.flags(flags);
  os.precision(precision);
}

nlohmann::json AttackReport::to_json() const {
  nlohmann::json j;
  j["attack"] = attack;
  j["target_task"] = target_task;
  j["seed"] = seed;
  j["config"] = config;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    j["tasks"].push_back({{"task", t.task},
                          {"role", t.role == TaskRole::target ? "target" : "non-target"},
                          {"clean_accuracy", t.clean_accuracy},
                          {"adv_accuracy", t.adv_accuracy},
                          {"delta", t.delta()}});
  }
  j["attack_performance"] = attack_performance();
  j["stealthiness_deltas"] = stealthiness_deltas();
  j["table_cell"] = table_cell();
  return j;
}

std::string AttackReport::table_cell() const {
  double non_target = 0.0;
  std::size_t count = 0;
  for (const auto& t : tasks) {
    if (t.role == TaskRole::non_target) {
      non_target += t.adv_accuracy;
      ++count;
    }
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * outcome(target_task).adv_accuracy << '/'
     << (count ? 100.0 * non_target / static_cast<double>(count) : 0.0);
  return os.str();
}

AttackReport average_reports(std::span<const AttackReport> reports) {
  if (reports.empty()) throw ContractError("cannot average zero reports");
  AttackReport mean = reports.front();
  for (auto& t : mean.tasks) t.clean_accuracy = t.adv_accuracy = 0.0;
  for (const auto& r : reports) {
    if (r.tasks.size() != mean.tasks.size()) throw ContractError("averaged reports cover different tasks");
    for (std::size_t i = 0; i < r.tasks.size(); ++i) {
      if (r.tasks[i].task != mean.tasks[i].task) throw ContractError("averaged reports cover different tasks");
      mean.tasks[i].clean_accuracy += r.tasks[i].clean_accuracy;
      mean.tasks[i].adv_accuracy += r.tasks[i].adv_accuracy;
    }
  }
  const auto n = static_cast<double>(reports.size());
  for (auto& t : mean.tasks) {
    t.clean_accuracy /= n;
    t.adv_accuracy /= n;
  }
  return mean;
}

AttackReport score_batch(const MultiTaskModel& victim, const AdversarialBatch& batch, const LabeledDataset& eval,
                         std::string_view target_task) {
  if (batch.size() != eval.size()) throw ContractError("batch does not match the evaluation set");
  victim.task_index(target_task);
  AttackReport report;
  report.attack = batch.attack;
  report.target_task = std::string(target_task);
  report.seed = batch.config.seed;
  report.config = to_json(batch.config);
  for (const auto& task : victim.tasks()) {
    TaskOutcome o;
    o.task = task.name;
    o.role = task.name == target_task ? TaskRole::target : TaskRole::non_target;
    o.clean_accuracy = accuracy(victim, batch.originals, eval.labels(task.name), task.name);
    o.adv_accuracy = adv_accuracy(victim, batch, eval.labels(task.name), task.name);
    report.tasks.push_back(o);
  }
  return report;
}

AttackRun run_attack_report(const AttackSetup& setup, const AttackSpec& spec, const LabeledDataset& eval) {
  if (!setup.victim || !setup.attacker_model) throw ContractError("attack setup needs victim and attacker models");
  if (setup.attacker_model->has_task(setup.target_task)) {
    throw ContractError("attacker model must not hold the target head");
  }
  const Tensor& x = eval.inputs();
  const DatasetView visible = attacker_view(eval, setup.target_task);
  const TaskLabels non_target = visible.visible_labels();
  const AttackConfig& cfg = spec.config;
  auto need_forgotten = [&]() -> const Backbone& {
    if (!setup.forgotten) throw ContractError(std::string(to_string(spec.kind)) + " needs a fine-tuned backbone");
    return *setup.forgotten;
  };

  AttackRun run;
  switch (spec.kind) {
    case AttackKind::fgsm:
      run.batches.push_back(fgsm(*setup.victim, x, eval.labels(setup.target_task), setup.target_task, cfg));
      break;
    case AttackKind::pgd:
      run.batches.push_back(pgd(*setup.victim, x, eval.labels(setup.target_task), setup.target_task, cfg));
      break;
    case AttackKind::cross_task:
      run.batches = cross_task_aggregate(*setup.attacker_model, x, non_target, setup.target_task, cfg);
      break;
    case AttackKind::nrdm:
      run.batches.push_back(nrdm(setup.attacker_model->backbone(), x, cfg));
      break;
    case AttackKind::dr:
      run.batches.push_back(dr(setup.attacker_model->backbone(), x, cfg));
      break;
    case AttackKind::cf:
      run.batches.push_back(cf_attack(setup.attacker_model->backbone(), need_forgotten(), x, cfg));
      break;
    case AttackKind::cf_delta:
      run.batches.push_back(cf_delta_attack(*setup.attacker_model, need_forgotten(), x, &non_target, cfg));
      break;
  }
  std::vector<AttackReport> reports;
  for (const auto& b : run.batches) reports.push_back(score_batch(*setup.victim, b, eval, setup.target_task));
  if (reports.empty()) throw ContractError("attack produced no batches");
  run.report = reports.size() == 1 ? reports.front() : average_reports(reports);
  run.report.attack = std::string(to_string(spec.kind));
  return run;
}

double InnerProductSeries::relative_change() const {
  if (separation_before == 0.0) return separation_after == 0.0 ? 0.0 : INFINITY;
  return (separation_after - separation_before) / separation_before;
}

void InnerProductSeries::write_csv(std::ostream& os) const {
  os << "sample,label,before,after\n";
  const auto flags = os.flags();
  const auto precision = os.precision();
  os << std::setprecision(17);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    os << i << ',' << labels[i] << ',' << before[i] << ',' << after[i] << '\n';
  }
  os.flags(flags);
  os.precision(precision);
}

const InnerProductSeries& ForgettingDiagnostic::for_task(std::string_view task) const {
  for (const auto& s : series) {
    if (s.evaluated_task == task) return s;
  }
  throw LookupError("diagnostic has no task '" + std::string(task) + "'");
}

double separation_statistic(std::span<const double> values, std::span<const std::size_t> labels) {
  if (values.size() != labels.size()) throw ContractError("values and labels differ in length");
  double sum[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] > 1) continue;
    sum[labels[i]] += values[i];
    ++count[labels[i]];
  }
  if (count[0] == 0 || count[1] == 0) return 0.0;
  return std::abs(sum[1] / static_cast<double>(count[1]) - sum[0] / static_cast<double>(count[0]));
}

ForgettingDiagnostic forgetting_diagnostic(const MultiTaskModel& model, const Backbone& forgotten,
                                           const LabeledDataset& dataset, std::string_view target_task) {
  model.task_index(target_task);
  for (const auto& h : model.heads()) {
    if (h.config.kind != HeadKind::linear) {
      throw UnsupportedError("the forgetting diagnostic is defined for linear heads only");
    }
  }
  const Tensor before = forward_backbone(model.backbone(), dataset.inputs());
  const Tensor after = forward_backbone(forgotten, dataset.inputs());
  if (before.shape() != after.shape()) throw ContractError("backbones produce different feature shapes");

  ForgettingDiagnostic diag;
  diag.target_task = std::string(target_task);
  for (const auto& task : model.tasks()) {
    if (task.num_classes != 2) {
      throw UnsupportedError("the forgetting diagnostic needs binary tasks; '" + task.name + "' has " +
                             std::to_string(task.num_classes) + " classes");
    }
    const Tensor& w = model.head(task.name).layers.front().weight;  // [feature_dim, 2]
    InnerProductSeries s;
    s.evaluated_task = task.name;
    s.labels = dataset.labels(task.name);
    s.before.resize(dataset.size());
    s.after.resize(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      double b = 0.0, a = 0.0;
      for (std::size_t f = 0; f < before.dim(1); ++f) {
        b += w.at(f, 1) * before.at(i, f);
        a += w.at(f, 1) * after.at(i, f);
      }
      s.before[i] = b;
      s.after[i] = a;
    }
    s.separation_before = separation_statistic(s.before, s.labels);
    s.separation_after = separation_statistic(s.after, s.labels);
    diag.series.push_back(std::move(s));
  }
  return diag;
}

std::optional<std::size_t> select_hyperparams(std::span<const SweepPoint> sweep, double threshold) {
  if (sweep.empty()) throw ContractError("hyperparameter sweep is empty");
  std::optional<std::size_t> chosen;
  auto key = [](const AttackParams& p) { return std::tuple(p.beta, p.finetune_epochs, p.gamma); };
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    bool feasible = true;
    for (const auto& t : sweep[i].report.tasks) {
      if (t.role != TaskRole::non_target) continue;
      if (!(t.delta() <= threshold)) feasible = false;
    }
    if (!feasible) continue;
    if (!chosen || key(sweep[i].params) > key(sweep[*chosen].params)) chosen = i;
  }
  return chosen;
}

}  // namespace hiddentask
