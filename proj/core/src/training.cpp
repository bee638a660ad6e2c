#include "hiddentask/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "hiddentask/errors.hpp"

namespace hiddentask {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be >= 0");
  if (!(anchor_weight >= 0.0)) throw ContractError("anchor_weight must be >= 0");
}

void TrainHistory::write_csv(std::ostream& os) const {
  os << "epoch";
  for (const auto& t : tasks) os << ",loss_" << t;
  for (const auto& t : tasks) os << ",acc_" << t;
  os << '\n';
  for (const auto& e : epochs) {
    os << e.epoch;
    for (double l : e.task_loss) os << ',' << l;
    for (double a : e.task_accuracy) os << ',' << a;
    os << '\n';
  }
}

namespace {

struct Param {
  Tensor* value;
  Var var;
  Tensor velocity;
  bool decays;
};

void collect(std::vector<Param>& out, std::vector<Layer>& layers, const std::vector<BoundLayer>& bound) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({&layers[i].weight, bound[i].weight, Tensor(layers[i].weight.shape()), true});
    out.push_back({&layers[i].bias, bound[i].bias, Tensor(layers[i].bias.shape()), false});
  }
}

TrainHistory train_on(MultiTaskModel& model, const Tensor& inputs, const TaskLabels& labels,
                      const std::vector<std::string>& tasks, const TrainConfig& cfg, bool train_backbone,
                      const MultiTaskModel* reference = nullptr) {
  cfg.validate();
  const std::size_t n = inputs.dim(0);
  if (n == 0) throw ContractError("cannot train on an empty dataset");
  for (const auto& t : tasks) {
    model.task_index(t);
    const auto it = labels.find(t);
    if (it == labels.end() || it->second.size() != n) {
      throw ContractError("training data has no labels for task '" + t + "'");
    }
  }

  TrainHistory history;
  history.tasks = tasks;
  if (cfg.epochs == 0) return history;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Tensor> velocity;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord record;
    record.epoch = epoch;
    record.task_loss.assign(tasks.size(), 0.0);
    record.task_accuracy.assign(tasks.size(), 0.0);

    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const std::size_t b = rows.size();

      Tape tape;
      TracedModel traced(tape, model, train_backbone, !cfg.freeze_heads);
      const Tensor xb = gather_rows(inputs, rows);
      Var features = traced.backbone().features(tape.constant(xb));
      const bool anchored = reference != nullptr && cfg.anchor_weight > 0.0;
      const Tensor ref_features = anchored ? forward_backbone(*reference, xb) : Tensor();
      std::optional<Var> total;
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        std::vector<std::size_t> y(b);
        const auto& all = labels.find(tasks[t])->second;
        for (std::size_t i = 0; i < b; ++i) y[i] = all[rows[i]];
        Var logits = traced.head(tasks[t]).logits(features);
        Var ce = ops::softmax_cross_entropy(logits, y);
        const double weight = model.task(tasks[t]).weight;
        for (std::size_t i = 0; i < b; ++i) {
          record.task_loss[t] += weight * ce.value()[i];
          if (argmax(logits.value().row_span(i)) == y[i]) record.task_accuracy[t] += 1.0;
        }
        Var term = ops::scale(ops::sum(ce), weight / static_cast<double>(b));
        total = total ? ops::add(*total, term) : term;
        if (anchored) {
          const Tensor ref = forward_head(reference->head(tasks[t]), ref_features);
          Var drift = ops::sum(ops::square(ops::sub(logits, tape.constant(ref))));
          total = ops::add(*total, ops::scale(drift, cfg.anchor_weight / static_cast<double>(b)));
        }
      }

      std::vector<Param> params;
      if (train_backbone) collect(params, model.backbone().layers, traced.backbone().params());
      if (!cfg.freeze_heads) {
        for (const auto& name : model.task_names()) {
          collect(params, model.head(name).layers, traced.head(name).params());
        }
      }
      if (velocity.empty()) {
        for (const auto& p : params) velocity.emplace_back(p.value->shape());
      }

      const Gradients grads = tape.backward(*total);
      for (std::size_t k = 0; k < params.size(); ++k) {
        Param& p = params[k];
        const Tensor g = grads[p.var];
        Tensor& v = velocity[k];
        Tensor& w = *p.value;
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          w[i] -= cfg.learning_rate * v[i];
          if (p.decays) w[i] -= cfg.learning_rate * cfg.weight_decay * w[i];
        }
      }
    }
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      record.task_loss[t] /= static_cast<double>(n);
      record.task_accuracy[t] /= static_cast<double>(n);
      record.total_loss += record.task_loss[t];
    }
    history.epochs.push_back(std::move(record));
  }
  return history;
}

}  // namespace

TrainHistory train_multitask(MultiTaskModel& model, const DatasetView& data,
                             const std::vector<std::string>& tasks, const TrainConfig& cfg) {
  if (data.size() == 0) throw ContractError("cannot train on an empty dataset");
  TaskLabels labels;
  for (const auto& t : tasks) labels[t] = data.labels(t);
  return train_on(model, data.inputs(), labels, tasks, cfg, true);
}

ForgettingResult finetune_forget(const MultiTaskModel& model, const DatasetView& attacker_data,
                                 std::string_view target_task, const TrainConfig& cfg) {
  if (!cfg.freeze_heads) throw ContractError("finetune_forget requires freeze_heads=true");
  if (attacker_data.is_visible(target_task)) {
    throw ContractError("fine-tuning data exposes labels of the target task '" + std::string(target_task) + "'");
  }
  std::vector<std::string> tasks;
  for (const auto& t : attacker_data.visible_tasks()) {
    if (model.has_task(t)) tasks.push_back(t);
  }
  if (tasks.empty()) throw ContractError("no non-target task available for fine-tuning");
  MultiTaskModel copy = model;
  TaskLabels labels;
  for (const auto& t : tasks) labels[t] = attacker_data.labels(t);
  TrainHistory history = train_on(copy, attacker_data.inputs(), labels, tasks, cfg, true, &model);
  return {copy.backbone(), std::move(history)};
}

LabelOracle view_label_oracle(const DatasetView& view) {
  return [&view](const Tensor& inputs, std::string_view task) {
    if (inputs.dim(0) != view.size()) throw ContractError("label oracle queried with foreign inputs");
    return view.labels(task);
  };
}

LabelOracle model_output_oracle(const MultiTaskModel& model) {
  return [&model](const Tensor& inputs, std::string_view task) { return predict(model, inputs, task); };
}

std::map<std::string, Head> fit_surrogate_heads(const Backbone& backbone, const Tensor& inputs,
                                                const std::vector<TaskSpec>& tasks,
                                                const LabelOracle& oracle, const TrainConfig& cfg) {
  const Tensor features = forward_backbone(backbone, inputs);
  BackboneConfig identity;
  identity.kind = BackboneKind::identity;
  identity.input_dim = features.dim(1);
  identity.widths.clear();
  MultiTaskModel surrogate = MultiTaskModel::create(identity, HeadConfig{HeadKind::linear, 0}, tasks, cfg.seed);

  TaskLabels labels;
  std::vector<std::string> names;
  for (const auto& t : tasks) {
    labels[t.name] = oracle(inputs, t.name);
    names.push_back(t.name);
  }
  TrainConfig head_cfg = cfg;
  head_cfg.freeze_heads = false;
  train_on(surrogate, features, labels, names, head_cfg, false);

  std::map<std::string, Head> heads;
  for (const auto& t : tasks) heads.emplace(t.name, surrogate.head(t.name));
  return heads;
}

}  // namespace hiddentask
