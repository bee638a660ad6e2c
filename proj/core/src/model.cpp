#include "hiddentask/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "hiddentask/errors.hpp"

namespace hiddentask {

std::string_view to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::identity: return "identity";
    case BackboneKind::mlp: return "mlp";
    case BackboneKind::small_conv: return "small_conv";
  }
  return "unknown";
}

std::string_view to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::linear: return "linear";
    case HeadKind::mlp: return "mlp";
  }
  return "unknown";
}

BackboneKind parse_backbone_kind(std::string_view name) {
  if (name == "identity") return BackboneKind::identity;
  if (name == "mlp") return BackboneKind::mlp;
  if (name == "small_conv" || name == "small-conv") return BackboneKind::small_conv;
  throw ContractError("unknown backbone kind '" + std::string(name) + "'");
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "linear") return HeadKind::linear;
  if (name == "mlp") return HeadKind::mlp;
  throw ContractError("unknown head kind '" + std::string(name) + "'");
}

std::size_t BackboneConfig::layer_count() const {
  return kind == BackboneKind::identity ? 0 : widths.size();
}

std::size_t BackboneConfig::feature_dim() const {
  return kind == BackboneKind::identity ? input_dim : widths.back();
}

std::size_t BackboneConfig::layer_output_dim(std::size_t k) const {
  if (k < 1 || k > layer_count()) {
    throw LookupError("layer " + std::to_string(k) + " out of range [1," +
                      std::to_string(layer_count()) + "]");
  }
  if (kind == BackboneKind::small_conv && k == 1) {
    return widths[0] * (image.height / 2) * (image.width / 2);
  }
  return widths[k - 1];
}

void BackboneConfig::validate() const {
  if (input_dim == 0) throw ContractError("backbone input_dim must be positive");
  if (!(input_scale > 0.0) || !std::isfinite(input_shift)) {
    throw ContractError("backbone input normalisation must be finite with positive scale");
  }
  switch (kind) {
    case BackboneKind::identity:
      break;
    case BackboneKind::mlp:
      if (widths.empty()) throw ContractError("mlp backbone needs at least one layer");
      break;
    case BackboneKind::small_conv:
      if (widths.size() != 2) throw ContractError("small_conv backbone has exactly two conv layers");
      if (image.numel() != input_dim) {
        throw ContractError("small_conv image shape does not match input_dim");
      }
      if (image.height != image.width || image.height % 2 != 0 || image.height < 2) {
        throw ContractError("small_conv needs square images with even side");
      }
      break;
  }
  if (std::find(widths.begin(), widths.end(), 0) != widths.end() && kind != BackboneKind::identity) {
    throw ContractError("backbone layer widths must be positive");
  }
}

std::size_t Head::input_dim() const { return layers.front().weight.dim(0); }
std::size_t Head::num_classes() const { return layers.back().bias.dim(0); }

namespace {

Layer dense_layer(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  Layer layer{Tensor({in, out}), Tensor({out})};
  for (double& w : layer.weight.values()) w = dist(rng);
  return layer;
}

Layer conv_layer(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  constexpr std::size_t k = 3;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
  Layer layer{Tensor({out, in, k, k}), Tensor({out})};
  for (double& w : layer.weight.values()) w = dist(rng);
  return layer;
}

}  // namespace

Backbone make_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Backbone backbone{config, {}};
  switch (config.kind) {
    case BackboneKind::identity:
      break;
    case BackboneKind::mlp: {
      std::size_t in = config.input_dim;
      for (std::size_t w : config.widths) {
        backbone.layers.push_back(dense_layer(in, w, rng));
        in = w;
      }
      break;
    }
    case BackboneKind::small_conv:
      backbone.layers.push_back(conv_layer(config.image.channels, config.widths[0], rng));
      backbone.layers.push_back(conv_layer(config.widths[0], config.widths[1], rng));
      break;
  }
  return backbone;
}

Head make_head(const HeadConfig& config, std::size_t input_dim, std::size_t num_classes,
               std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("a task needs at least two classes");
  std::mt19937_64 rng(seed);
  Head head{config, {}};
  if (config.kind == HeadKind::linear) {
    head.layers.push_back(dense_layer(input_dim, num_classes, rng));
  } else {
    if (config.hidden_width == 0) throw ContractError("mlp head needs a hidden width");
    head.layers.push_back(dense_layer(input_dim, config.hidden_width, rng));
    head.layers.push_back(dense_layer(config.hidden_width, num_classes, rng));
  }
  return head;
}

MultiTaskModel::MultiTaskModel(Backbone backbone, std::vector<TaskSpec> tasks, std::vector<Head> heads)
    : backbone_(std::move(backbone)), tasks_(std::move(tasks)), heads_(std::move(heads)) {
  validate();
}

MultiTaskModel MultiTaskModel::create(const BackboneConfig& backbone, const HeadConfig& head,
                                      std::vector<TaskSpec> tasks, std::uint64_t seed) {
  Backbone b = make_backbone(backbone, seed);
  std::vector<Head> heads;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    heads.push_back(make_head(head, b.feature_dim(), tasks[i].num_classes, seed + 1000003ULL * (i + 1)));
  }
  return MultiTaskModel(std::move(b), std::move(tasks), std::move(heads));
}

void MultiTaskModel::validate() const {
  backbone_.config.validate();
  if (tasks_.size() != heads_.size()) throw ContractError("every task needs exactly one head");
  const std::size_t expected_layers = backbone_.config.layer_count();
  if (backbone_.layers.size() != expected_layers) {
    throw ContractError("backbone has " + std::to_string(backbone_.layers.size()) +
                        " layers, config expects " + std::to_string(expected_layers));
  }
  std::set<std::string, std::less<>> names;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    const TaskSpec& t = tasks_[i];
    if (t.name.empty()) throw ContractError("task names must be non-empty");
    if (!names.insert(t.name).second) throw ContractError("duplicate task name '" + t.name + "'");
    if (t.num_classes < 2) throw ContractError("task '" + t.name + "' needs at least two classes");
    if (!(t.weight >= 0.0)) throw ContractError("task '" + t.name + "' weight must be >= 0");
    if (heads_[i].layers.empty() || heads_[i].input_dim() != backbone_.feature_dim()) {
      throw DimensionError("head for '" + t.name + "' does not take backbone features of width " +
                           std::to_string(backbone_.feature_dim()));
    }
    if (heads_[i].num_classes() != t.num_classes) {
      throw DimensionError("head for '" + t.name + "' outputs " +
                           std::to_string(heads_[i].num_classes()) + " classes, task has " +
                           std::to_string(t.num_classes));
    }
  }
}

bool MultiTaskModel::has_task(std::string_view name) const {
  return std::any_of(tasks_.begin(), tasks_.end(), [&](const TaskSpec& t) { return t.name == name; });
}

std::size_t MultiTaskModel::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i].name == name) return i;
  }
  throw LookupError("unknown task '" + std::string(name) + "'");
}

std::vector<std::string> MultiTaskModel::task_names() const {
  std::vector<std::string> names;
  for (const auto& t : tasks_) names.push_back(t.name);
  return names;
}

MultiTaskModel MultiTaskModel::without_task(std::string_view name) const {
  const std::size_t drop = task_index(name);
  std::vector<TaskSpec> tasks;
  std::vector<Head> heads;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (i == drop) continue;
    tasks.push_back(tasks_[i]);
    heads.push_back(heads_[i]);
  }
  return MultiTaskModel(backbone_, std::move(tasks), std::move(heads));
}

MultiTaskModel MultiTaskModel::with_backbone(Backbone backbone) const {
  return MultiTaskModel(std::move(backbone), tasks_, heads_);
}

MultiTaskModel MultiTaskModel::with_heads(const std::map<std::string, Head>& heads) const {
  std::vector<Head> replaced = heads_;
  for (const auto& [name, head] : heads) replaced[task_index(name)] = head;
  return MultiTaskModel(backbone_, tasks_, std::move(replaced));
}

std::vector<BoundLayer> bind_layers(Tape& tape, const std::vector<Layer>& layers, bool trainable) {
  std::vector<BoundLayer> bound;
  bound.reserve(layers.size());
  for (const Layer& l : layers) bound.push_back({tape.leaf(l.weight, trainable), tape.leaf(l.bias, trainable)});
  return bound;
}

TracedBackbone::TracedBackbone(Tape& tape, const Backbone& backbone, bool trainable)
    : tape_(&tape), backbone_(&backbone), params_(bind_layers(tape, backbone.layers, trainable)) {}

Var TracedBackbone::features(Var x, std::optional<std::size_t> up_to_layer) const {
  const BackboneConfig& cfg = backbone_->config;
  const std::size_t last = up_to_layer.value_or(cfg.layer_count());
  if (up_to_layer && (*up_to_layer < 1 || *up_to_layer > cfg.layer_count())) {
    throw LookupError("feature layer " + std::to_string(*up_to_layer) + " out of range [1," +
                      std::to_string(cfg.layer_count()) + "]");
  }
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != cfg.input_dim) {
    throw DimensionError("backbone expects [N," + std::to_string(cfg.input_dim) + "] inputs, got " +
                         shape_to_string(xv.shape()));
  }
  Var h = x;
  if (cfg.input_shift != 0.0) h = ops::add_scalar(h, -cfg.input_shift);
  if (cfg.input_scale != 1.0) h = ops::scale(h, cfg.input_scale);

  const std::size_t n = xv.dim(0);
  switch (cfg.kind) {
    case BackboneKind::identity:
      return h;
    case BackboneKind::mlp:
      for (std::size_t k = 0; k < last; ++k) {
        h = ops::relu(ops::add_row_vector(ops::matmul(h, params_[k].weight), params_[k].bias));
      }
      return h;
    case BackboneKind::small_conv: {
      const ImageShape& img = cfg.image;
      h = ops::reshape(h, {n, img.channels, img.height, img.width});
      h = ops::avg_pool2d(ops::relu(ops::conv2d(h, params_[0].weight, params_[0].bias)), 2);
      if (last == 2) {
        h = ops::relu(ops::conv2d(h, params_[1].weight, params_[1].bias));
        h = ops::avg_pool2d(h, img.height / 2);
      }
      return ops::flatten_rows(h);
    }
  }
  return h;
}

TracedHead::TracedHead(Tape& tape, const Head& head, bool trainable)
    : tape_(&tape), head_(&head), params_(bind_layers(tape, head.layers, trainable)) {}

Var TracedHead::logits(Var features) const {
  const Tensor& f = features.value();
  if (f.rank() != 2 || f.dim(1) != head_->input_dim()) {
    throw DimensionError("head expects [N," + std::to_string(head_->input_dim()) + "] features, got " +
                         shape_to_string(f.shape()));
  }
  Var h = features;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    h = ops::add_row_vector(ops::matmul(h, params_[k].weight), params_[k].bias);
    if (k + 1 < params_.size()) h = ops::relu(h);
  }
  return h;
}

TracedModel::TracedModel(Tape& tape, const MultiTaskModel& model, bool train_backbone, bool train_heads)
    : model_(&model), backbone_(tape, model.backbone(), train_backbone) {
  heads_.reserve(model.heads().size());
  for (const Head& h : model.heads()) heads_.emplace_back(tape, h, train_heads);
}

const TracedHead& TracedModel::head(std::string_view task) const {
  return heads_[model_->task_index(task)];
}

Var TracedModel::logits(Var x, std::string_view task) const {
  return head(task).logits(backbone_.features(x));
}

Tensor forward_backbone(const Backbone& backbone, const Tensor& x, std::optional<std::size_t> up_to_layer) {
  Tape tape;
  TracedBackbone traced(tape, backbone);
  return traced.features(tape.constant(x), up_to_layer).value();
}

Tensor forward_backbone(const MultiTaskModel& model, const Tensor& x, std::optional<std::size_t> up_to_layer) {
  return forward_backbone(model.backbone(), x, up_to_layer);
}

Tensor forward_head(const Head& head, const Tensor& features) {
  Tape tape;
  TracedHead traced(tape, head);
  return traced.logits(tape.constant(features)).value();
}

Tensor forward_task(const MultiTaskModel& model, const Tensor& x, std::string_view task) {
  const Head& head = model.head(task);
  return forward_head(head, forward_backbone(model, x));
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw ContractError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - mx);
  return mx + std::log(total) - logits[label];
}

namespace {

const std::vector<std::size_t>& labels_for(const TaskLabels& labels, const std::string& task, std::size_t n) {
  const auto it = labels.find(task);
  if (it == labels.end()) throw ContractError("no labels supplied for task '" + task + "'");
  if (it->second.size() != n) {
    throw ContractError("task '" + task + "' has " + std::to_string(it->second.size()) +
                        " labels for " + std::to_string(n) + " samples");
  }
  return it->second;
}

}  // namespace

Var multitask_loss(const TracedModel& traced, Var features, const TaskLabels& labels,
                   std::span<const std::string> subset) {
  const std::size_t n = features.value().dim(0);
  std::optional<Var> total;
  for (const std::string& task : subset) {
    const auto& y = labels_for(labels, task, n);
    const double weight = traced.model().task(task).weight;
    Var term = ops::scale(ops::softmax_cross_entropy(traced.head(task).logits(features), y), weight);
    total = total ? ops::add(*total, term) : term;
  }
  if (!total) total = features.tape().constant(Tensor({n}));
  return *total;
}

double multitask_loss(const MultiTaskModel& model, const Tensor& x, const TaskLabels& labels,
                      std::span<const std::string> subset) {
  Tape tape;
  TracedModel traced(tape, model);
  Var per_sample = multitask_loss(traced, traced.backbone().features(tape.constant(x)), labels, subset);
  return ops::mean(per_sample).value().item();
}

std::size_t argmax(std::span<const double> logits) {
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<std::size_t> predict(const MultiTaskModel& model, const Tensor& x, std::string_view task) {
  const Tensor logits = forward_task(model, x, task);
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = argmax(logits.row_span(r));
  return out;
}

}  // namespace hiddentask
