#include "hiddentask/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "hiddentask/checkpoint.hpp"
#include "hiddentask/errors.hpp"

namespace hiddentask {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr double kPixelCentre = 127.5;

std::vector<double> correlation_or_identity(const SyntheticConfig& cfg) {
  if (!cfg.correlation.empty()) return cfg.correlation;
  std::vector<double> id(cfg.num_latent * cfg.num_latent, 0.0);
  for (std::size_t i = 0; i < cfg.num_latent; ++i) id[i * cfg.num_latent + i] = 1.0;
  return id;
}

/// Lower-triangular L with L L^T = a; throws on a non positive-definite matrix.
std::vector<double> cholesky(const std::vector<double>& a, std::size_t m) {
  std::vector<double> l(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * m + k] * l[j * m + k];
      if (i == j) {
        if (!(s > 1e-12)) throw ContractError("latent correlation matrix is not positive definite");
        l[i * m + i] = std::sqrt(s);
      } else {
        l[i * m + j] = s / l[j * m + j];
      }
    }
  }
  return l;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (num_samples == 0) throw ContractError("synthetic dataset needs at least one sample");
  if (num_latent == 0) throw ContractError("synthetic dataset needs at least one latent factor");
  if (image && image->numel() != input_dim) throw ContractError("image shape does not match input_dim");
  if (input_dim == 0) throw ContractError("input_dim must be positive");
  if (!(noise_std >= 0.0)) throw ContractError("noise_std must be >= 0");
  if (!(sigmas_to_edge > 0.0)) throw ContractError("sigmas_to_edge must be > 0");
  if (tasks.empty()) throw ContractError("synthetic dataset needs at least one task");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    if (!names.insert(t.name).second) throw ContractError("duplicate task name '" + t.name + "'");
    if (t.factors.empty()) throw ContractError("task '" + t.name + "' reads no latent factor");
    for (std::size_t f : t.factors) {
      if (f >= num_latent) throw ContractError("task '" + t.name + "' reads a missing latent factor");
    }
    if (!t.loadings.empty() && t.loadings.size() != t.factors.size()) {
      throw ContractError("task '" + t.name + "' loadings do not match its factors");
    }
    if (t.thresholds.empty() || !std::is_sorted(t.thresholds.begin(), t.thresholds.end())) {
      throw ContractError("task '" + t.name + "' thresholds must be non-empty and ascending");
    }
  }
  const auto corr = correlation_or_identity(*this);
  if (corr.size() != num_latent * num_latent) throw ContractError("correlation matrix has the wrong size");
  for (std::size_t i = 0; i < num_latent; ++i) {
    if (corr[i * num_latent + i] != 1.0) throw ContractError("correlation matrix needs a unit diagonal");
    for (std::size_t j = 0; j < i; ++j) {
      if (corr[i * num_latent + j] != corr[j * num_latent + i]) {
        throw ContractError("correlation matrix must be symmetric");
      }
    }
  }
  cholesky(corr, num_latent);
}

std::vector<TaskSpec> SyntheticConfig::task_specs() const {
  std::vector<TaskSpec> specs;
  for (const auto& t : tasks) specs.push_back({t.name, t.num_classes(), 1.0});
  return specs;
}

SyntheticConfig SyntheticConfig::benchmark(std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.num_samples = 12000;
  cfg.input_dim = 32;
  cfg.num_latent = 4;
  cfg.noise_std = 0.1;
  cfg.seed = seed;
  cfg.tasks = {{"A", {0}, {}, {0.0}}, {"B", {1}, {}, {0.0}}, {"C", {2}, {}, {0.0}}};
  cfg.correlation = {1.0, 0.6, 0.0, 0.0,
                     0.6, 1.0, 0.0, 0.0,
                     0.0, 0.0, 1.0, 0.0,
                     0.0, 0.0, 0.0, 1.0};
  return cfg;
}

nlohmann::json to_json(const SyntheticConfig& cfg) {
  nlohmann::json j;
  j["num_samples"] = cfg.num_samples;
  j["input_dim"] = cfg.input_dim;
  if (cfg.image) j["image"] = {cfg.image->channels, cfg.image->height, cfg.image->width};
  j["num_latent"] = cfg.num_latent;
  j["noise_std"] = cfg.noise_std;
  j["sigmas_to_edge"] = cfg.sigmas_to_edge;
  j["seed"] = cfg.seed;
  j["correlation"] = cfg.correlation;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : cfg.tasks) {
    j["tasks"].push_back({{"name", t.name}, {"factors", t.factors}, {"loadings", t.loadings},
                          {"thresholds", t.thresholds}});
  }
  return j;
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig cfg;
  cfg.num_samples = j.value("num_samples", cfg.num_samples);
  cfg.input_dim = j.value("input_dim", cfg.input_dim);
  if (j.contains("image")) {
    const auto& im = j.at("image");
    cfg.image = ImageShape{im.at(0).get<std::size_t>(), im.at(1).get<std::size_t>(), im.at(2).get<std::size_t>()};
  }
  cfg.num_latent = j.value("num_latent", cfg.num_latent);
  cfg.noise_std = j.value("noise_std", cfg.noise_std);
  cfg.sigmas_to_edge = j.value("sigmas_to_edge", cfg.sigmas_to_edge);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.correlation = j.value("correlation", std::vector<double>{});
  for (const auto& t : j.at("tasks")) {
    SyntheticTask task;
    task.name = t.at("name").get<std::string>();
    task.factors = t.at("factors").get<std::vector<std::size_t>>();
    task.loadings = t.value("loadings", std::vector<double>{});
    task.thresholds = t.value("thresholds", std::vector<double>{0.0});
    cfg.tasks.push_back(std::move(task));
  }
  return cfg;
}

LabeledDataset::LabeledDataset(Tensor inputs, std::vector<TaskSpec> tasks, TaskLabels labels,
                               std::optional<ImageShape> image)
    : inputs_(std::move(inputs)), tasks_(std::move(tasks)), labels_(std::move(labels)), image_(image) {
  if (inputs_.rank() != 2) throw DimensionError("dataset inputs must be [N, d], got " + shape_to_string(inputs_.shape()));
  for (double v : inputs_.values()) {
    if (!(v >= 0.0 && v <= 255.0)) throw ContractError("dataset inputs must lie in [0, 255]");
  }
  if (labels_.size() != tasks_.size()) throw ContractError("every task needs a label column");
  for (const TaskSpec& t : tasks_) {
    const auto it = labels_.find(t.name);
    if (it == labels_.end()) throw ContractError("missing labels for task '" + t.name + "'");
    if (it->second.size() != inputs_.dim(0)) throw ContractError("label count mismatch for task '" + t.name + "'");
    for (std::size_t y : it->second) {
      if (y >= t.num_classes) throw ContractError("label out of range for task '" + t.name + "'");
    }
  }
}

bool LabeledDataset::has_task(std::string_view name) const { return labels_.find(name) != labels_.end(); }

const std::vector<std::size_t>& LabeledDataset::labels(std::string_view task) const {
  const auto it = labels_.find(task);
  if (it == labels_.end()) throw LookupError("unknown task '" + std::string(task) + "'");
  return it->second;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  TaskLabels labels;
  for (const auto& [name, ys] : labels_) {
    auto& out = labels[name];
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(ys.at(i));
  }
  return LabeledDataset(gather_rows(inputs_, indices), tasks_, std::move(labels), image_);
}

LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.num_samples, d = cfg.input_dim, m = cfg.num_latent;
  const auto corr = correlation_or_identity(cfg);
  const auto chol = cholesky(corr, m);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Fixed random embedding, latent m -> input d.
  std::vector<double> embed(m * d);
  for (double& e : embed) e = normal(rng);
  std::vector<double> column_sigma(d);
  for (std::size_t j = 0; j < d; ++j) {
    double var = cfg.noise_std * cfg.noise_std;
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) var += embed[a * d + j] * corr[a * m + b] * embed[b * d + j];
    column_sigma[j] = std::sqrt(var);
  }

  Tensor inputs({n, d});
  TaskLabels labels;
  for (const auto& t : cfg.tasks) labels[t.name].resize(n);

  std::vector<double> g(m), z(m);
  for (std::size_t s = 0; s < n; ++s) {
    for (double& v : g) v = normal(rng);
    for (std::size_t i = 0; i < m; ++i) {
      z[i] = 0.0;
      for (std::size_t k = 0; k <= i; ++k) z[i] += chol[i * m + k] * g[k];
    }
    for (std::size_t j = 0; j < d; ++j) {
      double raw = cfg.noise_std * normal(rng);
      for (std::size_t a = 0; a < m; ++a) raw += z[a] * embed[a * d + j];
      const double pixel = kPixelCentre + (kPixelCentre / cfg.sigmas_to_edge) * raw / column_sigma[j];
      inputs.at(s, j) = std::clamp(pixel, 0.0, 255.0);
    }
    for (const auto& t : cfg.tasks) {
      double score = 0.0;
      for (std::size_t f = 0; f < t.factors.size(); ++f) {
        score += (t.loadings.empty() ? 1.0 : t.loadings[f]) * z[t.factors[f]];
      }
      labels[t.name][s] = static_cast<std::size_t>(
          std::count_if(t.thresholds.begin(), t.thresholds.end(), [score](double th) { return score > th; }));
    }
  }
  return LabeledDataset(std::move(inputs), cfg.task_specs(), std::move(labels), cfg.image);
}

DatasetView::DatasetView(const LabeledDataset& dataset, std::vector<std::string> visible_tasks)
    : dataset_(&dataset), visible_(std::move(visible_tasks)) {
  for (const auto& t : visible_) {
    if (!dataset.has_task(t)) throw LookupError("unknown task '" + t + "'");
  }
}

bool DatasetView::is_visible(std::string_view task) const {
  return std::find(visible_.begin(), visible_.end(), task) != visible_.end();
}

const std::vector<std::size_t>& DatasetView::labels(std::string_view task) const {
  if (!dataset_->has_task(task)) throw LookupError("unknown task '" + std::string(task) + "'");
  if (!is_visible(task)) throw AccessError("labels of task '" + std::string(task) + "' are hidden in this view");
  return dataset_->labels(task);
}

TaskLabels DatasetView::gather_labels(std::span<const std::size_t> rows) const {
  TaskLabels out;
  for (const auto& t : visible_) {
    const auto& ys = dataset_->labels(t);
    auto& dst = out[t];
    dst.reserve(rows.size());
    for (std::size_t r : rows) dst.push_back(ys.at(r));
  }
  return out;
}

TaskLabels DatasetView::visible_labels() const {
  TaskLabels out;
  for (const auto& t : visible_) out[t] = dataset_->labels(t);
  return out;
}

DatasetView full_view(const LabeledDataset& dataset) {
  std::vector<std::string> names;
  for (const auto& t : dataset.tasks()) names.push_back(t.name);
  return DatasetView(dataset, std::move(names));
}

DatasetView attacker_view(const LabeledDataset& dataset, std::string_view target_task) {
  if (!dataset.has_task(target_task)) throw LookupError("unknown task '" + std::string(target_task) + "'");
  std::vector<std::string> names;
  for (const auto& t : dataset.tasks()) {
    if (t.name != target_task) names.push_back(t.name);
  }
  return DatasetView(dataset, std::move(names));
}

DatasetSplit split_dataset(const LabeledDataset& dataset, double owner_fraction, std::uint64_t seed) {
  if (!(owner_fraction > 0.0 && owner_fraction < 1.0)) {
    throw ContractError("owner_fraction must lie in (0, 1), got " + std::to_string(owner_fraction));
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto owner_count = static_cast<std::size_t>(std::llround(owner_fraction * static_cast<double>(dataset.size())));
  std::vector<std::size_t> owner(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(owner_count));
  std::vector<std::size_t> attacker(order.begin() + static_cast<std::ptrdiff_t>(owner_count), order.end());
  std::sort(owner.begin(), owner.end());
  std::sort(attacker.begin(), attacker.end());
  return DatasetSplit{dataset.subset(owner), dataset.subset(attacker), std::move(owner), std::move(attacker)};
}

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& bin_path,
                  const std::filesystem::path& json_path, const nlohmann::json& provenance) {
  {
    std::ofstream os(bin_path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + bin_path.string() + " for writing");
    BinaryWriter w(os);
    w.magic("MTDS");
    w.u32(kDatasetVersion);
    w.tensor(dataset.inputs());
    Tensor labels({dataset.size(), dataset.tasks().size()});
    for (std::size_t t = 0; t < dataset.tasks().size(); ++t) {
      const auto& ys = dataset.labels(dataset.tasks()[t].name);
      for (std::size_t i = 0; i < ys.size(); ++i) labels.at(i, t) = static_cast<double>(ys[i]);
    }
    w.tensor(labels);
    if (!os) throw FormatError("failed writing " + bin_path.string());
  }
  nlohmann::json header;
  header["format"] = "MTDS";
  header["version"] = kDatasetVersion;
  header["num_samples"] = dataset.size();
  header["input_dim"] = dataset.input_dim();
  if (dataset.image()) header["image"] = {dataset.image()->channels, dataset.image()->height, dataset.image()->width};
  header["tasks"] = nlohmann::json::array();
  for (const auto& t : dataset.tasks()) {
    header["tasks"].push_back({{"name", t.name}, {"num_classes", t.num_classes}, {"weight", t.weight}});
  }
  if (!provenance.is_null()) header["provenance"] = provenance;
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw FormatError("cannot open " + json_path.string() + " for writing");
  js << header.dump(2) << '\n';
}

LabeledDataset load_dataset(const std::filesystem::path& bin_path, const std::filesystem::path& json_path) {
  std::ifstream js(json_path);
  if (!js) throw FormatError("cannot open " + json_path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset header " + json_path.string() + ": " + e.what());
  }
  std::vector<TaskSpec> tasks;
  for (const auto& t : header.at("tasks")) {
    tasks.push_back({t.at("name").get<std::string>(), t.at("num_classes").get<std::size_t>(), t.value("weight", 1.0)});
  }
  std::optional<ImageShape> image;
  if (header.contains("image")) {
    const auto& im = header["image"];
    image = ImageShape{im.at(0).get<std::size_t>(), im.at(1).get<std::size_t>(), im.at(2).get<std::size_t>()};
  }

  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + bin_path.string());
  BinaryReader r(is);
  r.expect_magic("MTDS");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  Tensor inputs = r.tensor();
  Tensor label_block = r.tensor();
  if (label_block.rank() != 2 || inputs.rank() != 2 || label_block.dim(0) != inputs.dim(0) ||
      label_block.dim(1) != tasks.size()) {
    throw FormatError("dataset blocks disagree with the header");
  }
  TaskLabels labels;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    auto& ys = labels[tasks[t].name];
    ys.resize(inputs.dim(0));
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = static_cast<std::size_t>(label_block.at(i, t));
  }
  return LabeledDataset(std::move(inputs), std::move(tasks), std::move(labels), image);
}

}  // namespace hiddentask
