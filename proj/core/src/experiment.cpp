#include "hiddentask/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "hiddentask/checkpoint.hpp"
#include "hiddentask/errors.hpp"

namespace hiddentask {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::finetune_epochs: return "finetune_epochs";
    case SweepAxis::beta: return "beta";
    case SweepAxis::gamma: return "gamma";
  }
  return "?";
}

SweepAxis parse_sweep_axis(std::string_view name) {
  for (SweepAxis a : {SweepAxis::finetune_epochs, SweepAxis::beta, SweepAxis::gamma}) {
    if (to_string(a) == name) return a;
  }
  throw LookupError("unknown sweep axis '" + std::string(name) + "'");
}

StageSeeds derive_seeds(std::uint64_t seed) {
  return {seed, seed + 1, seed + 2, seed + 3, seed + 4, seed + 5, seed + 6};
}

json to_json(const StageSeeds& s) {
  return {{"data", s.data},         {"split", s.split},         {"model", s.model},  {"train", s.train},
          {"finetune", s.finetune}, {"surrogate", s.surrogate}, {"attack", s.attack}};
}

namespace {

// ---------------------------------------------------------------------------
// Strict JSON section reader

std::size_t line_of(std::string_view text, const std::string& pointer) {
  if (text.empty()) return 0;
  std::size_t pos = 0;
  std::size_t start = 1;
  while (start <= pointer.size()) {
    const std::size_t end = std::min(pointer.find('/', start), pointer.size());
    const std::string key = "\"" + pointer.substr(start, end - start) + "\"";
    const std::size_t hit = text.find(key, pos);
    if (hit == std::string_view::npos) break;
    pos = hit;
    start = end + 1;
  }
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

struct Source {
  std::string origin;
  std::string_view text;

  [[noreturn]] void fail(const std::string& pointer, const std::string& message) const {
    std::string where = origin;
    if (const std::size_t line = line_of(text, pointer); line > 0) where += ":" + std::to_string(line);
    throw ConfigError(where + ": " + (pointer.empty() ? "/" : pointer) + ": " + message);
  }
};

class Section {
 public:
  Section(const Source& src, const json& j, std::string pointer) : src_(&src), j_(&j), pointer_(std::move(pointer)) {
    if (!j.is_object()) src.fail(pointer_, "expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, v] : j_->items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) fail(k, "unknown key");
    }
  }
  bool has(std::string_view key) const { return j_->contains(key); }

  template <typename T>
  T get(std::string_view key, T fallback) const {
    const auto it = j_->find(key);
    if (it == j_->end()) return fallback;
    try {
      return it->template get<T>();
    } catch (const json::exception&) {
      fail(key, "has the wrong type");
    }
  }
  template <typename T>
  T require(std::string_view key) const {
    if (!has(key)) fail(key, "is required");
    return get<T>(key, T{});
  }
  Section sub(std::string_view key) const { return Section(*src_, j_->at(key), path(key)); }
  Section item(std::string_view key, std::size_t i) const {
    return Section(*src_, j_->at(key).at(i), path(key) + "/" + std::to_string(i));
  }
  const json& raw(std::string_view key) const { return j_->at(key); }

  [[noreturn]] void fail(std::string_view key, const std::string& message) const { src_->fail(path(key), message); }
  template <typename F>
  auto guard(std::string_view key, F&& f) const {
    try {
      return f();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      fail(key, e.what());
    }
  }

 private:
  std::string path(std::string_view key) const { return pointer_ + "/" + std::string(key); }

  const Source* src_;
  const json* j_;
  std::string pointer_;
};

SyntheticConfig read_synthetic(const Section& s) {
  s.allow({"preset", "num_samples", "input_dim", "image", "num_latent", "noise_std", "sigmas_to_edge", "correlation",
           "tasks"});
  SyntheticConfig cfg;
  if (s.has("preset")) {
    const auto preset = s.get<std::string>("preset", "");
    if (preset != "benchmark") s.fail("preset", "unknown preset '" + preset + "'");
    cfg = SyntheticConfig::benchmark();
  }
  cfg.num_samples = s.get("num_samples", cfg.num_samples);
  cfg.input_dim = s.get("input_dim", cfg.input_dim);
  cfg.num_latent = s.get("num_latent", cfg.num_latent);
  cfg.noise_std = s.get("noise_std", cfg.noise_std);
  cfg.sigmas_to_edge = s.get("sigmas_to_edge", cfg.sigmas_to_edge);
  cfg.correlation = s.get("correlation", cfg.correlation);
  if (s.has("image")) {
    const auto im = s.get<std::vector<std::size_t>>("image", {});
    if (im.size() != 3) s.fail("image", "expected [channels, height, width]");
    cfg.image = ImageShape{im[0], im[1], im[2]};
  }
  if (s.has("tasks")) {
    cfg.tasks.clear();
    const json& tasks = s.raw("tasks");
    if (!tasks.is_array()) s.fail("tasks", "expected an array");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const Section t = s.item("tasks", i);
      t.allow({"name", "factors", "loadings", "thresholds"});
      SyntheticTask task;
      task.name = t.require<std::string>("name");
      task.factors = t.require<std::vector<std::size_t>>("factors");
      task.loadings = t.get("loadings", task.loadings);
      task.thresholds = t.get("thresholds", task.thresholds);
      cfg.tasks.push_back(std::move(task));
    }
  }
  s.guard("tasks", [&] {
    cfg.validate();
    return 0;
  });
  return cfg;
}

json synthetic_json(const SyntheticConfig& cfg) {
  json j = to_json(cfg);
  j.erase("seed");
  return j;
}

TrainConfig read_train(const Section& s, TrainConfig cfg) {
  s.allow({"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "anchor_weight"});
  cfg.epochs = s.get("epochs", cfg.epochs);
  cfg.batch_size = s.get("batch_size", cfg.batch_size);
  cfg.learning_rate = s.get("learning_rate", cfg.learning_rate);
  cfg.momentum = s.get("momentum", cfg.momentum);
  cfg.weight_decay = s.get("weight_decay", cfg.weight_decay);
  cfg.anchor_weight = s.get("anchor_weight", cfg.anchor_weight);
  s.guard("epochs", [&] {
    cfg.validate();
    return 0;
  });
  return cfg;
}

json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
          {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"anchor_weight", c.anchor_weight}};
}

std::vector<TaskSpec> header_tasks(const fs::path& header) {
  std::ifstream is(header);
  if (!is) throw ConfigError("cannot open dataset header " + header.string());
  try {
    const json j = json::parse(is);
    std::vector<TaskSpec> tasks;
    for (const auto& t : j.at("tasks")) {
      tasks.push_back({t.at("name").get<std::string>(), t.at("num_classes").get<std::size_t>(),
                       t.value("weight", 1.0)});
    }
    return tasks;
  } catch (const json::exception& e) {
    throw ConfigError(header.string() + ": malformed dataset header: " + e.what());
  }
}

std::size_t header_field(const fs::path& header, const char* key) {
  std::ifstream is(header);
  try {
    return json::parse(is).at(key).get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(header.string() + ": malformed dataset header: " + e.what());
  }
}

TrainConfig default_finetune(const TrainConfig& train) {
  TrainConfig ft;
  ft.epochs = 20;
  ft.learning_rate = train.learning_rate * 0.1;
  ft.weight_decay = 20.0;
  ft.anchor_weight = 1.0;
  return ft;
}

TrainConfig default_surrogate() {
  TrainConfig s;
  s.epochs = 20;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

void ExperimentConfig::validate() const {
  const auto fail = [&](const std::string& m) { throw ConfigError(origin + ": " + m); };
  if (synthetic.has_value() == !dataset_file.empty()) fail("dataset needs exactly one of synthetic or file");
  if (!synthetic) {
    if (!fs::exists(dataset_file)) fail("dataset file " + dataset_file.string() + " does not exist");
    if (!fs::exists(dataset_header)) fail("dataset header " + dataset_header.string() + " does not exist");
  }
  if (tasks.empty()) fail("no tasks");
  if (std::none_of(tasks.begin(), tasks.end(), [&](const TaskSpec& t) { return t.name == target_task; })) {
    std::string names;
    for (const auto& t : tasks) names += (names.empty() ? "" : ", ") + t.name;
    fail("target task '" + target_task + "' is not one of the tasks [" + names + "]");
  }
  if (tasks.size() < 2) fail("attacks need at least one non-target task");
  const std::size_t n = synthetic ? synthetic->num_samples : header_field(dataset_header, "num_samples");
  const std::size_t dim = synthetic ? synthetic->input_dim : header_field(dataset_header, "input_dim");
  if (!(owner_fraction > 0.0 && owner_fraction < 1.0)) fail("split owner_fraction must lie in (0, 1)");
  const auto owner = static_cast<std::size_t>(std::llround(owner_fraction * static_cast<double>(n)));
  if (eval_size == 0 || eval_size >= owner) fail("split eval_size must lie in [1, owner rows)");
  if (owner >= n) fail("split leaves no attacker rows");
  if (backbone.input_dim != dim) fail("model input_dim does not match the dataset");
  try {
    backbone.validate();
    attack_config.validate();
    train.validate();
    finetune.validate();
    surrogate.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

json to_json(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir.generic_string();
  if (cfg.synthetic) {
    j["dataset"] = {{"synthetic", synthetic_json(*cfg.synthetic)}};
  } else {
    j["dataset"] = {{"file", cfg.dataset_file.generic_string()}, {"header", cfg.dataset_header.generic_string()}};
  }
  const BackboneConfig& b = cfg.backbone;
  json backbone = {{"kind", to_string(b.kind)},
                   {"input_dim", b.input_dim},
                   {"widths", b.widths},
                   {"input_shift", b.input_shift},
                   {"input_scale", b.input_scale}};
  if (b.kind == BackboneKind::small_conv) backbone["image"] = {b.image.channels, b.image.height, b.image.width};
  json weights = json::object();
  for (const auto& t : cfg.tasks) weights[t.name] = t.weight;
  j["model"] = {{"backbone", backbone},
                {"head", {{"kind", to_string(cfg.head.kind)}, {"hidden_width", cfg.head.hidden_width}}},
                {"task_weights", weights}};
  j["split"] = {{"owner_fraction", cfg.owner_fraction}, {"eval_size", cfg.eval_size}};
  j["threat"] = {{"target_task", cfg.target_task}, {"head_access", to_string(cfg.head_access)}};
  j["train"] = train_json(cfg.train);
  j["finetune"] = train_json(cfg.finetune);
  j["surrogate"] = train_json(cfg.surrogate);
  const AttackConfig& a = cfg.attack_config;
  j["attack"] = {{"name", to_string(cfg.attack)}, {"epsilon", a.epsilon},          {"step_size", a.step_size},
                 {"iterations", a.iterations},    {"beta", a.beta},                {"gamma", a.gamma},
                 {"feature_layer", a.feature_layer ? json(*a.feature_layer) : json(nullptr)}};
  j["sweep"] = {{"axis", to_string(cfg.sweep_axis)}, {"values", cfg.sweep_values}};
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j, std::string_view origin, std::string_view text,
                                             const fs::path& base_dir) {
  const Source src{std::string(origin), text};
  const Section root(src, j, "");
  root.allow({"seed", "output_dir", "dataset", "model", "split", "threat", "train", "finetune", "surrogate", "attack",
              "sweep"});
  ExperimentConfig cfg;
  cfg.origin = std::string(origin);
  cfg.seed = root.get("seed", cfg.seed);
  cfg.output_dir = root.get<std::string>("output_dir", cfg.output_dir.string());

  if (!root.has("dataset")) root.fail("dataset", "is required");
  const Section ds = root.sub("dataset");
  ds.allow({"synthetic", "file", "header"});
  if (ds.has("synthetic")) {
    if (ds.has("file")) ds.fail("file", "conflicts with synthetic");
    cfg.synthetic = read_synthetic(ds.sub("synthetic"));
    cfg.tasks = cfg.synthetic->task_specs();
  } else {
    const auto resolve = [&](const fs::path& p) { return p.is_relative() ? base_dir / p : p; };
    cfg.dataset_file = resolve(ds.require<std::string>("file"));
    cfg.dataset_header =
        ds.has("header") ? resolve(ds.get<std::string>("header", "")) : fs::path(cfg.dataset_file).replace_extension(".json");
    cfg.tasks = ds.guard("header", [&] { return header_tasks(cfg.dataset_header); });
  }

  cfg.backbone.input_dim = cfg.synthetic ? cfg.synthetic->input_dim : 0;
  cfg.backbone.input_shift = 127.5;
  cfg.backbone.input_scale = 1.0 / 16.0;
  if (root.has("model")) {
    const Section m = root.sub("model");
    m.allow({"backbone", "head", "task_weights"});
    if (m.has("backbone")) {
      const Section b = m.sub("backbone");
      b.allow({"kind", "input_dim", "widths", "image", "input_shift", "input_scale"});
      if (b.has("kind")) cfg.backbone.kind = b.guard("kind", [&] { return parse_backbone_kind(b.get<std::string>("kind", "")); });
      cfg.backbone.input_dim = b.get("input_dim", cfg.backbone.input_dim);
      cfg.backbone.widths = b.get("widths", cfg.backbone.widths);
      cfg.backbone.input_shift = b.get("input_shift", cfg.backbone.input_shift);
      cfg.backbone.input_scale = b.get("input_scale", cfg.backbone.input_scale);
      if (b.has("image")) {
        const auto im = b.get<std::vector<std::size_t>>("image", {});
        if (im.size() != 3) b.fail("image", "expected [channels, height, width]");
        cfg.backbone.image = ImageShape{im[0], im[1], im[2]};
      }
      if (cfg.backbone.kind == BackboneKind::identity) cfg.backbone.widths.clear();
    }
    if (m.has("head")) {
      const Section h = m.sub("head");
      h.allow({"kind", "hidden_width"});
      if (h.has("kind")) cfg.head.kind = h.guard("kind", [&] { return parse_head_kind(h.get<std::string>("kind", "")); });
      cfg.head.hidden_width = h.get("hidden_width", cfg.head.hidden_width);
    }
    if (m.has("task_weights")) {
      const Section w = m.sub("task_weights");
      for (const auto& [name, value] : m.raw("task_weights").items()) {
        auto it = std::find_if(cfg.tasks.begin(), cfg.tasks.end(), [&](const TaskSpec& t) { return t.name == name; });
        if (it == cfg.tasks.end()) w.fail(name, "unknown task");
        it->weight = w.get(name, 1.0);
        if (!(it->weight > 0.0)) w.fail(name, "task weight must be > 0");
      }
    }
  }

  if (root.has("split")) {
    const Section s = root.sub("split");
    s.allow({"owner_fraction", "eval_size"});
    cfg.owner_fraction = s.get("owner_fraction", cfg.owner_fraction);
    cfg.eval_size = s.get("eval_size", cfg.eval_size);
  }

  if (!root.has("threat")) root.fail("threat", "is required");
  const Section threat = root.sub("threat");
  threat.allow({"target_task", "head_access"});
  cfg.target_task = threat.require<std::string>("target_task");
  if (threat.has("head_access")) {
    cfg.head_access =
        threat.guard("head_access", [&] { return parse_head_access(threat.get<std::string>("head_access", "")); });
  }
  if (std::none_of(cfg.tasks.begin(), cfg.tasks.end(), [&](const TaskSpec& t) { return t.name == cfg.target_task; })) {
    threat.fail("target_task", "'" + cfg.target_task + "' is not a task of the dataset");
  }

  if (root.has("train")) cfg.train = read_train(root.sub("train"), cfg.train);
  cfg.finetune = default_finetune(cfg.train);
  if (root.has("finetune")) cfg.finetune = read_train(root.sub("finetune"), cfg.finetune);
  cfg.finetune.freeze_heads = true;
  cfg.surrogate = default_surrogate();
  if (root.has("surrogate")) cfg.surrogate = read_train(root.sub("surrogate"), cfg.surrogate);

  if (root.has("attack")) {
    const Section a = root.sub("attack");
    a.allow({"name", "epsilon", "step_size", "iterations", "beta", "gamma", "feature_layer"});
    if (a.has("name")) cfg.attack = a.guard("name", [&] { return parse_attack_kind(a.get<std::string>("name", "")); });
    AttackConfig& ac = cfg.attack_config;
    ac.epsilon = a.get("epsilon", ac.epsilon);
    ac.step_size = a.get("step_size", ac.step_size);
    ac.iterations = a.get("iterations", ac.iterations);
    ac.beta = a.get("beta", ac.beta);
    ac.gamma = a.get("gamma", ac.gamma);
    if (a.has("feature_layer") && !a.raw("feature_layer").is_null()) {
      ac.feature_layer = a.get<std::size_t>("feature_layer", 0);
    }
    a.guard("epsilon", [&] {
      ac.validate();
      return 0;
    });
  }
  cfg.attack_config.head_access = cfg.head_access;
  cfg.attack_config.seed = cfg.seeds().attack;

  if (root.has("sweep")) {
    const Section s = root.sub("sweep");
    s.allow({"axis", "values"});
    if (s.has("axis")) cfg.sweep_axis = s.guard("axis", [&] { return parse_sweep_axis(s.get<std::string>("axis", "")); });
    cfg.sweep_values = s.get("values", cfg.sweep_values);
  }
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream buffer;
  buffer << is.rdbuf();
  const std::string text = buffer.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ConfigError(path.string() + ":" + std::to_string(line) + ": syntax error: " + e.what());
  }
  const bool manifest = j.is_object() && j.contains("config") && j.contains("config_hash");
  ExperimentConfig cfg = experiment_config_from_json(manifest ? j.at("config") : j, path.string(),
                                                     manifest ? std::string_view{} : text,
                                                     manifest ? fs::path() : path.parent_path());
  if (manifest) {
    const auto expected = j.at("config_hash").get<std::string>();
    const auto actual = config_hash(cfg);
    if (expected != actual) {
      throw ConfigError(path.string() + ": config hash mismatch (manifest " + expected + ", recomputed " + actual + ")");
    }
  }
  cfg.validate();
  return cfg;
}

void apply_overrides(ExperimentConfig& cfg, const RunOverrides& o) {
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.attack_config.seed = cfg.seeds().attack;
  }
  if (o.out) cfg.output_dir = *o.out;
  if (o.parallel) {
    if (*o.parallel == 0) throw ConfigError("--parallel must be >= 1");
    cfg.attack_config.parallel = *o.parallel;
  }
}

StageError::StageError(std::string stage, const std::string& what)
    : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

// ---------------------------------------------------------------------------
// Pipeline stages

namespace {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

PreparedData split_prepared(const ExperimentConfig& cfg, LabeledDataset dataset) {
  DatasetSplit split = split_dataset(dataset, cfg.owner_fraction, cfg.seeds().split);
  const std::size_t owner = split.owner.size();
  if (cfg.eval_size >= owner) throw ContractError("eval_size leaves no training rows");
  std::vector<std::size_t> train_rows(owner - cfg.eval_size), eval_rows(cfg.eval_size);
  for (std::size_t i = 0; i < train_rows.size(); ++i) train_rows[i] = i;
  for (std::size_t i = 0; i < eval_rows.size(); ++i) eval_rows[i] = train_rows.size() + i;
  LabeledDataset train = split.owner.subset(train_rows);
  LabeledDataset eval = split.owner.subset(eval_rows);
  return {std::move(dataset), std::move(split), std::move(train), std::move(eval)};
}

std::vector<std::string> names_of(const std::vector<TaskSpec>& tasks) {
  std::vector<std::string> names;
  for (const auto& t : tasks) names.push_back(t.name);
  return names;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw FormatError("failed writing " + path.string());
}

template <typename W>
void write_with(const fs::path& path, W&& writer) {
  std::ostringstream os;
  writer(os);
  write_text(path, os.str());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const ExperimentConfig& cfg, const std::vector<std::string>& stages) {
  json m;
  m["config"] = to_json(cfg);
  m["config_hash"] = config_hash(cfg);
  m["seeds"] = to_json(cfg.seeds());
  m["stages"] = stages;
  m["parallel"] = cfg.attack_config.parallel;
  m["created"] = utc_timestamp();
  json files = json::array();
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(cfg.output_dir)) {
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  m["files"] = names;
  write_text(cfg.output_dir / "manifest.json", m.dump(2) + "\n");
}

struct BatchFile {
  std::string proxy;
  fs::path bin;
  fs::path json;
};

std::vector<BatchFile> batch_files(const ExperimentConfig& cfg) {
  const fs::path& out = cfg.output_dir;
  if (cfg.attack != AttackKind::cross_task) return {{"", out / "adversarial.bin", out / "adversarial.json"}};
  std::vector<BatchFile> files;
  for (const auto& t : cfg.tasks) {
    if (t.name == cfg.target_task) continue;
    files.push_back({t.name, out / ("adversarial_" + t.name + ".bin"), out / ("adversarial_" + t.name + ".json")});
  }
  return files;
}

PreparedData load_prepared(const ExperimentConfig& cfg) {
  const fs::path bin = cfg.output_dir / "dataset.bin", header = cfg.output_dir / "dataset.json";
  if (!fs::exists(bin) || !fs::exists(header)) {
    throw ContractError("no dataset in " + cfg.output_dir.string() + "; run the train stage first");
  }
  return split_prepared(cfg, load_dataset(bin, header));
}

MultiTaskModel load_victim(const ExperimentConfig& cfg) {
  const fs::path path = cfg.output_dir / "victim.ckpt";
  if (!fs::exists(path)) throw ContractError("no victim checkpoint in " + cfg.output_dir.string());
  MultiTaskModel victim = load_checkpoint(path);
  if (victim.tasks() != cfg.tasks || victim.backbone().config != cfg.backbone) {
    throw ContractError("victim checkpoint does not match the config");
  }
  return victim;
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& cfg) {
  LabeledDataset dataset = [&] {
    if (cfg.synthetic) {
      SyntheticConfig s = *cfg.synthetic;
      s.seed = cfg.seeds().data;
      return generate_synthetic(s);
    }
    return load_dataset(cfg.dataset_file, cfg.dataset_header);
  }();
  return split_prepared(cfg, std::move(dataset));
}

TrainedVictim train_victim(const ExperimentConfig& cfg, const PreparedData& data) {
  MultiTaskModel model = MultiTaskModel::create(cfg.backbone, cfg.head, cfg.tasks, cfg.seeds().model);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seeds().train;
  tc.freeze_heads = false;
  TrainHistory history = train_multitask(model, full_view(data.train), names_of(cfg.tasks), tc);
  return {std::move(model), std::move(history)};
}

MultiTaskModel make_attacker_model(const ExperimentConfig& cfg, const MultiTaskModel& victim,
                                   const LabeledDataset& attacker_data, std::string_view target) {
  MultiTaskModel model = victim.without_task(target);
  if (cfg.head_access == HeadAccess::white_box) return model;
  TrainConfig sc = cfg.surrogate;
  sc.seed = cfg.seeds().surrogate;
  auto heads = fit_surrogate_heads(victim.backbone(), attacker_data.inputs(), model.tasks(),
                                   model_output_oracle(victim), sc);
  return model.with_heads(heads);
}

AttackerKit prepare_attacker(const ExperimentConfig& cfg, const MultiTaskModel& victim,
                             const LabeledDataset& attacker_data, std::string_view target,
                             const TrainConfig& finetune) {
  MultiTaskModel model = make_attacker_model(cfg, victim, attacker_data, target);
  TrainConfig ft = finetune;
  ft.seed = cfg.seeds().finetune;
  ft.freeze_heads = true;
  ForgettingResult forgotten = finetune_forget(model, attacker_view(attacker_data, target), target, ft);
  return {std::move(model), std::move(forgotten.backbone), std::move(forgotten.history)};
}

AttackRun execute_attack(const MultiTaskModel& victim, const AttackerKit& kit, std::string_view target,
                         const AttackSpec& spec, const LabeledDataset& eval) {
  const AttackSetup setup{&victim, &kit.model, &kit.forgotten, std::string(target)};
  return run_attack_report(setup, spec, eval);
}

std::vector<AttackParams> axis_grid(const ExperimentConfig& cfg, SweepAxis axis, std::span<const double> values) {
  if (values.empty()) throw ConfigError(cfg.origin + ": sweep needs at least one value");
  std::vector<AttackParams> grid;
  for (double v : values) {
    AttackParams p{cfg.finetune.epochs, cfg.attack_config.beta, cfg.attack_config.gamma};
    switch (axis) {
      case SweepAxis::finetune_epochs:
        if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError(cfg.origin + ": epoch values must be whole numbers");
        p.finetune_epochs = static_cast<std::size_t>(v);
        break;
      case SweepAxis::beta:
        if (!(v >= 0.0)) throw ConfigError(cfg.origin + ": beta values must be >= 0");
        p.beta = v;
        break;
      case SweepAxis::gamma:
        if (!(v >= 0.0)) throw ConfigError(cfg.origin + ": gamma values must be >= 0");
        p.gamma = v;
        break;
    }
    grid.push_back(p);
  }
  return grid;
}

SweepResult run_sweep(const ExperimentConfig& cfg, const MultiTaskModel& victim, const PreparedData& data,
                      std::string_view target, std::span<const AttackParams> grid) {
  if (cfg.attack != AttackKind::cf && cfg.attack != AttackKind::cf_delta) {
    throw ConfigError(cfg.origin + ": sweeps apply to the cf and cf_delta attacks");
  }
  const LabeledDataset& attacker = data.split.attacker;
  const MultiTaskModel model = make_attacker_model(cfg, victim, attacker, target);
  const DatasetView view = attacker_view(attacker, target);
  std::map<std::size_t, Backbone> forgotten;
  SweepResult result;
  for (const AttackParams& p : grid) {
    auto it = forgotten.find(p.finetune_epochs);
    if (it == forgotten.end()) {
      TrainConfig ft = cfg.finetune;
      ft.epochs = p.finetune_epochs;
      ft.seed = cfg.seeds().finetune;
      ft.freeze_heads = true;
      it = forgotten.emplace(p.finetune_epochs, finetune_forget(model, view, target, ft).backbone).first;
    }
    AttackSpec spec{cfg.attack, cfg.attack_config};
    spec.config.beta = p.beta;
    spec.config.gamma = p.gamma;
    const AttackSetup setup{&victim, &model, &it->second, std::string(target)};
    result.points.push_back({p, run_attack_report(setup, spec, attacker).report});
  }
  result.chosen = select_hyperparams(result.points);
  return result;
}

void write_sweep_csv(std::ostream& os, SweepAxis axis, const SweepResult& result) {
  os << to_string(axis);
  if (!result.points.empty()) {
    for (const auto& t : result.points.front().report.tasks) os << ',' << t.task;
  }
  os << '\n';
  const auto flags = os.flags();
  const auto precision = os.precision();
  for (const auto& point : result.points) {
    os << std::defaultfloat << std::setprecision(10);
    switch (axis) {
      case SweepAxis::finetune_epochs: os << point.params.finetune_epochs; break;
      case SweepAxis::beta: os << point.params.beta; break;
      case SweepAxis::gamma: os << point.params.gamma; break;
    }
    os << std::fixed << std::setprecision(6);
    for (const auto& t : point.report.tasks) os << ',' << t.adv_accuracy - t.clean_accuracy;
    os << '\n';
  }
  os.flags(flags);
  os.precision(precision);
}

json selection_record(SweepAxis axis, const SweepResult& result) {
  json j;
  j["axis"] = to_string(axis);
  j["threshold"] = kStealthThreshold;
  j["points"] = result.points.size();
  j["feasible"] = result.chosen.has_value();
  if (result.chosen) {
    const AttackParams& p = result.points[*result.chosen].params;
    j["chosen_index"] = *result.chosen;
    j["chosen"] = {{"finetune_epochs", p.finetune_epochs}, {"beta", p.beta}, {"gamma", p.gamma}};
  } else {
    j["chosen_index"] = nullptr;
    j["chosen"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  const PreparedData data = stage("data", [&] { return prepare_data(cfg); });
  stage("data", [&] {
    save_dataset(data.dataset, cfg.output_dir / "dataset.bin", cfg.output_dir / "dataset.json",
                 {{"config_hash", config_hash(cfg)}, {"seed", cfg.seeds().data}});
    return 0;
  });
  stage("train", [&] {
    const TrainedVictim victim = train_victim(cfg, data);
    save_checkpoint(victim.model, cfg.output_dir / "victim.ckpt");
    write_with(cfg.output_dir / "train_log.csv", [&](std::ostream& os) { victim.history.write_csv(os); });
    return 0;
  });
  write_manifest(cfg, {"train"});
}

void cmd_attack(const ExperimentConfig& cfg) {
  const PreparedData data = stage("attack", [&] { return load_prepared(cfg); });
  const MultiTaskModel victim = stage("attack", [&] { return load_victim(cfg); });
  const AttackerKit kit = stage("forget", [&] {
    AttackerKit k = prepare_attacker(cfg, victim, data.split.attacker, cfg.target_task, cfg.finetune);
    save_checkpoint(k.model, cfg.output_dir / "attacker.ckpt");
    save_checkpoint(k.model.with_backbone(k.forgotten), cfg.output_dir / "forgotten.ckpt");
    write_with(cfg.output_dir / "finetune_log.csv", [&](std::ostream& os) { k.finetune_history.write_csv(os); });
    return k;
  });
  stage("attack", [&] {
    const AttackRun run = execute_attack(victim, kit, cfg.target_task, {cfg.attack, cfg.attack_config}, data.eval);
    const auto files = batch_files(cfg);
    if (files.size() != run.batches.size()) throw ContractError("unexpected number of adversarial batches");
    for (std::size_t i = 0; i < files.size(); ++i) save_adversarial_batch(run.batches[i], files[i].bin, files[i].json);
    return 0;
  });
  write_manifest(cfg, {"train", "attack"});
}

AttackReport cmd_report(const ExperimentConfig& cfg) {
  AttackReport report = stage("report", [&] {
    const PreparedData data = load_prepared(cfg);
    const MultiTaskModel victim = load_victim(cfg);
    std::vector<AttackReport> reports;
    for (const auto& f : batch_files(cfg)) {
      if (!fs::exists(f.bin)) throw ContractError("missing " + f.bin.string() + "; run the attack stage first");
      const AdversarialBatch batch = load_adversarial_batch(f.bin, f.json);
      if (batch.originals != data.eval.inputs()) throw ContractError(f.bin.string() + " does not match the eval set");
      reports.push_back(score_batch(victim, batch, data.eval, cfg.target_task));
    }
    AttackReport r = reports.size() == 1 ? reports.front() : average_reports(reports);
    r.attack = std::string(to_string(cfg.attack));
    r.seed = cfg.seed;
    write_with(cfg.output_dir / "report.csv", [&](std::ostream& os) { r.write_csv(os); });
    json j = r.to_json();
    j["experiment"] = to_json(cfg);
    j["config_hash"] = config_hash(cfg);
    write_text(cfg.output_dir / "report.json", j.dump(2) + "\n");
    return r;
  });
  write_manifest(cfg, {"train", "attack", "report"});
  return report;
}

fs::path cmd_run(const ExperimentConfig& cfg) {
  cfg.validate();
  cmd_train(cfg);
  cmd_attack(cfg);
  cmd_report(cfg);
  return cfg.output_dir;
}

SweepResult cmd_sweep(const ExperimentConfig& cfg, std::optional<SweepAxis> axis, std::vector<double> values) {
  cfg.validate();
  const SweepAxis ax = axis.value_or(cfg.sweep_axis);
  if (values.empty()) values = cfg.sweep_values;
  const std::vector<AttackParams> grid = axis_grid(cfg, ax, values);
  fs::create_directories(cfg.output_dir);
  const PreparedData data = stage("data", [&] { return prepare_data(cfg); });
  const TrainedVictim victim = stage("train", [&] { return train_victim(cfg, data); });
  SweepResult result = stage("sweep", [&] { return run_sweep(cfg, victim.model, data, cfg.target_task, grid); });
  stage("sweep", [&] {
    save_checkpoint(victim.model, cfg.output_dir / "victim.ckpt");
    write_with(cfg.output_dir / "train_log.csv", [&](std::ostream& os) { victim.history.write_csv(os); });
    write_with(cfg.output_dir / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, ax, result); });
    write_text(cfg.output_dir / "selection.json", selection_record(ax, result).dump(2) + "\n");
    return 0;
  });
  write_manifest(cfg, {"sweep"});
  return result;
}

std::vector<fs::path> cmd_diagnose(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.head.kind != HeadKind::linear) {
    throw UnsupportedError(cfg.origin + ": the forgetting diagnostic needs linear heads");
  }
  for (const auto& t : cfg.tasks) {
    if (t.num_classes != 2) throw UnsupportedError(cfg.origin + ": the forgetting diagnostic needs binary tasks");
  }
  fs::create_directories(cfg.output_dir / "diagnostic");
  const PreparedData data = stage("data", [&] { return prepare_data(cfg); });
  const TrainedVictim victim = stage("train", [&] { return train_victim(cfg, data); });
  std::vector<fs::path> files;
  std::ostringstream summary;
  summary << "target,task,separation_before,separation_after,relative_change\n" << std::setprecision(10);
  for (const auto& target : cfg.tasks) {
    stage("diagnose", [&] {
      const AttackerKit kit = prepare_attacker(cfg, victim.model, data.split.attacker, target.name, cfg.finetune);
      const ForgettingDiagnostic diag = forgetting_diagnostic(victim.model, kit.forgotten, data.eval, target.name);
      for (const auto& s : diag.series) {
        const fs::path path = cfg.output_dir / "diagnostic" / (target.name + "_on_" + s.evaluated_task + ".csv");
        write_with(path, [&](std::ostream& os) { s.write_csv(os); });
        files.push_back(path);
        summary << target.name << ',' << s.evaluated_task << ',' << s.separation_before << ',' << s.separation_after
                << ',' << s.relative_change() << '\n';
      }
      return 0;
    });
  }
  write_text(cfg.output_dir / "diagnostic_summary.csv", summary.str());
  write_manifest(cfg, {"diagnose"});
  return files;
}

}  // namespace hiddentask
