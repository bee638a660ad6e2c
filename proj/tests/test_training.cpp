#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "hiddentask/errors.hpp"
#include "hiddentask/eval.hpp"
#include "hiddentask/training.hpp"
#include "support.hpp"

namespace ht = hiddentask;

namespace {

ht::SyntheticConfig toy_data(std::size_t n, std::uint64_t seed) {
  ht::SyntheticConfig c;
  c.num_samples = n;
  c.input_dim = 8;
  c.num_latent = 3;
  c.noise_std = 0.05;
  c.seed = seed;
  c.tasks = {{"A", {0}, {}, {0.0}}, {"B", {1}, {}, {0.0}}, {"C", {2}, {}, {0.0}}};
  return c;
}

ht::MultiTaskModel toy_model(std::uint64_t seed) {
  ht::BackboneConfig b;
  b.input_dim = 8;
  b.widths = {16, 16};
  b.input_shift = 127.5;
  b.input_scale = 1.0 / 16.0;
  return ht::MultiTaskModel::create(b, {}, {{"A", 2, 1.0}, {"B", 2, 1.0}, {"C", 2, 1.0}}, seed);
}

ht::TrainConfig toy_train() {
  ht::TrainConfig c;
  c.epochs = 10;
  c.batch_size = 32;
  c.learning_rate = 0.02;
  c.seed = 4;
  return c;
}

const std::vector<std::string> kAll{"A", "B", "C"};

struct Trained {
  ht::LabeledDataset data = ht::generate_synthetic(toy_data(3000, 11));
  ht::DatasetSplit split = ht::split_dataset(data, 0.8, 2);
  ht::MultiTaskModel model = toy_model(3);
  ht::TrainHistory history;

  Trained() { history = ht::train_multitask(model, ht::full_view(split.owner), kAll, toy_train()); }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  const auto data = ht::generate_synthetic(toy_data(100, 1));
  auto m = toy_model(1);
  const auto before = m;
  auto cfg = toy_train();
  cfg.epochs = 0;
  const auto h = ht::train_multitask(m, ht::full_view(data), kAll, cfg);
  EXPECT_EQ(m, before);
  EXPECT_TRUE(h.epochs.empty());
}

TEST(Train, ReachesHighAccuracyOnToyData) {
  const auto& t = trained();
  for (const auto& task : kAll) EXPECT_GE(ht::accuracy(t.model, t.split.attacker, task), 0.95) << task;
  ASSERT_EQ(t.history.epochs.size(), 10u);
  EXPECT_LT(t.history.epochs.back().total_loss, t.history.epochs.front().total_loss);
}

TEST(Train, BitIdenticalUnderSameSeeds) {
  const auto data = ht::generate_synthetic(toy_data(300, 5));
  auto a = toy_model(9);
  auto b = toy_model(9);
  auto cfg = toy_train();
  cfg.epochs = 2;
  ht::train_multitask(a, ht::full_view(data), kAll, cfg);
  ht::train_multitask(b, ht::full_view(data), kAll, cfg);
  EXPECT_EQ(a, b);
  auto c = toy_model(9);
  cfg.seed += 1;
  ht::train_multitask(c, ht::full_view(data), kAll, cfg);
  EXPECT_NE(a, c);
}

TEST(Train, FrozenHeadsStayByteEqual) {
  const auto data = ht::generate_synthetic(toy_data(200, 5));
  auto m = toy_model(2);
  const auto heads = m.heads();
  auto cfg = toy_train();
  cfg.epochs = 2;
  cfg.freeze_heads = true;
  ht::train_multitask(m, ht::full_view(data), kAll, cfg);
  EXPECT_EQ(m.heads(), heads);
  EXPECT_NE(m.backbone(), toy_model(2).backbone());
}

TEST(Train, HiddenTaskCannotBeTrained) {
  const auto data = ht::generate_synthetic(toy_data(50, 5));
  auto m = toy_model(2);
  EXPECT_THROW(ht::train_multitask(m, ht::attacker_view(data, "A"), kAll, toy_train()), ht::AccessError);
}

TEST(Train, RejectsInvalidConfig) {
  ht::TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ht::ContractError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ht::ContractError);
  c = {};
  c.anchor_weight = -1;
  EXPECT_THROW(c.validate(), ht::ContractError);
}

TEST(Train, CsvLogHasHeaderAndOneRowPerEpoch) {
  std::ostringstream os;
  trained().history.write_csv(os);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss_A,loss_B,loss_C,acc_A,acc_B,acc_C");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST(Forget, LeavesInputModelAndHeadsUntouched) {
  const auto& t = trained();
  const auto before = t.model;
  ht::TrainConfig cfg = toy_train();
  cfg.epochs = 2;
  cfg.learning_rate = 0.002;
  cfg.weight_decay = 5;
  cfg.anchor_weight = 1;
  cfg.freeze_heads = true;
  const auto r = ht::finetune_forget(t.model, ht::attacker_view(t.split.attacker, "A"), "A", cfg);
  EXPECT_EQ(t.model, before);
  EXPECT_NE(r.backbone, t.model.backbone());
  EXPECT_EQ(r.history.tasks, (std::vector<std::string>{"B", "C"}));
  const auto again = ht::finetune_forget(t.model, ht::attacker_view(t.split.attacker, "A"), "A", cfg);
  EXPECT_EQ(again.backbone, r.backbone);
}

TEST(Forget, ZeroEpochsReturnsSnapshotOfBackbone) {
  const auto& t = trained();
  ht::TrainConfig cfg = toy_train();
  cfg.epochs = 0;
  cfg.freeze_heads = true;
  EXPECT_EQ(ht::finetune_forget(t.model, ht::attacker_view(t.split.attacker, "A"), "A", cfg).backbone,
            t.model.backbone());
}

TEST(Forget, RejectsViewExposingTarget) {
  const auto& t = trained();
  ht::TrainConfig cfg = toy_train();
  cfg.freeze_heads = true;
  EXPECT_THROW(ht::finetune_forget(t.model, ht::full_view(t.split.attacker), "A", cfg), ht::ContractError);
  cfg.freeze_heads = false;
  EXPECT_THROW(ht::finetune_forget(t.model, ht::attacker_view(t.split.attacker, "A"), "A", cfg),
               ht::ContractError);
}

TEST(Surrogate, GroundTruthOracleGeneralises) {
  const auto& t = trained();
  std::vector<std::size_t> rows(500);
  std::iota(rows.begin(), rows.end(), 0);
  const auto held = t.split.owner.subset(rows);
  const auto view = ht::attacker_view(t.split.attacker, "A");
  ht::TrainConfig cfg = toy_train();
  cfg.epochs = 20;
  const std::vector<ht::TaskSpec> tasks{t.model.task("B"), t.model.task("C")};
  const auto heads = ht::fit_surrogate_heads(t.model.backbone(), t.split.attacker.inputs(), tasks,
                                             ht::view_label_oracle(view), cfg);
  const auto surrogate = t.model.without_task("A").with_heads(heads);
  for (const char* task : {"B", "C"}) EXPECT_GE(ht::accuracy(surrogate, held, task), 0.9) << task;
}

TEST(Surrogate, AgreesWithWhiteBoxHeads) {
  const auto& t = trained();
  ht::TrainConfig cfg = toy_train();
  cfg.epochs = 20;
  const auto visible = t.model.without_task("A");
  const auto heads = ht::fit_surrogate_heads(visible.backbone(), t.split.attacker.inputs(), visible.tasks(),
                                             ht::model_output_oracle(visible), cfg);
  const auto surrogate = visible.with_heads(heads);
  const ht::Tensor held = t.split.owner.inputs().rows(0, 500);
  for (const char* task : {"B", "C"}) {
    const auto a = ht::predict(surrogate, held, task);
    const auto b = ht::predict(visible, held, task);
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
    EXPECT_GE(static_cast<double>(same) / a.size(), 0.9) << task;
  }
}

TEST(Surrogate, ZeroEpochsIsNearChance) {
  const auto& t = trained();
  ht::TrainConfig cfg = toy_train();
  cfg.epochs = 0;
  const std::vector<ht::TaskSpec> tasks{t.model.task("B")};
  const auto view = ht::attacker_view(t.split.attacker, "A");
  const auto heads = ht::fit_surrogate_heads(t.model.backbone(), t.split.attacker.inputs(), tasks,
                                             ht::view_label_oracle(view), cfg);
  const auto m = t.model.with_heads(heads);
  EXPECT_LE(ht::accuracy(m, t.split.owner, "B"), 0.8);
}
