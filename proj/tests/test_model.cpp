#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "hiddentask/checkpoint.hpp"
#include "hiddentask/errors.hpp"
#include "hiddentask/model.hpp"
#include "support.hpp"

namespace ht = hiddentask;
using ht::Tensor;

namespace {

ht::MultiTaskModel identity_model(std::size_t dim) {
  ht::BackboneConfig b;
  b.kind = ht::BackboneKind::identity;
  b.input_dim = dim;
  b.widths = {};
  return ht::MultiTaskModel::create(b, {}, {{"A", 2, 1.0}, {"B", 2, 1.0}}, 1);
}

}  // namespace

TEST(Backbone, IdentityReturnsInput) {
  const auto m = identity_model(3);
  const Tensor x = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(ht::forward_backbone(m, x), x);
}

TEST(Backbone, ZeroWeightsGiveBiasThroughRelu) {
  auto m = ht::testing::small_model(1);
  for (auto& layer : m.backbone().layers) {
    for (double& v : layer.weight.values()) v = 0.0;
  }
  m.backbone().layers[0].bias = Tensor::vector({1, -1, 2, 0, 3});
  const Tensor f1 = ht::forward_backbone(m, Tensor::matrix({{9, 9, 9, 9, 9, 9}}), 1);
  EXPECT_EQ(f1, Tensor::matrix({{1, 0, 2, 0, 3}}));
  m.backbone().layers[1].bias = Tensor::vector({0.5, -0.5, 1, 2});
  EXPECT_EQ(ht::forward_backbone(m, Tensor::matrix({{7, 1, 2, 3, 4, 5}})), Tensor::matrix({{0.5, 0, 1, 2}}));
}

TEST(Backbone, RejectsWrongInputWidth) {
  const auto m = ht::testing::small_model(1);
  EXPECT_THROW(ht::forward_backbone(m, Tensor({2, 5})), ht::DimensionError);
}

TEST(Backbone, SmallConvFeatureDim) {
  ht::BackboneConfig b;
  b.kind = ht::BackboneKind::small_conv;
  b.image = {1, 4, 4};
  b.input_dim = 16;
  b.widths = {3, 5};
  const auto m = ht::MultiTaskModel::create(b, {}, {{"A", 2, 1.0}}, 3);
  std::mt19937_64 rng(2);
  const Tensor f = ht::forward_backbone(m, ht::testing::random_pixels(rng, 2, 16));
  EXPECT_EQ(f.shape(), (ht::Shape{2, 5}));
  EXPECT_EQ(ht::forward_backbone(m, ht::testing::random_pixels(rng, 2, 16), 1).shape(), (ht::Shape{2, 12}));
}

TEST(Model, TracedMatchesUntraced) {
  const auto m = ht::testing::small_model(5, 6, {5, 4}, ht::HeadKind::mlp);
  std::mt19937_64 rng(1);
  const Tensor x = ht::testing::random_pixels(rng, 4, 6);
  ht::Tape tape;
  ht::TracedModel traced(tape, m);
  EXPECT_LE(ht::max_abs_diff(traced.logits(tape.constant(x), "B").value(), ht::forward_task(m, x, "B")), 1e-14);
}

TEST(Model, UnknownTaskIsLookupError) {
  const auto m = ht::testing::small_model(1);
  EXPECT_THROW(m.task_index("Z"), ht::LookupError);
  EXPECT_THROW(m.without_task("Z"), ht::LookupError);
}

TEST(Model, WithoutTaskDropsHead) {
  const auto m = ht::testing::small_model(1);
  const auto a = m.without_task("B");
  EXPECT_FALSE(a.has_task("B"));
  EXPECT_EQ(a.heads().size(), 2u);
  EXPECT_EQ(a.head("C"), m.head("C"));
  EXPECT_EQ(a.backbone(), m.backbone());
}

TEST(CrossEntropy, Examples) {
  const double zero[] = {0, 0};
  EXPECT_NEAR(ht::cross_entropy(zero, 0), std::log(2.0), 1e-15);
  const double big[] = {1000, 0};
  EXPECT_NEAR(ht::cross_entropy(big, 0), 0.0, 1e-12);
  EXPECT_NEAR(ht::cross_entropy(big, 1), 1000.0, 1e-9);
  const double four[] = {3, 3, 3, 3};
  EXPECT_NEAR(ht::cross_entropy(four, 2), std::log(4.0), 1e-15);
  EXPECT_THROW(ht::cross_entropy(zero, 2), ht::ContractError);
}

TEST(MultitaskLoss, ZeroHeadsGiveWeightedLn2) {
  auto m = identity_model(2);
  for (const char* t : {"A", "B"}) {
    for (auto& layer : m.head(t).layers) {
      for (double& v : layer.weight.values()) v = 0.0;
      for (double& v : layer.bias.values()) v = 0.0;
    }
  }
  const ht::TaskLabels labels{{"A", {0, 1, 1}}, {"B", {1, 0, 0}}};
  const std::vector<std::string> both{"A", "B"};
  const Tensor x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  EXPECT_NEAR(ht::multitask_loss(m, x, labels, both), 2.0 * std::log(2.0), 1e-14);
  ht::MultiTaskModel weighted(m.backbone(), {{"A", 2, 1.0}, {"B", 2, 2.0}}, m.heads());
  EXPECT_NEAR(ht::multitask_loss(weighted, x, labels, both), 3.0 * std::log(2.0), 1e-14);
  const std::vector<std::string> only_a{"A"};
  EXPECT_NEAR(ht::multitask_loss(weighted, x, labels, only_a), std::log(2.0), 1e-14);
  const std::vector<std::string> none;
  EXPECT_EQ(ht::multitask_loss(weighted, x, labels, none), 0.0);
  const std::vector<std::string> missing{"C"};
  EXPECT_THROW(ht::multitask_loss(weighted, x, labels, missing), std::exception);
}

TEST(MultitaskLoss, AdditiveOverDisjointSubsets) {
  const auto m = ht::testing::small_model(4);
  std::mt19937_64 rng(9);
  const Tensor x = ht::testing::random_pixels(rng, 5, 6);
  const ht::TaskLabels labels{{"A", {0, 1, 1, 0, 1}}, {"B", {2, 0, 1, 1, 0}}, {"C", {1, 1, 0, 0, 0}}};
  const std::vector<std::string> s1{"A"}, s2{"B", "C"}, all{"A", "B", "C"};
  EXPECT_NEAR(ht::multitask_loss(m, x, labels, all),
              ht::multitask_loss(m, x, labels, s1) + ht::multitask_loss(m, x, labels, s2), 1e-13);
}

TEST(MultitaskLoss, TracedMeanMatchesUntraced) {
  const auto m = ht::testing::small_model(8);
  std::mt19937_64 rng(3);
  const Tensor x = ht::testing::random_pixels(rng, 5, 6);
  const ht::TaskLabels labels{{"A", {0, 1, 1, 0, 1}}, {"B", {2, 0, 1, 1, 0}}, {"C", {1, 1, 0, 0, 0}}};
  const std::vector<std::string> subset{"A", "B", "C"};
  ht::Tape tape;
  ht::TracedModel traced(tape, m);
  const double traced_mean = ht::ops::mean(ht::multitask_loss(traced, traced.backbone().features(tape.constant(x)), labels, subset)).value().item();
  EXPECT_NEAR(traced_mean, ht::multitask_loss(m, x, labels, subset), 1e-13);
}

TEST(Predict, TiesGoToLowestIndex) {
  const double tie[] = {0.3, 0.7, 0.7};
  EXPECT_EQ(ht::argmax(tie), 1u);
  const double flat[] = {1, 1};
  EXPECT_EQ(ht::argmax(flat), 0u);
  auto m = identity_model(2);
  for (auto& layer : m.head("A").layers) {
    for (double& v : layer.weight.values()) v = 0.0;
    for (double& v : layer.bias.values()) v = 0.0;
  }
  EXPECT_EQ(ht::predict(m, Tensor::matrix({{1, 2}, {3, 4}}), "A"), (std::vector<std::size_t>{0, 0}));
}

TEST(Checkpoint, RoundTripIsExact) {
  for (auto kind : {ht::HeadKind::linear, ht::HeadKind::mlp}) {
    const auto m = ht::testing::small_model(21, 6, {5, 4}, kind);
    std::stringstream ss;
    ht::save_checkpoint(m, ss);
    EXPECT_EQ(ht::load_checkpoint(ss), m);
  }
}

TEST(Checkpoint, RoundTripMixedHeads) {
  const auto m = ht::testing::small_model(21, 6, {5, 4}, ht::HeadKind::mlp);
  const auto mixed = m.with_heads({{"B", ht::make_head({ht::HeadKind::linear, 0}, 4, 3, 9)}});
  std::stringstream ss;
  ht::save_checkpoint(mixed, ss);
  EXPECT_EQ(ht::load_checkpoint(ss), mixed);
}

TEST(Checkpoint, RejectsUnknownVersion) {
  std::stringstream ss;
  ht::save_checkpoint(ht::testing::small_model(1), ss);
  std::string bytes = ss.str();
  bytes[4] = 9;
  std::stringstream bad(bytes);
  EXPECT_THROW(ht::load_checkpoint(bad), ht::FormatError);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  std::stringstream ss;
  ht::save_checkpoint(ht::testing::small_model(1), ss);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(ht::load_checkpoint(truncated), ht::FormatError);
  bytes[0] = 'X';
  std::stringstream bad(bytes);
  EXPECT_THROW(ht::load_checkpoint(bad), ht::FormatError);
}
