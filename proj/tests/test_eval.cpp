#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "hiddentask/errors.hpp"
#include "hiddentask/eval.hpp"
#include "support.hpp"

namespace ht = hiddentask;
using ht::Tensor;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

ht::LabeledDataset labeled(const ht::MultiTaskModel& m, const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ht::TaskLabels labels;
  for (const auto& t : m.tasks()) {
    std::uniform_int_distribution<std::size_t> u(0, t.num_classes - 1);
    auto& ys = labels[t.name];
    for (std::size_t i = 0; i < x.dim(0); ++i) ys.push_back(u(rng));
  }
  return ht::LabeledDataset(x, m.tasks(), labels);
}

ht::AttackReport report(double target_clean, double target_adv, std::vector<double> non_target_deltas) {
  ht::AttackReport r;
  r.attack = "cf_delta";
  r.target_task = "A";
  r.tasks.push_back({"A", ht::TaskRole::target, target_clean, target_adv});
  char name = 'B';
  for (double d : non_target_deltas) r.tasks.push_back({std::string(1, name++), ht::TaskRole::non_target, 0.9, 0.9 - d});
  return r;
}

ht::SweepPoint point(std::size_t epochs, double beta, double gamma, std::vector<double> deltas) {
  return {{epochs, beta, gamma}, report(0.9, 0.3, std::move(deltas))};
}

}  // namespace

TEST(Accuracy, PerfectPredictionsGiveOne) {
  const auto m = ht::testing::small_model(2);
  std::mt19937_64 rng(1);
  const Tensor x = ht::testing::random_pixels(rng, 20, 6);
  const auto pred = ht::predict(m, x, "B");
  EXPECT_EQ(ht::accuracy(m, x, pred, "B"), 1.0);
}

TEST(Accuracy, RandomLabelsNearHalf) {
  const auto m = ht::testing::small_model(2);
  std::mt19937_64 rng(2);
  const auto d = labeled(m, ht::testing::random_pixels(rng, 2000, 6), 3);
  EXPECT_NEAR(ht::accuracy(m, d, "A"), 0.5, 0.05);
}

TEST(Accuracy, EmptyIsContractError) {
  const auto m = ht::testing::small_model(2);
  EXPECT_THROW(ht::accuracy(m, Tensor({0, 6}), std::vector<std::size_t>{}, "A"), ht::ContractError);
}

TEST(AdvAccuracy, NullBatchEqualsCleanAndFlipsGiveZero) {
  const auto m = ht::testing::small_model(4);
  std::mt19937_64 rng(1);
  const Tensor x = ht::testing::random_pixels(rng, 30, 6);
  ht::AdversarialBatch b;
  b.originals = x;
  b.perturbed = x;
  const auto d = labeled(m, x, 5);
  EXPECT_EQ(ht::adv_accuracy(m, b, d.labels("A"), "A"), ht::accuracy(m, d, "A"));
  auto flipped = ht::predict(m, x, "A");
  for (auto& y : flipped) y = 1 - y;
  EXPECT_EQ(ht::adv_accuracy(m, b, flipped, "A"), 0.0);
}

TEST(Report, DerivedFields) {
  const auto r = report(0.9, 0.4, {0.02, 0.06});
  EXPECT_DOUBLE_EQ(r.attack_performance(), 0.5);
  EXPECT_EQ(r.stealthiness_deltas().size(), 2u);
  EXPECT_NEAR(r.worst_stealthiness_delta(), 0.06, 1e-15);
  EXPECT_NEAR(r.mean_stealthiness_delta(), 0.04, 1e-15);
  EXPECT_EQ(r.table_cell(), "40.00/86.00");
  std::ostringstream os;
  r.write_csv(os);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,role,clean_acc,adv_acc,delta");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_THROW(r.outcome("Z"), ht::LookupError);
}

TEST(Report, AverageIsFieldWiseMean) {
  const std::vector<ht::AttackReport> rs{report(0.9, 0.4, {0.02, 0.06}), report(0.9, 0.6, {0.04, 0.0})};
  const auto avg = ht::average_reports(rs);
  EXPECT_NEAR(avg.outcome("A").adv_accuracy, 0.5, 1e-15);
  EXPECT_NEAR(avg.outcome("B").adv_accuracy, 0.87, 1e-15);
  EXPECT_NEAR(avg.outcome("C").adv_accuracy, 0.87, 1e-15);
  EXPECT_NEAR(avg.outcome("C").clean_accuracy, 0.9, 1e-15);
  EXPECT_THROW(ht::average_reports(std::span<const ht::AttackReport>{}), ht::ContractError);
}

TEST(Select, SingleFeasibleCandidate) {
  const std::vector<ht::SweepPoint> s{point(10, 5, 0, {0.01, 0.02})};
  EXPECT_EQ(ht::select_hyperparams(s), 0u);
}

TEST(Select, ThresholdExcludesAggressivePoint) {
  const std::vector<ht::SweepPoint> s{point(10, 10, 0, {0.05, 0.05}), point(10, 20, 0, {0.25, 0.25})};
  EXPECT_EQ(ht::select_hyperparams(s), 0u);
}

TEST(Select, OrderedTieBreak) {
  const std::vector<ht::SweepPoint> s{point(10, 10, 0, {0.0, 0.0}), point(10, 20, 0, {0.0, 0.0})};
  EXPECT_EQ(ht::select_hyperparams(s), 1u);
  const std::vector<ht::SweepPoint> t{point(20, 10, 1, {0, 0}), point(10, 20, 0, {0, 0}), point(20, 20, 0, {0, 0}),
                                      point(20, 20, 1, {0.1, 0})};
  EXPECT_EQ(ht::select_hyperparams(t), 3u);
}

TEST(Select, NoFeasiblePoint) {
  const std::vector<ht::SweepPoint> s{point(10, 10, 0, {0.2, 0.0}), point(10, 20, 0, {0.0, kNaN})};
  EXPECT_FALSE(ht::select_hyperparams(s).has_value());
  EXPECT_THROW(ht::select_hyperparams(std::span<const ht::SweepPoint>{}), ht::ContractError);
}

TEST(Select, IgnoresPoisonedTargetFields) {
  std::vector<ht::SweepPoint> s{point(10, 5, 0, {0.01, 0.02}), point(20, 10, 1, {0.03, 0.0}),
                                point(20, 20, 1, {0.3, 0.0})};
  const auto clean = ht::select_hyperparams(s);
  for (auto& p : s) {
    auto& target = p.report.tasks.front();
    target.clean_accuracy = kNaN;
    target.adv_accuracy = kNaN;
  }
  EXPECT_EQ(ht::select_hyperparams(s), clean);
  EXPECT_EQ(clean, 1u);
}

TEST(Separation, Examples) {
  const double v[] = {1, 3, 10, 14};
  const std::size_t y[] = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(ht::separation_statistic(v, y), 10.0);
  const double c[] = {2, 2, 2, 2};
  EXPECT_EQ(ht::separation_statistic(c, y), 0.0);
  const std::size_t one_group[] = {1, 1, 1, 1};
  EXPECT_EQ(ht::separation_statistic(v, one_group), 0.0);
}

TEST(Diagnostic, IdentityWhenBackboneUnchanged) {
  ht::BackboneConfig b;
  b.input_dim = 6;
  b.widths = {5, 4};
  b.input_shift = 127.5;
  b.input_scale = 1.0 / 64;
  const auto m = ht::MultiTaskModel::create(b, {}, {{"A", 2, 1.0}, {"B", 2, 1.0}}, 3);
  std::mt19937_64 rng(6);
  const auto d = labeled(m, ht::testing::random_pixels(rng, 50, 6), 2);
  const auto diag = ht::forgetting_diagnostic(m, m.backbone(), d, "A");
  ASSERT_EQ(diag.series.size(), 2u);
  for (const auto& s : diag.series) {
    EXPECT_EQ(s.before, s.after);
    EXPECT_EQ(s.before.size(), 50u);
    EXPECT_EQ(s.separation_before, s.separation_after);
    EXPECT_EQ(s.relative_change(), 0.0);
  }
  const Tensor f = ht::forward_backbone(m, d.inputs().rows(0, 1));
  const Tensor& w = m.head("B").layers[0].weight;
  double dot = 0.0;
  for (std::size_t k = 0; k < 4; ++k) dot += w.at(k, 1) * f[k];
  EXPECT_NEAR(diag.for_task("B").before[0], dot, 1e-14);
}

TEST(Diagnostic, RejectsUnsupportedHeads) {
  const auto m = ht::testing::small_model(3, 6, {5, 4}, ht::HeadKind::mlp);
  std::mt19937_64 rng(6);
  const auto d = labeled(m, ht::testing::random_pixels(rng, 10, 6), 2);
  EXPECT_THROW(ht::forgetting_diagnostic(m, m.backbone(), d, "A"), ht::UnsupportedError);
  const auto lin = ht::testing::small_model(3);
  EXPECT_THROW(ht::forgetting_diagnostic(lin, lin.backbone(), labeled(lin, d.inputs(), 1), "A"),
               ht::UnsupportedError);
}

TEST(RunAttackReport, NullAttackReproducesClean) {
  const auto victim = ht::testing::small_model(12);
  const auto attacker = victim.without_task("A");
  const auto forgotten = ht::testing::small_model(13).backbone();
  std::mt19937_64 rng(6);
  const auto eval = labeled(victim, ht::testing::random_pixels(rng, 40, 6), 2);
  ht::AttackSetup setup{&victim, &attacker, &forgotten, "A"};
  for (ht::AttackKind kind : ht::kAllAttacks) {
    ht::AttackSpec spec{kind, {}};
    spec.config.epsilon = 1e-12;
    spec.config.gamma = 1;
    const auto run = ht::run_attack_report(setup, spec, eval);
    for (const auto& t : run.report.tasks) {
      EXPECT_EQ(t.adv_accuracy, t.clean_accuracy) << ht::to_string(kind) << " " << t.task;
    }
  }
}

TEST(RunAttackReport, CrossTaskAveragesProxies) {
  const auto victim = ht::testing::small_model(12);
  const auto attacker = victim.without_task("A");
  std::mt19937_64 rng(7);
  const auto eval = labeled(victim, ht::testing::random_pixels(rng, 40, 6), 2);
  ht::AttackSetup setup{&victim, &attacker, nullptr, "A"};
  const auto run = ht::run_attack_report(setup, {ht::AttackKind::cross_task, {}}, eval);
  ASSERT_EQ(run.batches.size(), 2u);
  std::vector<ht::AttackReport> parts;
  for (const auto& b : run.batches) parts.push_back(ht::score_batch(victim, b, eval, "A"));
  const auto avg = ht::average_reports(parts);
  for (const auto& t : run.report.tasks) {
    EXPECT_DOUBLE_EQ(t.adv_accuracy, avg.outcome(t.task).adv_accuracy);
  }
}
