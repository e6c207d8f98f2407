#include <gtest/gtest.h>

#include <cmath>

#include "esimft/finetune.hpp"
#include "support/tiny_model.hpp"

using namespace esimft;
using testsupport::tiny_architecture;
using testsupport::tiny_pretrained;

namespace {

const GearCatalog kCatalog = default_catalog();

double central_difference(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

TrainingHistory history_of(const std::vector<double>& validity, const std::vector<double>& metric) {
  TrainingHistory h;
  for (std::size_t i = 0; i < validity.size(); ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(i) + 1;
    r.validity = validity[i];
    r.metric = metric[i];
    h.epochs.push_back(r);
  }
  return h;
}

// Tensors outside the trainable set must be bitwise identical.
void expect_frozen_unchanged(const ModelParameters<float>& before, const ModelParameters<float>& after, FreezePolicy policy) {
  ASSERT_EQ(before.size(), after.size());
  int frozen = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (is_trainable(before[i].name, policy)) continue;
    ++frozen;
    EXPECT_EQ(before[i].value.data, after[i].value.data) << before[i].name;
  }
  EXPECT_GT(frozen, 0);
}

bool any_changed(const ModelParameters<float>& a, const ModelParameters<float>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].value.data != b[i].value.data) return true;
  return false;
}

std::vector<PreferencePair> tiny_pairs(int n, std::uint64_t seed) {
  const auto problems = problems_of(generate_pretrain_dataset(n, seed, kCatalog));
  return generate_preference_pairs(tiny_pretrained(), problems, RequirementKind::cost, seed + 1, kCatalog);
}

}  // namespace

TEST(DpoLoss, Examples) {
  EXPECT_NEAR(dpo_loss(-3, -4, -3, -4, 0.1), std::log(2.0), 1e-12);
  EXPECT_NEAR(dpo_loss(0.5, -0.5, 0, 0, 0.1), -std::log(1 / (1 + std::exp(-0.1))), 1e-12);
  EXPECT_NEAR(dpo_loss(0.5, -0.5, 0, 0, 0.1), 0.6444, 1e-4);
  // Swapping preferred and rejected.
  const double z = 0.1 * (0.7 - (-0.2));
  const double sum = dpo_loss(0.7, -0.2, 0, 0, 0.1) + dpo_loss(-0.2, 0.7, 0, 0, 0.1);
  EXPECT_NEAR(sum, -std::log(1 / (1 + std::exp(-z)) * 1 / (1 + std::exp(z))), 1e-12);
  EXPECT_TRUE(std::isfinite(dpo_loss(1e4, -1e4, 0, 0, 1.0)));
  EXPECT_TRUE(std::isfinite(dpo_loss(-1e4, 1e4, 0, 0, 1.0)));
}

TEST(DpoLoss, MonotoneInMargins) {
  for (double d = -5; d < 5; d += 0.5) {
    EXPECT_GT(dpo_loss(d, 0, 0, 0, 0.3), dpo_loss(d + 0.5, 0, 0, 0, 0.3));
    EXPECT_LT(dpo_loss(0, d, 0, 0, 0.3), dpo_loss(0, d + 0.5, 0, 0, 0.3));
  }
}

TEST(DpoLoss, GradientMatchesFiniteDifferences) {
  Rng rng = derive_rng(1, {});
  for (int t = 0; t < 200; ++t) {
    const double w = uniform_real(rng, -30, 0), l = uniform_real(rng, -30, 0);
    const double rw = uniform_real(rng, -30, 0), rl = uniform_real(rng, -30, 0), beta = uniform_real(rng, 0.01, 1.0);
    const auto g = dpo_loss_grad(w, l, rw, rl, beta);
    EXPECT_NEAR(g.d_logp_w, central_difference([&](double x) { return dpo_loss(x, l, rw, rl, beta); }, w), 1e-6);
    EXPECT_NEAR(g.d_logp_l, central_difference([&](double x) { return dpo_loss(w, x, rw, rl, beta); }, l), 1e-6);
  }
}

TEST(PpoLoss, Examples) {
  EXPECT_DOUBLE_EQ(ppo_loss(-2, -2, 0.5, 0.2, 0.1, 0), -0.5);
  EXPECT_NEAR(ppo_loss(std::log(1.5), 0, 1, 0.2, 0.1, 0), -1.2, 1e-12);
  EXPECT_NEAR(ppo_loss(std::log(1.5), 0, -1, 0.2, 0.1, 0), 1.5, 1e-12);
  EXPECT_NEAR(ppo_loss(0, 0, 1, 0.2, 0.5, 0.4), -1 + 0.2, 1e-12);
  for (double r : {-1.0, -0.3, 0.0, 0.25, 1.0}) EXPECT_EQ(ppo_loss(-7.5, -7.5, r, 0.2, 0.1, 0), -r);
}

TEST(PpoLoss, GradientMatchesFiniteDifferencesAwayFromKinks) {
  Rng rng = derive_rng(2, {});
  int checked = 0;
  while (checked < 200) {
    const double old = uniform_real(rng, -20, -1), delta = uniform_real(rng, -0.6, 0.6), r = uniform_real(rng, -1, 1);
    const double eps = 0.2;
    const double rho = std::exp(delta);
    if (std::abs(rho - (1 - eps)) < 1e-3 || std::abs(rho - (1 + eps)) < 1e-3) continue;
    const double x = old + delta;
    const double fd = central_difference([&](double v) { return ppo_loss(v, old, r, eps, 0.1, 0.05); }, x);
    EXPECT_NEAR(ppo_loss_grad(x, old, r, eps), fd, 1e-6);
    ++checked;
  }
}

TEST(PpoLoss, FlatBeyondClipForPositiveReward) {
  const double a = ppo_loss(std::log(1.3), 0, 0.8, 0.2, 0.1, 0);
  const double b = ppo_loss(std::log(2.5), 0, 0.8, 0.2, 0.1, 0);
  EXPECT_DOUBLE_EQ(a, b);
  EXPECT_EQ(ppo_loss_grad(std::log(2.5), 0, 0.8, 0.2), 0.0);
  EXPECT_EQ(ppo_loss_grad(-3, -3, 0.0, 0.2), 0.0);
}

TEST(SelectCheckpoint, Examples) {
  EXPECT_EQ(select_checkpoint(history_of({0.98, 0.96, 0.93}, {50, 60, 70})).epoch, 2);
  const auto fallback = select_checkpoint(history_of({0.90, 0.94, 0.80}, {50, 60, 70}));
  EXPECT_EQ(fallback.epoch, 2);
  EXPECT_FALSE(fallback.met_threshold);
  EXPECT_EQ(select_checkpoint(history_of({0.5, 0.97, 0.2}, {90, 10, 99})).epoch, 2);
  EXPECT_EQ(select_checkpoint(history_of({0.99, 0.99}, {0.3, 0.1}), 0.95, false).epoch, 2);
  EXPECT_THROW(select_checkpoint(TrainingHistory{}), std::invalid_argument);
}

TEST(SelectCheckpoint, ChosenEpochIsValidWheneverPossible) {
  Rng rng = derive_rng(3, {});
  for (int t = 0; t < 300; ++t) {
    std::vector<double> v, m;
    for (int i = 0; i < 6; ++i) {
      v.push_back(uniform_real(rng, 0.85, 1.0));
      m.push_back(uniform_real(rng, 0, 100));
    }
    const auto c = select_checkpoint(history_of(v, m));
    const bool exists = std::any_of(v.begin(), v.end(), [](double x) { return x >= 0.95; });
    EXPECT_EQ(c.met_threshold, exists);
    if (exists) {
      EXPECT_GE(v[static_cast<std::size_t>(c.epoch - 1)], 0.95);
      for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i] >= 0.95) {
          EXPECT_GE(m[static_cast<std::size_t>(c.epoch - 1)], m[i]);
        }
    }
  }
}

TEST(TrainingConfig, Checks) {
  TrainingConfig c;
  EXPECT_NO_THROW(c.check());
  c.clip_epsilon = 1.0;
  EXPECT_THROW(c.check(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.check(), std::invalid_argument);
  c = {};
  c.beta_kl = -0.1;
  EXPECT_THROW(c.check(), std::invalid_argument);
}

TEST(History, CsvLayout) {
  auto h = history_of({0.5, 0.75}, {1, 2});
  const auto csv = history_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,metric,validity");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(h.validity_series(), (std::vector<double>{0.5, 0.75}));
}

TEST(Adam, ZeroGradientAndMaskLeaveParametersUnchanged) {
  auto m = Model::initialize(tiny_architecture(), 4);
  const auto before = m.parameters();
  Adam<float> opt(m.parameters(), 0.9, 0.999, 1e-8);
  std::vector<Matrix<float>> zeros;
  for (const auto& t : before) zeros.emplace_back(t.value.rows, t.value.cols, 0.0f);
  std::vector<const Matrix<float>*> grads;
  for (const auto& z : zeros) grads.push_back(&z);
  for (int i = 0; i < 5; ++i) opt.step(m.parameters(), grads, std::vector<bool>(before.size(), true), 1e-2);
  EXPECT_TRUE(m.parameters() == before);

  std::vector<Matrix<float>> ones;
  for (const auto& t : before) ones.emplace_back(t.value.rows, t.value.cols, 1.0f);
  grads.clear();
  for (const auto& o : ones) grads.push_back(&o);
  opt.step(m.parameters(), grads, std::vector<bool>(before.size(), false), 1e-2);
  EXPECT_TRUE(m.parameters() == before);
  opt.step(m.parameters(), grads, std::vector<bool>(before.size(), true), 0.0);
  EXPECT_TRUE(m.parameters() == before);
}

TEST(Pretrain, ZeroLearningRateKeepsParameters) {
  const auto data = generate_pretrain_dataset(100, 5, kCatalog);
  const auto split = train_val_split(data);
  TrainingConfig cfg;
  cfg.learning_rate = 0;
  cfg.max_epochs = 1;
  const auto m = Model::initialize(tiny_architecture(), 6);
  const auto r = pretrain(m, split.train, split.validation, cfg);
  EXPECT_TRUE(r.parameters == m.parameters());
  EXPECT_EQ(r.history.epochs.size(), 1u);
}

TEST(Pretrain, OverfitsSingleExample) {
  const auto data = generate_pretrain_dataset(5, 7, kCatalog);
  const std::vector<LabeledExample> one{data[2]};
  TrainingConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.adam_beta1 = 0.9;
  cfg.max_epochs = 1;
  cfg.batch_size = 1;
  auto m = Model::initialize(tiny_architecture(), 8);
  for (int step = 0; step < 500; ++step) {
    cfg.seed = static_cast<std::uint64_t>(step);
    // Validation on the example itself; one epoch is one step.
    m = Model(pretrain(m, one, one, cfg).parameters);
  }
  const auto c = original_conditioning(one[0].problem);
  EXPECT_EQ(greedy_decode(m, c), one[0].sequence);
  const double own = sequence_log_prob(m, c, one[0].sequence);
  Rng rng = derive_rng(9, {});
  for (int i = 0; i < 100; ++i) {
    const auto other = random_design(rng);
    if (other == one[0].sequence) continue;
    EXPECT_GT(own, sequence_log_prob(m, c, other));
  }
}

TEST(Pretrain, SeededRunsAreIdentical) {
  const auto data = generate_pretrain_dataset(300, 10, kCatalog);
  const auto split = train_val_split(data);
  TrainingConfig cfg;
  cfg.max_epochs = 2;
  cfg.seed = 11;
  const auto m = Model::initialize(tiny_architecture(), 12);
  const auto a = pretrain(m, split.train, split.validation, cfg);
  const auto b = pretrain(m, split.train, split.validation, cfg);
  EXPECT_TRUE(a.parameters == b.parameters);
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
}

TEST(Pretrain, StopsWhenValidationLossRises) {
  const auto data = generate_pretrain_dataset(120, 13, kCatalog);
  // A validation set unlike the training data makes the loss rise quickly.
  std::vector<LabeledExample> train(data.begin(), data.begin() + 20), val(data.begin() + 20, data.end());
  TrainingConfig cfg;
  cfg.learning_rate = 3e-2;
  cfg.max_epochs = 60;
  cfg.batch_size = 4;
  const auto r = pretrain(Model::initialize(tiny_architecture(), 14), train, val, cfg);
  ASSERT_LT(r.history.epochs.size(), 60u);
  const auto& last = r.history.epochs.back();
  const auto& prev = r.history.epochs[r.history.epochs.size() - 2];
  EXPECT_GT(last.val_loss, prev.val_loss);
  double best = 1e300;
  for (const auto& e : r.history.epochs) best = std::min(best, e.val_loss);
  EXPECT_EQ(r.history.epochs[static_cast<std::size_t>(r.best_epoch - 1)].val_loss, best);
  EXPECT_NEAR(supervised_loss(Model(r.parameters), val, LossNormalization::per_token), best, 1e-9);
}

TEST(Sft, FrozenTensorsUnchangedAndLossIsMeanNll) {
  const auto data = generate_pretrain_dataset(200, 15, kCatalog);
  auto examples = generate_sft_new(tiny_pretrained(), problems_of(data), RequirementKind::bbox, uniform_slack(0.025), 16,
                                   kCatalog);
  ASSERT_GT(examples.size(), 100u);
  const auto split = train_val_split(examples);
  double manual = 0;
  for (const auto& e : split.validation) manual -= sequence_log_prob(tiny_pretrained(), full_conditioning(e.problem), e.sequence);
  EXPECT_NEAR(supervised_loss(tiny_pretrained(), split.validation, LossNormalization::per_sequence),
              manual / static_cast<double>(split.validation.size()), 1e-9);
  for (auto policy : {FreezePolicy::decoder_only, FreezePolicy::decoder_and_new_encoder}) {
    TrainingConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 2;
    cfg.freeze_policy = policy;
    const auto r = sft_train(tiny_pretrained(), split.train, split.validation, cfg);
    expect_frozen_unchanged(tiny_pretrained().parameters(), r.parameters, policy);
    EXPECT_TRUE(any_changed(tiny_pretrained().parameters(), r.parameters));
  }
}

TEST(Dpo, StartsAtLogTwoAndKeepsEncodersFrozen) {
  const auto pairs = tiny_pairs(120, 17);
  ASSERT_GT(pairs.size(), 40u);
  TrainingConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.max_epochs = 3;
  cfg.batch_size = 16;
  std::vector<PreferencePair> train(pairs.begin(), pairs.end() - 10), val(pairs.end() - 10, pairs.end());
  const auto problems = problems_of(generate_pretrain_dataset(20, 18, kCatalog));
  std::vector<Problem> bounded = problems;
  for (auto& p : bounded) p.cost_bound = 30.0;
  const Probe<float> probe = [&](const Model& m) {
    return probe_requirement(m, bounded, RequirementKind::cost, full_conditioning, 19, 1, kCatalog);
  };
  const auto r = dpo_train(tiny_pretrained(), train, val, cfg, probe);
  EXPECT_NEAR(r.initial_loss, std::log(2.0), 1e-6);
  ASSERT_EQ(r.per_epoch.size(), 3u);
  ASSERT_EQ(r.history.epochs.size(), 3u);
  EXPECT_EQ(r.history.validity_series().size(), 3u);
  for (const auto& p : r.per_epoch) expect_frozen_unchanged(tiny_pretrained().parameters(), p, FreezePolicy::decoder_only);
  // Preference training lowers the training loss below its starting value.
  EXPECT_LT(r.history.epochs.back().train_loss, r.initial_loss);
}

TEST(Ppo, RequiresBoundsAndRespectsFreeze) {
  auto problems = problems_of(generate_pretrain_dataset(40, 20, kCatalog));
  TrainingConfig cfg;
  cfg.max_epochs = 1;
  cfg.rollouts_per_epoch = 32;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.freeze_policy = FreezePolicy::decoder_and_new_encoder;
  EXPECT_THROW(ppo_train(tiny_pretrained(), problems, RequirementKind::cost, cfg, kCatalog, {}), std::invalid_argument);
  for (auto& p : problems) p.cost_bound = 25.0;
  const auto r = ppo_train(tiny_pretrained(), problems, RequirementKind::cost, cfg, kCatalog, {});
  ASSERT_EQ(r.per_epoch.size(), 1u);
  expect_frozen_unchanged(tiny_pretrained().parameters(), r.per_epoch[0], FreezePolicy::decoder_and_new_encoder);
  EXPECT_TRUE(any_changed(tiny_pretrained().parameters(), r.per_epoch[0]));
  const auto again = ppo_train(tiny_pretrained(), problems, RequirementKind::cost, cfg, kCatalog, {});
  EXPECT_TRUE(again.per_epoch[0] == r.per_epoch[0]);
}

TEST(Ppo, RolloutRewardsAreSimulatorScores) {
  auto problems = problems_of(generate_pretrain_dataset(10, 21, kCatalog));
  for (auto& p : problems) p.bbox_bound = 0.01;
  const auto rs = collect_rollouts(tiny_pretrained(), problems, RequirementKind::bbox, 50, RewardMode::binary, 22, 1,
                                   kCatalog, {});
  ASSERT_EQ(rs.size(), 50u);
  for (const auto& r : rs) {
    const auto sim = simulate(r.sequence, kCatalog);
    EXPECT_EQ(r.reward, reward(sim, requirement_for(problems[r.problem_index], RequirementKind::bbox, {}), RewardMode::binary));
    EXPECT_TRUE(r.reward == 1.0 || r.reward == -1.0);
    EXPECT_NEAR(r.logp_old, sequence_log_prob(tiny_pretrained(), full_conditioning(problems[r.problem_index]), r.sequence),
                1e-3);
  }
}

TEST(Probe, MetricDefinitions) {
  auto problems = problems_of(generate_pretrain_dataset(30, 23, kCatalog));
  for (auto& p : problems) p.cost_bound = 1e6;
  const auto cost = probe_requirement(tiny_pretrained(), problems, RequirementKind::cost, full_conditioning, 24, 2, kCatalog);
  // An unbinding bound is met by exactly the valid samples.
  EXPECT_NEAR(cost.metric, 100.0 * cost.validity, 1e-9);
  const auto speed = probe_requirement(tiny_pretrained(), problems, RequirementKind::speed, full_conditioning, 24, 2, kCatalog);
  EXPECT_EQ(speed.validity, cost.validity);
  EXPECT_GE(speed.metric, 0.0);
}
