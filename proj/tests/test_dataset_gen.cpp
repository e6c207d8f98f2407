#include <gtest/gtest.h>

#include <set>

#include "esimft/dataset_gen.hpp"
#include "support/tiny_model.hpp"

using namespace esimft;
using testsupport::tiny_pretrained;

namespace {

const GearCatalog kCatalog = default_catalog();

std::set<std::vector<int>> token_set(const std::vector<LabeledExample>& xs) {
  std::set<std::vector<int>> s;
  for (const auto& x : xs) s.insert(to_ids(x.sequence));
  return s;
}

std::vector<Problem> held_out_problems(int n, std::uint64_t seed) {
  return problems_of(generate_pretrain_dataset(n, seed, kCatalog));
}

}  // namespace

TEST(PretrainDataset, LabelsAreOwnSimulation) {
  const auto data = generate_pretrain_dataset(500, 1, kCatalog);
  ASSERT_EQ(data.size(), 500u);
  for (const auto& e : data) {
    EXPECT_TRUE(is_valid(e.sequence));
    EXPECT_EQ(e.metrics, simulate(e.sequence, kCatalog));
    EXPECT_EQ(e.problem.speed_target, e.metrics.log_speed_ratio);
    EXPECT_EQ(e.problem.position_target, e.metrics.output_position);
    EXPECT_FALSE(e.problem.bbox_bound || e.problem.cost_bound);
  }
}

TEST(PretrainDataset, DeterministicAndSeedSensitive) {
  const auto a = generate_pretrain_dataset(50, 2, kCatalog);
  const auto b = generate_pretrain_dataset(50, 2, kCatalog);
  const auto c = generate_pretrain_dataset(50, 3, kCatalog);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].sequence, b[i].sequence);
  EXPECT_NE(token_set(a), token_set(c));
  EXPECT_THROW(generate_pretrain_dataset(0, 1, kCatalog), std::invalid_argument);
}

TEST(Splits, PartitionAndSizes) {
  auto data = generate_pretrain_dataset(2000, 4, kCatalog);
  // Tag each example by position so the partition check survives duplicate designs.
  for (std::size_t i = 0; i < data.size(); ++i) data[i].problem.speed_target = static_cast<double>(i);
  const auto s = split_dataset(data, 5);
  EXPECT_EQ(s.test.size(), 100u);
  EXPECT_EQ(s.ft.size(), 1900u);
  EXPECT_EQ(s.ft1.size(), 950u);
  EXPECT_EQ(s.ft2.size(), 950u);
  EXPECT_EQ(s.ft1_parts.train.size(), 855u);
  EXPECT_EQ(s.ft1_parts.validation.size(), 95u);
  std::set<double> seen;
  for (const auto* part : {&s.test, &s.ft1, &s.ft2})
    for (const auto& e : *part) EXPECT_TRUE(seen.insert(e.problem.speed_target).second);
  EXPECT_EQ(seen.size(), data.size());
  const auto again = split_dataset(data, 5);
  for (std::size_t i = 0; i < s.test.size(); ++i) EXPECT_EQ(s.test[i].problem, again.test[i].problem);
  EXPECT_THROW(split_dataset(generate_pretrain_dataset(39, 1, kCatalog), 1), std::invalid_argument);
}

TEST(SftOriginal, EveryEntryPassesTheFilter) {
  const auto problems = held_out_problems(60, 6);
  for (auto kind : {RequirementKind::speed, RequirementKind::position}) {
    const auto d = generate_sft_original(tiny_pretrained(), problems, kind, 0.05, 8, 7, kCatalog);
    EXPECT_EQ(d.draws, 60 * 8);
    EXPECT_EQ(d.accepted, static_cast<int>(d.examples.size()));
    EXPECT_GT(d.accepted, 0);
    for (const auto& e : d.examples) {
      EXPECT_EQ(e.metrics, simulate(e.sequence, kCatalog));
      EXPECT_TRUE(e.metrics.valid);
      EXPECT_LE(violation(e.metrics, requirement_for(e.problem, kind, {})), 0.05);
      if (kind == RequirementKind::speed) EXPECT_EQ(e.problem.position_target, e.metrics.output_position);
      else EXPECT_EQ(e.problem.speed_target, e.metrics.log_speed_ratio);
    }
  }
  EXPECT_THROW(generate_sft_original(tiny_pretrained(), problems, RequirementKind::cost, 0.05, 8, 7, kCatalog),
               std::invalid_argument);
}

TEST(SftNew, BoundsCoverAchievedValues) {
  const auto problems = held_out_problems(60, 8);
  for (auto kind : {RequirementKind::bbox, RequirementKind::cost}) {
    const double hi = 0.5 * ViolationScales{}.of(kind);
    const auto d = generate_sft_new(tiny_pretrained(), problems, kind, uniform_slack(hi), 9, kCatalog);
    EXPECT_GT(d.size(), 40u);
    for (const auto& e : d) {
      ASSERT_TRUE(e.problem.bound(kind).has_value());
      const double value = requirement_value(e.metrics, kind);
      EXPECT_GE(*e.problem.bound(kind), value);
      EXPECT_LE(*e.problem.bound(kind), value + hi);
      EXPECT_TRUE(meets(e.metrics, e.problem, kind, {}));
      EXPECT_EQ(e.metrics, simulate(e.sequence, kCatalog));
    }
  }
  // Zero slack puts the bound exactly on the achieved value.
  for (const auto& e : generate_sft_new(tiny_pretrained(), problems, RequirementKind::cost, uniform_slack(0), 9, kCatalog))
    EXPECT_EQ(*e.problem.cost_bound, e.metrics.cost);
}

TEST(PreferencePairs, OrderedAroundTheBound) {
  const auto problems = held_out_problems(80, 10);
  for (auto kind : {RequirementKind::bbox, RequirementKind::cost}) {
    const auto pairs = generate_preference_pairs(tiny_pretrained(), problems, kind, 11, kCatalog);
    EXPECT_GT(pairs.size(), 20u);
    for (const auto& p : pairs) {
      const double w = requirement_value(simulate(p.preferred, kCatalog), kind);
      const double l = requirement_value(simulate(p.rejected, kCatalog), kind);
      EXPECT_LT(w, p.bound);
      EXPECT_LT(p.bound, l);
      EXPECT_DOUBLE_EQ(p.bound, 0.5 * (w + l));
      EXPECT_EQ(p.problem.bound(kind), p.bound);
      EXPECT_TRUE(is_valid(p.preferred) && is_valid(p.rejected));
    }
    const auto again = generate_preference_pairs(tiny_pretrained(), problems, kind, 11, kCatalog);
    ASSERT_EQ(again.size(), pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(again[i].preferred, pairs[i].preferred);
  }
}

TEST(JsonForms, ExampleLineLayout) {
  auto e = generate_pretrain_dataset(1, 12, kCatalog).front();
  auto j = example_to_json(e);
  for (const char* key : {"tokens", "speed_log", "pos", "bbox", "cost", "bound", "bound_kind"}) EXPECT_TRUE(j.contains(key));
  EXPECT_TRUE(j.at("bound").is_null());
  e.problem.cost_bound = 12.5;
  j = example_to_json(e);
  EXPECT_EQ(j.at("bound"), 12.5);
  EXPECT_EQ(j.at("bound_kind"), "cost");
  e.problem.bbox_bound = 0.01;
  e.preference = std::array<double, 4>{1, 0, 1, 1};
  j = example_to_json(e);
  EXPECT_TRUE(j.contains("bounds"));
  EXPECT_TRUE(j.contains("pref"));
  const auto back = example_from_json(json::parse(j.dump()), kCatalog);
  EXPECT_EQ(back.problem, e.problem);
  EXPECT_EQ(back.sequence, e.sequence);
  EXPECT_EQ(back.preference, e.preference);
  EXPECT_EQ(back.metrics, e.metrics);
}

TEST(JsonForms, FileRoundTrip) {
  const auto dir = fs::temp_directory_path() / "esimft_dataset_test";
  fs::create_directories(dir);
  const auto data = generate_pretrain_dataset(30, 13, kCatalog);
  save_examples(dir / "d.jsonl", data);
  const auto back = load_examples(dir / "d.jsonl", kCatalog);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].problem, data[i].problem);
    EXPECT_EQ(back[i].sequence, data[i].sequence);
  }
  const auto pairs = generate_preference_pairs(tiny_pretrained(), problems_of(data), RequirementKind::bbox, 14, kCatalog);
  save_pairs(dir / "p.jsonl", pairs);
  const auto pb = load_pairs(dir / "p.jsonl");
  ASSERT_EQ(pb.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pb[i].problem, pairs[i].problem);
    EXPECT_EQ(pb[i].rejected, pairs[i].rejected);
    EXPECT_EQ(pb[i].bound, pairs[i].bound);
  }
  fs::remove_all(dir);
}
