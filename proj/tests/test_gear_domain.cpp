#include <gtest/gtest.h>

#include <set>

#include "esimft/gear_domain.hpp"

using namespace esimft;

namespace {

DesignSequence seq(std::initializer_list<Token> ts) { return DesignSequence(ts); }

}  // namespace

TEST(Token, VocabularyHasElevenSymbolsPlusPad) {
  std::set<int> ids;
  std::set<std::string> names;
  for (int id = 0; id < kNumTokenIds; ++id) {
    auto t = Token::from_id(id);
    ASSERT_TRUE(t.has_value());
    EXPECT_EQ(t->id(), id);
    ids.insert(t->id());
    names.insert(token_name(*t));
  }
  EXPECT_EQ(ids.size(), 12u);
  EXPECT_EQ(names.size(), 12u);
  EXPECT_EQ(kNumOutputTokens, 11);
  EXPECT_FALSE(Token::from_id(-1).has_value());
  EXPECT_FALSE(Token::from_id(kNumTokenIds).has_value());
}

TEST(Token, IdRoundTripIsIdentity) {
  std::vector<int> all(kNumTokenIds);
  for (int i = 0; i < kNumTokenIds; ++i) all[static_cast<std::size_t>(i)] = i;
  EXPECT_EQ(to_ids(from_ids(all)), all);
  EXPECT_THROW(from_ids({0, 99}), std::out_of_range);
}

TEST(Token, ShaftAndGearAccessors) {
  EXPECT_DOUBLE_EQ(Token::shaft(0).shaft_length(), 0.1);
  EXPECT_DOUBLE_EQ(Token::shaft(1).shaft_length(), 0.2);
  EXPECT_DOUBLE_EQ(Token::shaft(2).shaft_length(), 0.4);
  EXPECT_EQ(Token::gear(4).gear_id(), 4);
  EXPECT_EQ(Token::gear(4).kind(), TokenKind::gear);
}

TEST(Catalog, DefaultEntries) {
  const auto c = default_catalog();
  ASSERT_EQ(c.size(), 6u);
  EXPECT_NO_THROW(check_catalog(c));
  const int driver[] = {20, 20, 40, 10, 30, 15};
  const int driven[] = {40, 20, 20, 30, 10, 15};
  const double price[] = {5, 4, 5, 8, 8, 7};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(c[i].driver_teeth, driver[i]);
    EXPECT_EQ(c[i].driven_teeth, driven[i]);
    EXPECT_DOUBLE_EQ(c[i].price, price[i]);
    EXPECT_EQ(c[i].axis_effect, i < 3 ? AxisEffect::parallel : AxisEffect::perpendicular);
    EXPECT_DOUBLE_EQ(c[i].gear_radius_per_tooth, 0.005);
    EXPECT_GE(c[i].driver_teeth, 8);
  }
}

TEST(Validate, Examples) {
  EXPECT_TRUE(validate_sequence(seq({Token::sos(), Token::shaft(1), Token::gear(0), Token::shaft(0), Token::eos()})).is_valid);

  auto r = validate_sequence(seq({Token::sos(), Token::eos()}));
  EXPECT_FALSE(r.is_valid);
  EXPECT_EQ(r.failure_reason, FailureReason::no_gear);

  r = validate_sequence(seq({Token::sos(), Token::shaft(0), Token::gear(0), Token::gear(1), Token::eos()}));
  EXPECT_FALSE(r.is_valid);
  EXPECT_EQ(r.failure_reason, FailureReason::bad_stage);
}

TEST(Validate, FailureReasons) {
  EXPECT_EQ(validate_sequence({}).failure_reason, FailureReason::missing_sos);
  EXPECT_EQ(validate_sequence(seq({Token::shaft(0), Token::gear(0), Token::eos()})).failure_reason,
            FailureReason::missing_sos);
  EXPECT_EQ(validate_sequence(seq({Token::sos(), Token::shaft(0), Token::gear(0)})).failure_reason,
            FailureReason::missing_eos);
  EXPECT_EQ(validate_sequence(seq({Token::sos(), Token::shaft(0), Token::pad(), Token::eos()})).failure_reason,
            FailureReason::interior_pad);
  EXPECT_EQ(validate_sequence(seq({Token::sos(), Token::shaft(0), Token::eos()})).failure_reason,
            FailureReason::no_gear);

  DesignSequence longest{Token::sos()};
  for (int i = 0; i < kMaxStages; ++i) {
    longest.push_back(Token::shaft(0));
    longest.push_back(Token::gear(1));
  }
  longest.push_back(Token::eos());
  EXPECT_TRUE(is_valid(longest));
  EXPECT_EQ(longest.size(), static_cast<std::size_t>(kMaxSequenceLength));
  DesignSequence too_long = longest;
  too_long.insert(too_long.end() - 1, Token::shaft(0));
  EXPECT_EQ(validate_sequence(too_long).failure_reason, FailureReason::too_long);

  // Trailing padding after EOS is tolerated.
  DesignSequence padded = longest;
  padded.push_back(Token::pad());
  EXPECT_TRUE(is_valid(padded));
}

TEST(Validate, ValidIffReasonNone) {
  Rng rng = derive_rng(7, {1});
  for (int i = 0; i < 2000; ++i) {
    DesignSequence s;
    const int len = uniform_int(rng, 0, 12);
    for (int k = 0; k < len; ++k) s.push_back(*Token::from_id(uniform_int(rng, 0, kNumTokenIds - 1)));
    const auto r = validate_sequence(s);
    EXPECT_EQ(r.is_valid, r.failure_reason == FailureReason::none);
  }
}

TEST(RandomDesign, SingleStageCarriesForcedGear) {
  Rng rng = derive_rng(0, {});
  const auto s = random_design(rng, 1);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0], Token::sos());
  EXPECT_EQ(s[1].kind(), TokenKind::shaft);
  EXPECT_EQ(s[2].kind(), TokenKind::gear);
  EXPECT_EQ(s[3], Token::eos());
}

TEST(RandomDesign, TenThousandDrawsAreValid) {
  Rng rng = derive_rng(123, {});
  int gear_stages = 0, stages = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto s = random_design(rng, kMaxStages);
    ASSERT_TRUE(is_valid(s)) << failure_name(validate_sequence(s).failure_reason);
    for (auto t : s) {
      stages += t.kind() == TokenKind::shaft;
      gear_stages += t.kind() == TokenKind::gear;
    }
  }
  // Gear rate sits slightly above 0.7 because of the forced gear.
  const double rate = static_cast<double>(gear_stages) / stages;
  EXPECT_GT(rate, 0.69);
  EXPECT_LT(rate, 0.73);
}

TEST(RandomDesign, StageCountUniform) {
  Rng rng = derive_rng(5, {});
  std::vector<int> counts(5, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    int shafts = 0;
    for (auto t : random_design(rng, 5)) shafts += t.kind() == TokenKind::shaft;
    ++counts[static_cast<std::size_t>(shafts - 1)];
  }
  for (int c : counts) EXPECT_NEAR(c / static_cast<double>(draws), 0.2, 0.015);
}

TEST(RandomDesign, DeterministicAndRejectsBadStages) {
  Rng a = derive_rng(9, {2}), b = derive_rng(9, {2});
  EXPECT_EQ(random_design(a, 20), random_design(b, 20));
  EXPECT_THROW(random_design(a, 0), std::invalid_argument);
  EXPECT_THROW(random_design(a, 21), std::invalid_argument);
}
