#include <gtest/gtest.h>

#include <random>

#include "ifdenoise/selection.hpp"
#include "test_support.hpp"

namespace ifdenoise {
namespace {

using testing::clean_synthetic;
using testing::make_example;

std::vector<ScoreRecord> records(std::initializer_list<std::pair<const char*, double>> s) {
  std::vector<ScoreRecord> out;
  for (const auto& [id, v] : s) out.push_back({id, 0, v, Strategy::Cr2});
  return out;
}

TEST(SelectCandidates, Threshold) {
  auto s = records({{"a", 0.1}, {"b", -0.05}, {"c", -0.2}});
  EXPECT_EQ(select_candidates(s, 0.0), (IdSet{"a"}));
  EXPECT_EQ(select_candidates(s, 0.1), (IdSet{"a", "b"}));
}

TEST(SelectCandidates, ScoreExactlyMinusRExcluded) {
  EXPECT_TRUE(select_candidates(records({{"a", -0.25}}), 0.25).empty());
  EXPECT_TRUE(select_candidates(records({{"a", 0.0}}), 0.0).empty());
}

TEST(ApplyCap, Cases) {
  auto five = records({{"a", 1}, {"b", 2}, {"c", 3}, {"d", 4}, {"e", 5}});
  EXPECT_EQ(apply_cap({"a", "b", "c", "d", "e"}, five, 10), (IdSet{"a", "b", "c", "d", "e"}));

  std::vector<ScoreRecord> twenty;
  IdSet all;
  for (int i = 0; i < 20; ++i) {
    const std::string id = "x" + std::to_string(i);
    twenty.push_back({id, 0, static_cast<double>((i * 7) % 20), Strategy::Cr2});
    all.insert(id);
  }
  // (i * 7) % 20 is 19 at i=17 and 18 at i=14.
  EXPECT_EQ(apply_cap(all, twenty, 2), (IdSet{"x17", "x14"}));

  auto tie = records({{"b", 0.5}, {"a", 0.5}});
  EXPECT_EQ(apply_cap({"a", "b"}, tie, 1), (IdSet{"a"}));
  EXPECT_TRUE(apply_cap({"a", "b"}, tie, 0).empty());
}

TEST(SelectionCap, CeilOfFraction) {
  EXPECT_EQ(selection_cap(0.1, 30), 3u);
  EXPECT_EQ(selection_cap(0.1, 31), 4u);
  EXPECT_EQ(selection_cap(0.1, 0), 0u);
  EXPECT_EQ(selection_cap(1.0, 7), 7u);
}

TEST(RecordAndVote, StrictMajority) {
  VoteLedger ledger;
  EXPECT_TRUE(record_and_vote(ledger, {}, 3).empty());
  for (int t = 0; t < 3; ++t) EXPECT_TRUE(record_and_vote(ledger, {"a"}, 3).empty());
  EXPECT_EQ(ledger.count("a"), 3);
  EXPECT_EQ(record_and_vote(ledger, {"a", "b"}, 3), (IdSet{"a"}));
  // Already promoted ids are not handed out again.
  EXPECT_TRUE(record_and_vote(ledger, {"a"}, 3).empty());
  EXPECT_EQ(ledger.count("a"), 5);
}

TEST(RecordAndVote, KZeroSelectsImmediately) {
  VoteLedger ledger;
  EXPECT_EQ(record_and_vote(ledger, {"a", "b"}, 0), (IdSet{"a", "b"}));
}

TEST(ConfidenceSelect, RankingThresholdAndCap) {
  ModelParams p(Backend::Linear, 1);
  p.flat() << 0, 0, 1, 0;  // logit difference = x
  Dataset d(1);
  d.add(make_example("hi", Eigen::VectorXd::Constant(1, std::log(99.0)), 1));  // p1 = 0.99
  d.add(make_example("mid", Eigen::VectorXd::Constant(1, std::log(1.5)), 1));  // p1 = 0.6
  d.add(make_example("low", Eigen::VectorXd::Constant(1, -1.0), 1));
  d.add(make_example("neg", Eigen::VectorXd::Constant(1, -5.0), 0));
  auto [sel1, scores] = confidence_select(p, d, 1);
  EXPECT_EQ(sel1, (IdSet{"hi"}));
  EXPECT_EQ(scores.size(), 3u);
  EXPECT_NEAR(scores[0].score, 0.99, 1e-12);
  EXPECT_EQ(confidence_select(p, d, 10).first, (IdSet{"hi", "mid"}));

  Dataset unsure(1);
  unsure.add(make_example("u", Eigen::VectorXd::Constant(1, -0.1), 1));
  EXPECT_TRUE(confidence_select(p, unsure, 10).first.empty());
}

TEST(ConfidenceSelect, SharesCapSemanticsWithApplyCap) {
  ModelParams p(Backend::Linear, 1);
  p.flat() << 0, 0, 1, 0;
  Dataset d(1);
  for (int i = 0; i < 12; ++i)
    d.add(make_example("c" + std::to_string(i), Eigen::VectorXd::Constant(1, 1.0 + (i % 4)), 1));
  auto [sel, scores] = confidence_select(p, d, 5);
  EXPECT_EQ(sel, apply_cap(select_candidates(scores, 0.0), scores, 5));
  EXPECT_EQ(sel.size(), 5u);
}

TEST(UpdateSets, Cases) {
  Dataset all = clean_synthetic(10, 1);
  Dataset c = all.subset({"z000000", "z000001"});
  Dataset d = all.subset({"z000000", "z000001"}, true);
  auto [c1, d1] = update_sets(c, d, {});
  EXPECT_EQ(c1, c);
  EXPECT_EQ(d1, d);
  auto [c2, d2] = update_sets(c, d, d.ids());
  EXPECT_TRUE(d2.empty());
  EXPECT_EQ(c2.size(), 10u);
  EXPECT_THROW(update_sets(c, d, {"z000000"}), Error);
  EXPECT_THROW(update_sets(c, d, {"nope"}), Error);
}

TEST(SelectionConfig, Validation) {
  SelectionConfig s;
  EXPECT_NO_THROW(s.validate());
  s.cap_fraction = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.k = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.relaxation = -0.1;
  EXPECT_THROW(s.validate(), ConfigError);
}

// Random multi-iteration selection runs over a dirty pool; every invariant is
// checked after each step.
TEST(SelectionProperty, ConservationDisjointnessMonotonicityCapStrictness) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    Dataset all = clean_synthetic(40 + trial, 1000 + trial, 2);
    IdSet seed_ids;
    for (std::size_t i = 0; i < 5; ++i) seed_ids.insert(all[i].id);
    Dataset c = all.subset(seed_ids), d = all.subset(seed_ids, true);
    const std::size_t total = all.size();
    const int k = static_cast<int>(rng() % 4);
    const double r = (rng() % 3) * 0.05;
    const double frac = 0.05 + 0.3 * std::uniform_real_distribution<double>()(rng);
    VoteLedger ledger;
    std::map<std::string, int> prev_counts;
    for (int t = 0; t < 8; ++t) {
      std::vector<ScoreRecord> scores;
      std::uniform_int_distribution<int> pick(-4, 4);
      for (const auto& z : d) {
        if (z.label == 1) scores.push_back({z.id, t, pick(rng) * 0.05, Strategy::Cr2});
      }
      IdSet cand = select_candidates(scores, r);
      for (const auto& s : scores) {
        EXPECT_EQ(cand.count(s.example_id) == 1, s.score + r > 0.0);
      }
      const std::size_t cap = selection_cap(frac, d.size());
      IdSet capped = apply_cap(cand, scores, cap);
      EXPECT_LE(capped.size(), cap);
      for (const auto& id : capped) EXPECT_TRUE(cand.count(id));
      IdSet promote = record_and_vote(ledger, capped, k);
      for (const auto& id : promote) EXPECT_GT(ledger.count(id), k);
      for (const auto& [id, n] : ledger.counts()) {
        EXPECT_LE(n, ledger.iteration());
        EXPECT_GE(n, prev_counts[id]);
      }
      prev_counts = ledger.counts();
      auto [c2, d2] = update_sets(c, d, promote);
      EXPECT_EQ(c2.size() + d2.size(), total);
      for (const auto& z : c) EXPECT_TRUE(c2.contains(z.id));
      for (const auto& z : d2) EXPECT_FALSE(c2.contains(z.id));
      c = std::move(c2);
      d = std::move(d2);
    }
  }
}

}  // namespace
}  // namespace ifdenoise
