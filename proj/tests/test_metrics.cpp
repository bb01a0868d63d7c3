#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "metric_oracles.hpp"
#include "support.hpp"

using namespace t2t;
using namespace t2t::testing;
using namespace t2t::oracles;

namespace {

Tokens toks(const std::string& s) { return tokenize(s); }

EvalCorpus corpus_of(std::vector<std::pair<std::string, std::vector<std::string>>> items) {
  EvalCorpus c;
  for (auto& [cand, refs] : items) {
    EvalItem it{toks(cand), {}};
    for (auto& r : refs) it.references.push_back(toks(r));
    c.push_back(std::move(it));
  }
  return c;
}

}  // namespace

TEST(Bleu, IdentityAndDisjoint) {
  EXPECT_DOUBLE_EQ(bleu4(corpus_of({{"the user plays a song", {"the user plays a song"}}})), 1.0);
  EXPECT_DOUBLE_EQ(bleu4(corpus_of({{"w x y z", {"a b c d"}}})), 0.0);
}

TEST(Bleu, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_corpus(rng);
    ASSERT_NEAR(bleu4(c), bleu_oracle(c), 1e-9) << "trial " << trial;
  }
}

TEST(Bleu, BrevityPenaltyUsesClosestReference) {
  // 4-token candidate, references of 3 and 6 tokens: closest is 3 so no penalty.
  const auto c = corpus_of({{"a b c d", {"a b c d e f", "a b c"}}});
  EXPECT_DOUBLE_EQ(bleu4(c), 1.0);
  const auto tie = corpus_of({{"a b c d", {"a b c d e", "a b c"}}});
  EXPECT_DOUBLE_EQ(bleu4(tie), 1.0);
  const auto short_c = corpus_of({{"a b c d", {"a b c d e f g h"}}});
  EXPECT_NEAR(bleu4(short_c), std::exp(1.0 - 8.0 / 4.0), 1e-12);
}

TEST(Bleu, SmoothingOnlyWhenRequested) {
  const auto c = corpus_of({{"a b x c", {"a b c d"}}});
  EXPECT_EQ(bleu4(c), 0.0);
  EXPECT_GT(bleu4(c, BleuOptions{true}), 0.0);
}

TEST(Meteor, ClosedFormIdentity) {
  const auto c = corpus_of({{"the user plays a song", {"the user plays a song"}}});
  EXPECT_NEAR(meteor(c), 0.996, 1e-3);
  EXPECT_NEAR(meteor(c), 1.0 - 0.5 / 125.0, 1e-12);
}

TEST(Meteor, ZeroMatchesAndStemStage) {
  EXPECT_EQ(meteor(corpus_of({{"x y z", {"a b c"}}})), 0.0);
  const double stemmed = meteor(corpus_of({{"running", {"run"}}}));
  EXPECT_GT(stemmed, 0.0);
  EXPECT_NEAR(stemmed, 0.5, 1e-12);
}

TEST(Meteor, ChunkPenaltyFromAlignment) {
  const auto a = detail::meteor_align(toks("a b c d"), toks("c d a b"));
  EXPECT_EQ(a.matches, 4u);
  EXPECT_EQ(a.chunks, 2u);
  EXPECT_NEAR(meteor(corpus_of({{"a b c d", {"c d a b"}}})), 1.0 - 0.5 * std::pow(0.5, 3), 1e-12);
}

TEST(Meteor, BestReferenceAndBounds) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_corpus(rng);
    const auto items = meteor_items(c);
    for (std::size_t i = 0; i < c.size(); ++i) {
      ASSERT_GE(items[i], 0.0);
      ASSERT_LE(items[i], 1.0);
      double best = 0;
      for (const auto& r : c[i].references) best = std::max(best, meteor_pair(c[i].candidate, r));
      ASSERT_DOUBLE_EQ(items[i], best);
    }
  }
}

TEST(RougeL, WorkedExample) {
  EXPECT_EQ(lcs_length(toks("a b c d"), toks("a c d e")), 3u);
  EXPECT_NEAR(rouge_l(corpus_of({{"a b c d", {"a c d e"}}})), 0.75, 1e-12);
  EXPECT_DOUBLE_EQ(rouge_l(corpus_of({{"a b", {"a b"}}})), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l(corpus_of({{"a b", {"c d"}}})), 0.0);
}

TEST(RougeL, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_corpus(rng);
    ASSERT_NEAR(rouge_l(c), rouge_oracle(c), 1e-9) << "trial " << trial;
  }
}

TEST(RougeL, AppendingMatchingTokenNeverLowersRecall) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = random_corpus(rng);
    const auto& ref = c[0].references[0];
    Tokens cand = c[0].candidate;
    const double before = double(lcs_length(cand, ref)) / ref.size();
    cand.push_back(ref[rng() % ref.size()]);
    ASSERT_GE(double(lcs_length(cand, ref)) / ref.size(), before);
  }
}

TEST(Cider, IdenticalDistinctItemsScoreTen) {
  const auto c = corpus_of({{"user plays loud music", {"user plays loud music"}},
                            {"watching a short video clip", {"watching a short video clip"}},
                            {"browsing shopping items now", {"browsing shopping items now"}}});
  for (double v : cider_items(c)) EXPECT_NEAR(v, 10.0, 1e-9);
  EXPECT_NEAR(cider(c), 10.0, 1e-9);
}

TEST(Cider, OrdersLongerThanCaptionContributeNothing) {
  const auto c = corpus_of({{"user plays music", {"user plays music"}}, {"open video app", {"open video app"}}});
  for (double v : cider_items(c)) EXPECT_NEAR(v, 7.5, 1e-9);
}

TEST(Cider, DisjointIsZeroAndNeedsTwoItems) {
  EXPECT_DOUBLE_EQ(cider(corpus_of({{"x y", {"a b"}}, {"z w", {"c d"}}})), 0.0);
  EXPECT_T2T_ERROR(cider(corpus_of({{"a", {"a"}}})), ErrorKind::TooFewItems);
}

TEST(Cider, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_corpus(rng);
    const auto got = cider_items(c), want = cider_oracle(c);
    for (std::size_t i = 0; i < c.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-9) << "trial " << trial;
  }
}

TEST(Cider, DistantReferencesChangeOnlyIdf) {
  // Item 0 is untouched; item 2's references change so "plays" df drops from 2 to 1.
  auto c = corpus_of({{"user plays loud music", {"user plays loud music"}},
                      {"open the video app", {"open the video app"}},
                      {"user plays a game", {"user plays a game"}}});
  const double before = cider_items(c)[0];
  c[2].references[0] = toks("browse shopping cart");
  const double after = cider_items(c)[0];
  EXPECT_NEAR(before, 10.0, 1e-9);
  EXPECT_NEAR(after, 10.0, 1e-9);
  // A candidate that matches partially does see the IDF shift.
  auto p = corpus_of({{"user plays", {"user plays loud music"}},
                      {"open the video app", {"open the video app"}},
                      {"user plays a game", {"user plays a game"}}});
  const double partial_before = cider_items(p)[0];
  p[2].references[0] = toks("browse shopping cart");
  EXPECT_NE(cider_items(p)[0], partial_before);
  EXPECT_NEAR(cider_items(p)[0], cider_oracle(p)[0], 1e-12);
}

TEST(Metrics, PermutationInvariant) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = random_corpus(rng);
    const auto a = score_corpus(c);
    std::shuffle(c.begin(), c.end(), rng);
    const auto b = score_corpus(c);
    ASSERT_NEAR(*a.bleu4, *b.bleu4, 1e-12);
    ASSERT_NEAR(*a.meteor, *b.meteor, 1e-12);
    ASSERT_NEAR(*a.rouge_l, *b.rouge_l, 1e-12);
    ASSERT_NEAR(*a.cider, *b.cider, 1e-9);
  }
}

TEST(Metrics, ReportBoundsAndSelection) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = score_corpus(random_corpus(rng));
    ASSERT_GE(*r.bleu4, 0.0);
    ASSERT_LE(*r.bleu4, 1.0);
    ASSERT_LE(*r.rouge_l, 1.0);
    ASSERT_GE(*r.cider, 0.0);
  }
  const auto only = score_corpus(corpus_of({{"a b", {"a b"}}, {"c d", {"c d"}}}), parse_metric_list("bleu4,cider"));
  EXPECT_TRUE(only.bleu4 && only.cider);
  EXPECT_FALSE(only.meteor || only.rouge_l);
  EXPECT_T2T_ERROR(parse_metric_list("bleu5"), ErrorKind::InvalidConfig);
  EXPECT_T2T_ERROR(make_corpus({"a"}, {}), ErrorKind::LengthMismatch);
  EXPECT_T2T_ERROR(bleu4(EvalCorpus{EvalItem{toks("a"), {}}}), ErrorKind::EmptyGold);
}

TEST(PorterStemmer, ReferenceVocabulary) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"caresses", "caress"}, {"ponies", "poni"},     {"cats", "cat"},          {"running", "run"},
      {"hopping", "hop"},     {"agreed", "agre"},     {"relational", "relat"},  {"conditional", "condit"},
      {"generalization", "gener"}, {"happy", "happi"}, {"sky", "sky"},          {"plays", "plai"},
      {"watching", "watch"},  {"is", "is"},           {"effective", "effect"},  {"adjustable", "adjust"}};
  for (const auto& [word, stem] : cases) EXPECT_EQ(porter_stem(word), stem) << word;
}
