#include <gtest/gtest.h>

#include "support.hpp"

using namespace t2t;

namespace {

std::string serialize(const std::vector<SynthSample>& samples) {
  std::vector<DatasetRecord> recs;
  for (const auto& s : samples) recs.push_back({s.sequence, s.caption, s.app_type, {}, ""});
  std::ostringstream os;
  write_dataset_jsonl(os, recs);
  return os.str();
}

double mean_flow_bytes(const std::vector<SynthSample>& samples, int type) {
  double bytes = 0, flows = 0;
  for (const auto& s : samples) {
    if (s.app_type != type) continue;
    for (std::size_t r = 0; r < s.sequence.rows(); ++r) {
      if (!s.sequence.mask[r]) continue;
      bytes += s.sequence.features[r][features::kVolume + 2 * 4 + 1];
      flows += 1;
    }
  }
  return bytes / flows;
}

}  // namespace

TEST(Synth, SameSeedIsByteIdentical) {
  const auto a = generate(default_profiles(), 6, 11), b = generate(default_profiles(), 6, 11);
  EXPECT_EQ(a, b);
  EXPECT_EQ(serialize(a), serialize(b));
  EXPECT_NE(serialize(a), serialize(generate(default_profiles(), 6, 12)));
}

TEST(Synth, BalancedAcrossTypes) {
  const auto s = generate(default_profiles(), 10, 0);
  ASSERT_EQ(s.size(), 50u);
  std::map<int, int> counts;
  for (const auto& x : s) ++counts[x.app_type];
  for (int k = 0; k < kNumAppTypes; ++k) EXPECT_EQ(counts[k], 10) << k;
}

TEST(Synth, SequencesSatisfyFeatureInvariants) {
  std::set<std::string> ids;
  for (const auto& s : generate(default_profiles(), 40, 5)) {
    ASSERT_NO_THROW(validate_sequence(s.sequence, kMaxFlows, features::kDim));
    ASSERT_GE(s.sequence.valid_count(), 1u);
    ASSERT_TRUE(ids.insert(s.sequence.segment_id).second);
    ASSERT_FALSE(s.caption.empty());
  }
}

TEST(Synth, SampleReproducesFromItsSeed) {
  const auto profiles = default_profiles();
  for (const auto& s : generate(profiles, 4, 21)) {
    const auto again = synth_sample(profiles[s.app_type], s.action, s.seed, s.sequence.segment_start,
                                    s.sequence.segment_id);
    ASSERT_EQ(again, s);
  }
}

TEST(Synth, VideoFlowsCarryMoreBytesThanMessaging) {
  const auto s = generate(default_profiles(), 1000, 3);
  const double video = mean_flow_bytes(s, app_type_index("video"));
  const double messaging = mean_flow_bytes(s, app_type_index("messaging"));
  EXPECT_GT(video, messaging);
}

TEST(Synth, CaptionsComeFromTheProfileTemplates) {
  const auto profiles = default_profiles();
  for (const auto& s : generate(profiles, 8, 1)) {
    const auto vocab = profile_vocabulary(profiles[s.app_type]);
    for (const auto& tok : tokenize(s.caption)) ASSERT_TRUE(vocab.count(tok)) << tok;
  }
}

TEST(Synth, TemplateVocabulariesOverlapLessThanHalf) {
  const auto profiles = default_profiles();
  for (std::size_t a = 0; a < profiles.size(); ++a) {
    for (std::size_t b = a + 1; b < profiles.size(); ++b) {
      const auto va = profile_vocabulary(profiles[a]), vb = profile_vocabulary(profiles[b]);
      std::size_t shared = 0;
      for (const auto& w : va) shared += vb.count(w);
      EXPECT_LT(static_cast<double>(shared) / std::min(va.size(), vb.size()), 0.5) << a << " vs " << b;
    }
  }
}

TEST(Separability, IdenticalProfilesAreNearChance) {
  auto profiles = default_profiles();
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    const int type = static_cast<int>(k);
    profiles[k] = default_profiles()[2];
    profiles[k].app_type = type;
  }
  const double acc = separability_report(generate(profiles, 100, 8));
  EXPECT_NEAR(acc, 1.0 / kNumAppTypes, 0.1);
}

TEST(Separability, DisjointFeaturesArePerfect) {
  std::mt19937_64 rng(2);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) {
    const int k = i % 4;
    x.push_back({10.0 * k + static_cast<double>(rng() % 100) / 100.0, -5.0 * k + static_cast<double>(rng() % 7) / 10.0});
    y.push_back(k);
  }
  EXPECT_DOUBLE_EQ(separability_report(x, y), 1.0);
}

TEST(Separability, DefaultProfilesAreLearnable) {
  EXPECT_GE(separability_report(generate(default_profiles(), 100, 0)), 0.9);
}

TEST(Separability, NeedsTwoTypes) {
  EXPECT_T2T_ERROR(separability_report({{1.0}, {2.0}}, {0, 0}), ErrorKind::TooFewTypes);
  auto one = default_profiles();
  one.resize(1);
  EXPECT_T2T_ERROR(separability_report(generate(one, 5, 0)), ErrorKind::TooFewTypes);
}

TEST(Synth, InvalidProfilesRejected) {
  auto check = [](auto mutate) {
    auto p = default_profiles();
    mutate(p[0]);
    EXPECT_T2T_ERROR(generate(p, 2, 0), ErrorKind::InvalidProfile);
  };
  check([](AppProfile& p) { p.templates.resize(2); });
  check([](AppProfile& p) { p.up_size_sd = 0; });
  check([](AppProfile& p) { p.flows_max = p.flows_min - 1; });
  check([](AppProfile& p) { p.templates[0] = "no slots here"; });
  check([](AppProfile& p) { p.actions.clear(); });
  check([](AppProfile& p) { p.burstiness = 1.5; });
  EXPECT_T2T_ERROR(generate(default_profiles(), 0, 0), ErrorKind::InvalidConfig);
}

TEST(Synth, SplitsKeepSchemaAndPartition) {
  const HashedNgramEmbedder e(32);
  const auto samples = generate(default_profiles(), 20, 4);
  const auto s = synth_splits(samples, SplitFractions{}, 4, e);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  EXPECT_NO_THROW(check_no_leakage(s));
  EXPECT_EQ(s.train.front().caption_embedding.size(), 32u);
}
