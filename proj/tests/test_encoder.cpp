#include <gtest/gtest.h>

#include "support.hpp"

using namespace t2t;
using namespace t2t::testing;

namespace {

EncoderConfig small_encoder() { return tiny_config().encoder; }

struct Input {
  Mat x;
  std::vector<bool> mask;
};

Input random_input(const EncoderConfig& cfg, std::mt19937_64& rng, int valid = -1) {
  if (valid < 0) valid = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.max_flows));
  Input in{random_matrix(cfg.max_flows, cfg.input_dim, rng), prefix_mask(cfg.max_flows, valid)};
  for (int r = valid; r < cfg.max_flows; ++r) in.x.row(r).setZero();
  return in;
}

double max_abs(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(FeatureEncoder, PaperDefaultShapes) {
  RunConfig cfg;
  std::mt19937_64 rng(0);
  FeatureEncoder<float> enc(cfg.encoder, Matrix<float>::Zero(5, 64), rng);
  EXPECT_EQ(enc.prototypes.value.rows(), 25);
  EXPECT_EQ(enc.prototypes.value.cols(), 512);
  EXPECT_EQ(enc.input_proj.weight.value.rows(), 123);
  EXPECT_EQ(enc.pattern_fc.out_features(), 256);
  EXPECT_EQ(enc.type_embedding.value.rows(), 5);
  EXPECT_EQ(enc.type_embedding.value.cols(), 64);
  EXPECT_FALSE(enc.type_embedding.trainable);
}

TEST(FeatureEncoder, ProbabilityInvariantsOnRandomInputs) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = small_encoder();
    auto enc = make_encoder(cfg, trial);
    const auto in = random_input(cfg, rng);
    const auto out = enc.encode_values(in.x, in.mask);
    ASSERT_NEAR(out.p.sum(), 1.0, 1e-6);
    ASSERT_GE(out.p.minCoeff(), 0.0);
    ASSERT_NEAR(out.alpha_weights.sum(), 1.0, 1e-6);
    ASSERT_GE(out.alpha_weights.minCoeff(), 0.0);
    ASSERT_EQ(out.k_hat, argmax_lowest(out.p.row(0)));
    ASSERT_EQ(out.conditioning_index, out.k_hat);
    ASSERT_EQ(out.F.rows(), cfg.max_flows);
    ASSERT_EQ(out.F.cols(), cfg.hidden_dim);
    ASSERT_EQ(out.b_tilde.cols(), cfg.pattern_dim);
    ASSERT_TRUE(out.F.allFinite() && out.b_tilde.allFinite());
  }
}

TEST(FeatureEncoder, PaddingValuesDoNotMatter) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = small_encoder();
    auto enc = make_encoder(cfg, 100 + trial);
    auto in = random_input(cfg, rng, 1 + trial % (cfg.max_flows - 1));
    const auto base = enc.encode_values(in.x, in.mask);
    Mat noisy = in.x;
    for (int r = 0; r < cfg.max_flows; ++r)
      if (!in.mask[r]) noisy.row(r) = random_matrix(1, cfg.input_dim, rng, 10.0);
    const auto other = enc.encode_values(noisy, in.mask);
    ASSERT_LT(max_abs(base.F, other.F), 1e-6);
    ASSERT_LT(max_abs(base.p, other.p), 1e-6);
    ASSERT_LT(max_abs(base.b_tilde, other.b_tilde), 1e-6);
  }
}

TEST(FeatureEncoder, DeterministicInference) {
  std::mt19937_64 rng(3);
  auto cfg = small_encoder();
  cfg.dropout = 0.3;
  auto enc = make_encoder(cfg, 7);
  const auto in = random_input(cfg, rng);
  const auto a = enc.encode_values(in.x, in.mask), b = enc.encode_values(in.x, in.mask);
  EXPECT_EQ(a.p, b.p);
  EXPECT_EQ(a.b_tilde, b.b_tilde);
  EXPECT_EQ(a.F, b.F);
}

TEST(FeatureEncoder, SingleValidRowPoolsToItself) {
  std::mt19937_64 rng(4);
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 8);
  const auto in = random_input(cfg, rng, 1);
  Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const auto g = enc.encode(ctx, tape.constant(in.x), in.mask);
  EXPECT_LT(max_abs(g.pooled.value(), g.unconditional.value().row(0)), 1e-12);
  EXPECT_LT(max_abs(g.f_global.value(), g.F.value().row(0)), 1e-12);
}

TEST(FeatureEncoder, FilmIdentityAndAffine) {
  std::mt19937_64 rng(5);
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 9);
  const auto mask = prefix_mask(cfg.max_flows, 3);
  const Mat x = random_matrix(cfg.max_flows, cfg.hidden_dim, rng);
  auto run = [&](double gamma, double beta) {
    enc.film_gamma.weight.value.setZero();
    enc.film_gamma.bias.value.setConstant(gamma);
    enc.film_beta.weight.value.setZero();
    enc.film_beta.bias.value.setConstant(beta);
    Tape<double> tape(false);
    nn::Context<double> ctx{tape, nullptr};
    return Mat(enc.film_modulate(ctx, tape.constant(x), 2, mask).value());
  };
  const Mat identity = run(1.0, 0.0);
  const Mat affine = run(2.0, 1.0);
  for (int r = 0; r < cfg.max_flows; ++r) {
    if (mask[r]) {
      EXPECT_LT((identity.row(r) - x.row(r)).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LT((affine.row(r) - (2.0 * x.row(r)).array().matrix() - Mat::Ones(1, cfg.hidden_dim)).cwiseAbs().maxCoeff(),
                1e-12);
    } else {
      EXPECT_EQ(identity.row(r).cwiseAbs().maxCoeff(), 0.0);
      EXPECT_EQ(affine.row(r).cwiseAbs().maxCoeff(), 0.0);
    }
  }
}

TEST(FeatureEncoder, FilmDependsOnTypeRow) {
  std::mt19937_64 rng(6);
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 10);
  const auto mask = prefix_mask(cfg.max_flows, cfg.max_flows);
  const Mat x = random_matrix(cfg.max_flows, cfg.hidden_dim, rng);
  Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const Mat a = enc.film_modulate(ctx, tape.constant(x), 0, mask).value();
  const Mat b = enc.film_modulate(ctx, tape.constant(x), 1, mask).value();
  EXPECT_GT(max_abs(a, b), 0.0);
  EXPECT_T2T_ERROR(enc.film_modulate(ctx, tape.constant(x), 5, mask), ErrorKind::IndexOutOfRange);
  EXPECT_T2T_ERROR(enc.film_modulate(ctx, tape.constant(x), -1, mask), ErrorKind::IndexOutOfRange);
}

TEST(FeatureEncoder, SinglePrototypeGetsAllWeight) {
  std::mt19937_64 rng(7);
  auto cfg = small_encoder();
  cfg.prototypes_per_type = 1;
  auto enc = make_encoder(cfg, 11);
  Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  auto [alpha, b] = enc.prototype_attend(ctx, tape.constant(random_matrix(1, cfg.hidden_dim, rng)), 3);
  EXPECT_DOUBLE_EQ(alpha.value()(0, 0), 1.0);
  EXPECT_LT(max_abs(b.value(), enc.prototype_block(3)), 1e-12);
}

TEST(FeatureEncoder, IdenticalPrototypesGiveUniformWeights) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = small_encoder();
    auto enc = make_encoder(cfg, 200 + trial);
    const Mat proto = random_matrix(1, cfg.hidden_dim, rng);
    const int k = trial % cfg.num_app_types;
    for (int m = 0; m < cfg.prototypes_per_type; ++m) enc.prototypes.value.row(k * cfg.prototypes_per_type + m) = proto;
    Tape<double> tape(false);
    nn::Context<double> ctx{tape, nullptr};
    auto [alpha, b] = enc.prototype_attend(ctx, tape.constant(random_matrix(1, cfg.hidden_dim, rng)), k);
    for (int m = 0; m < cfg.prototypes_per_type; ++m)
      ASSERT_NEAR(alpha.value()(0, m), 1.0 / cfg.prototypes_per_type, 1e-6);
    ASSERT_LT(max_abs(b.value(), proto), 1e-12);
  }
}

TEST(FeatureEncoder, AlignedGlobalFeatureConcentratesAttention) {
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 12);
  const int M = cfg.prototypes_per_type, H = cfg.hidden_dim;
  enc.prototypes.value.setZero();
  for (int m = 0; m < M; ++m) enc.prototypes.value(M + m, m) = 1.0;  // orthonormal rows for type 1
  double previous = 0.0;
  for (double c : {1.0, 10.0, 100.0}) {
    Mat f = Mat::Zero(1, H);
    f(0, 0) = c;
    Tape<double> tape(false);
    nn::Context<double> ctx{tape, nullptr};
    const double a1 = enc.prototype_attend(ctx, tape.constant(f), 1).first.value()(0, 0);
    const double e = std::exp(c / std::sqrt(double(H)));
    EXPECT_NEAR(a1, e / (e + (M - 1)), 1e-12) << "c=" << c;
    EXPECT_GT(a1, previous);
    previous = a1;
  }
  EXPECT_GT(previous, 0.99);
}

TEST(FeatureEncoder, ZeroBlendFeedsGlobalFeatureToFc) {
  std::mt19937_64 rng(9);
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 13);
  enc.blend_logit.value(0, 0) = -1e4;
  Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const Mat f = random_matrix(1, cfg.hidden_dim, rng), b = random_matrix(1, cfg.hidden_dim, rng);
  auto [blend, out] = enc.fuse_pattern(ctx, tape.constant(b), tape.constant(f));
  EXPECT_EQ(blend.value(), f);
  EXPECT_EQ(out.value().cols(), cfg.pattern_dim);
}

TEST(FeatureEncoder, OverrideSelectsConditioningRow) {
  std::mt19937_64 rng(10);
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 14);
  const auto in = random_input(cfg, rng);
  const auto free = enc.encode_values(in.x, in.mask);
  const int other = (free.k_hat + 1) % cfg.num_app_types;
  const auto forced = enc.encode_values(in.x, in.mask, other);
  EXPECT_EQ(forced.conditioning_index, other);
  EXPECT_EQ(forced.k_hat, free.k_hat);
  EXPECT_EQ(forced.p, free.p);
  EXPECT_GT(max_abs(forced.F, free.F), 0.0);

  // Identical to conditioning explicitly on the predicted type.
  const auto same = enc.encode_values(in.x, in.mask, free.k_hat);
  EXPECT_EQ(same.F, free.F);
  EXPECT_EQ(same.b_tilde, free.b_tilde);
}

TEST(FeatureEncoder, RejectsWrongFeatureWidth) {
  auto cfg = small_encoder();
  auto enc = make_encoder(cfg, 15);
  EXPECT_T2T_ERROR(enc.encode_values(Mat::Zero(cfg.max_flows, cfg.input_dim + 1), prefix_mask(cfg.max_flows, 1)),
                   ErrorKind::ShapeMismatch);
}

TEST(FeatureEncoder, AblationsSkipStages) {
  std::mt19937_64 rng(11);
  auto cfg = small_encoder();
  cfg.use_dfm = false;
  cfg.use_fppl = false;
  auto enc = make_encoder(cfg, 16);
  const auto in = random_input(cfg, rng);
  Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const auto g = enc.encode(ctx, tape.constant(in.x), in.mask);
  EXPECT_FALSE(g.modulated.valid());
  EXPECT_FALSE(g.alpha.valid());
  EXPECT_EQ(g.F.value(), g.unconditional.value());
  EXPECT_EQ(g.b_tilde.cols(), cfg.pattern_dim);
}

TEST(FeatureEncoderGradients, PatternEmbeddingLoss) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto cfg = small_encoder();
    auto enc = make_encoder(cfg, seed);
    enc.blend_logit.value(0, 0) = 0.3;
    const auto in = random_input(cfg, rng, 3);
    const Mat w = random_matrix(1, cfg.pattern_dim, rng);
    auto build = [&](Tape<double>& tape) {
      nn::Context<double> ctx{tape, nullptr};
      auto g = enc.encode(ctx, tape.constant(in.x), in.mask, 1);
      return ag::sum_all(ag::mul(g.b_tilde, tape.constant(w)));
    };
    auto loss = [&] {
      Tape<double> tape(false);
      return build(tape).scalar();
    };
    auto analytic = [&] {
      for (auto* p : [&] { nn::ParamRefs<double> r; enc.collect(r); return r; }()) p->zero_grad();
      Tape<double> tape(true);
      tape.backward(build(tape));
    };
    for (auto* p : {&enc.prototypes, &enc.film_gamma.weight, &enc.film_beta.weight, &enc.input_proj.weight,
                    &enc.blend_logit, &enc.pattern_fc.weight}) {
      EXPECT_LT(gradient_error(*p, loss, analytic, rng), 1e-3) << p->name << " seed " << seed;
    }
  }
}
