#pragma once

// Flow feature encoder: unconditional transformer + app-type head, FiLM
// modulation on the type embedding, conditional transformer, and
// per-type prototype attention fused into the pattern embedding.

#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "t2t/autograd.hpp"
#include "t2t/config.hpp"
#include "t2t/nn.hpp"

namespace t2t {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;

inline const std::vector<std::string>& app_type_labels() {
  static const std::vector<std::string> labels = {"music", "video", "shopping", "messaging", "social media"};
  return labels;
}

inline int app_type_index(const std::string& label) {
  const auto& labels = app_type_labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<int>(i);
  }
  fail(ErrorKind::IndexOutOfRange, "unknown app type: " + label);
}

/// Plain-value result of a full encoder pass.
template <class T>
struct EncodedTraffic {
  Matrix<T> F;            // S x H
  Matrix<T> f_global;     // 1 x H
  Matrix<T> p;            // 1 x K
  int k_hat = 0;
  int conditioning_index = 0;  // row of E / prototype group actually used
  Matrix<T> b_tilde;      // 1 x H'
  Matrix<T> alpha_weights;  // 1 x M (empty without prototypes)
  std::vector<bool> mask;
};

/// Graph handles of a full encoder pass, for training.
template <class T>
struct EncoderGraph {
  Var<T> unconditional;  // T'' (S x H)
  Var<T> pooled;         // Mean(T'') (1 x H)
  Var<T> p;              // 1 x K
  Var<T> modulated;      // T~ (S x H); invalid without DFM
  Var<T> F;
  Var<T> f_global;
  Var<T> alpha;          // 1 x M; invalid without FPPL
  Var<T> b;              // 1 x H; invalid without FPPL
  Var<T> blend;          // FC input of the fusion step
  Var<T> b_tilde;
  int k_hat = 0;
  int conditioning_index = 0;
};

inline int argmax_lowest(const auto& row) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(row.size()); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

template <class T>
struct FeatureEncoder {
  EncoderConfig cfg;
  nn::Linear<T> input_proj;
  nn::TransformerEncoder<T> unconditional_tf;
  nn::Linear<T> app_head;
  Parameter<T> type_embedding;  // K x L, frozen
  nn::Linear<T> film_gamma;
  nn::Linear<T> film_beta;
  nn::TransformerEncoder<T> conditional_tf;
  Parameter<T> prototypes;      // (K * M) x H, group k occupies rows [k*M, (k+1)*M)
  Parameter<T> blend_logit;     // 1 x 1; alpha = sigmoid(blend_logit)
  nn::LayerNorm<T> pattern_norm;
  nn::Linear<T> pattern_fc;
  nn::LayerNorm<T> pattern_out_norm;

  FeatureEncoder() = default;

  FeatureEncoder(const EncoderConfig& c, const Matrix<T>& type_rows, std::mt19937_64& rng) : cfg(c) {
    cfg.validate();
    require(type_rows.rows() == cfg.num_app_types && type_rows.cols() == cfg.embed_dim, ErrorKind::ShapeMismatch,
            "type embedding must be K x L");
    const int H = cfg.hidden_dim;
    const T drop = static_cast<T>(cfg.dropout);
    input_proj = nn::Linear<T>("encoder.input_proj", cfg.input_dim, H, rng);
    unconditional_tf = nn::TransformerEncoder<T>("encoder.unconditional", cfg.max_flows, H, cfg.transformer_layers,
                                                 cfg.attention_heads, cfg.ffn_width(), drop, rng);
    app_head = nn::Linear<T>("encoder.app_head", H, cfg.num_app_types, rng);
    type_embedding = Parameter<T>("encoder.type_embedding", cfg.num_app_types, cfg.embed_dim, false);
    type_embedding.value = type_rows;
    film_gamma = nn::Linear<T>("encoder.film_gamma", cfg.embed_dim, H, rng);
    film_beta = nn::Linear<T>("encoder.film_beta", cfg.embed_dim, H, rng);
    // gamma starts at 1 + W e so modulation begins near identity.
    film_gamma.bias.value.setOnes();
    conditional_tf = nn::TransformerEncoder<T>("encoder.conditional", cfg.max_flows, H, cfg.transformer_layers,
                                               cfg.attention_heads, cfg.ffn_width(), drop, rng);
    prototypes = Parameter<T>("encoder.prototypes", cfg.num_app_types * cfg.prototypes_per_type, H);
    // Xavier over each type's M x H block.
    for (int k = 0; k < cfg.num_app_types; ++k) {
      Matrix<T> block(cfg.prototypes_per_type, H);
      nn::xavier_uniform(block, cfg.prototypes_per_type, H, rng);
      prototypes.value.middleRows(k * cfg.prototypes_per_type, cfg.prototypes_per_type) = block;
    }
    blend_logit = Parameter<T>("encoder.blend_logit", 1, 1);
    pattern_norm = nn::LayerNorm<T>("encoder.pattern_norm", H);
    pattern_fc = nn::Linear<T>("encoder.pattern_fc", H, cfg.pattern_dim, rng);
    pattern_out_norm = nn::LayerNorm<T>("encoder.pattern_out_norm", cfg.pattern_dim);
  }

  /// Prototype block P_k as an M x H view of the bank.
  Matrix<T> prototype_block(int k) const {
    return prototypes.value.middleRows(k * cfg.prototypes_per_type, cfg.prototypes_per_type);
  }

  void check_type(int k) const {
    require(k >= 0 && k < cfg.num_app_types, ErrorKind::IndexOutOfRange,
            "app type index " + std::to_string(k) + " outside [0, " + std::to_string(cfg.num_app_types) + ")");
  }

  struct Unconditional {
    Var<T> encoded;
    Var<T> pooled;
    Var<T> p;
    int k_hat = 0;
  };

  Unconditional unconditional_encode(nn::Context<T>& ctx, const Var<T>& input, const std::vector<bool>& mask) {
    require(input.cols() == cfg.input_dim, ErrorKind::ShapeMismatch,
            "feature dimension " + std::to_string(input.cols()) + " does not match model input_dim " +
                std::to_string(cfg.input_dim));
    require(input.rows() == cfg.max_flows, ErrorKind::ShapeMismatch,
            "sequence length " + std::to_string(input.rows()) + " does not match max_flows " +
                std::to_string(cfg.max_flows));
    auto& tape = ctx.tape;
    Var<T> projected = ag::mask_rows(input_proj(tape, input), mask);
    Unconditional out;
    out.encoded = unconditional_tf(ctx, projected, mask);
    out.pooled = ag::masked_mean_rows(out.encoded, mask);
    out.p = ag::softmax_rows(app_head(tape, out.pooled));
    out.k_hat = argmax_lowest(out.p.value().row(0));
    return out;
  }

  /// gamma = FC_gamma(E[k]), beta = FC_beta(E[k]); row s -> gamma * t_s + beta.
  Var<T> film_modulate(nn::Context<T>& ctx, const Var<T>& encoded, int type_index, const std::vector<bool>& mask) {
    check_type(type_index);
    auto& tape = ctx.tape;
    Var<T> e = tape.constant(type_embedding.value.row(type_index));
    Var<T> gamma = film_gamma(tape, e);
    Var<T> beta = film_beta(tape, e);
    return ag::mask_rows(ag::add_row(ag::mul_row(encoded, gamma), beta), mask);
  }

  std::pair<Var<T>, Var<T>> conditional_encode(nn::Context<T>& ctx, const Var<T>& modulated,
                                               const std::vector<bool>& mask) {
    require(modulated.cols() == cfg.hidden_dim, ErrorKind::ShapeMismatch, "conditional_encode: width must be H");
    Var<T> F = conditional_tf(ctx, modulated, mask);
    return {F, ag::masked_mean_rows(F, mask)};
  }

  /// alpha_m = softmax_m(f . p_{k,m} / sqrt(H)); b = sum_m alpha_m p_{k,m}.
  std::pair<Var<T>, Var<T>> prototype_attend(nn::Context<T>& ctx, const Var<T>& f_global, int type_index) {
    check_type(type_index);
    Var<T> block = ag::slice_rows(ctx.tape.param(prototypes), type_index * cfg.prototypes_per_type,
                                  cfg.prototypes_per_type);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg.hidden_dim));
    Var<T> alpha = ag::softmax_rows(ag::scale(ag::matmul_bt(f_global, block), inv_sqrt));
    return {alpha, ag::matmul(alpha, block)};
  }

  /// b' = LN(b + f); b~ = Dropout(LN(FC(a b' + (1 - a) f))). Returns {blend, b~}.
  std::pair<Var<T>, Var<T>> fuse_pattern(nn::Context<T>& ctx, const Var<T>& b, const Var<T>& f_global) {
    auto& tape = ctx.tape;
    Var<T> b_prime = pattern_norm(tape, ag::add(b, f_global));
    Var<T> a = ag::sigmoid(tape.param(blend_logit));
    Var<T> one_minus_a = ag::add_scalar(ag::scale(a, T(-1)), T(1));
    Var<T> blend = ag::add(ag::scale_by(b_prime, a), ag::scale_by(f_global, one_minus_a));
    Var<T> out = pattern_out_norm(tape, pattern_fc(tape, blend));
    return {blend, ag::dropout(out, static_cast<T>(cfg.dropout), ctx.rng)};
  }

  /// Pattern embedding when prototypes are disabled: Dropout(LN(FC(f))).
  Var<T> plain_pattern(nn::Context<T>& ctx, const Var<T>& f_global) {
    auto& tape = ctx.tape;
    Var<T> out = pattern_out_norm(tape, pattern_fc(tape, f_global));
    return ag::dropout(out, static_cast<T>(cfg.dropout), ctx.rng);
  }

  EncoderGraph<T> encode(nn::Context<T>& ctx, const Var<T>& input, const std::vector<bool>& mask,
                         std::optional<int> override_type = std::nullopt) {
    if (override_type) check_type(*override_type);
    EncoderGraph<T> g;
    auto u = unconditional_encode(ctx, input, mask);
    g.unconditional = u.encoded;
    g.pooled = u.pooled;
    g.p = u.p;
    g.k_hat = u.k_hat;
    g.conditioning_index = override_type.value_or(u.k_hat);
    if (cfg.use_dfm) {
      g.modulated = film_modulate(ctx, u.encoded, g.conditioning_index, mask);
      std::tie(g.F, g.f_global) = conditional_encode(ctx, g.modulated, mask);
    } else {
      g.F = u.encoded;
      g.f_global = u.pooled;
    }
    if (cfg.use_fppl) {
      std::tie(g.alpha, g.b) = prototype_attend(ctx, g.f_global, g.conditioning_index);
      std::tie(g.blend, g.b_tilde) = fuse_pattern(ctx, g.b, g.f_global);
    } else {
      g.blend = g.f_global;
      g.b_tilde = plain_pattern(ctx, g.f_global);
    }
    return g;
  }

  /// Inference-mode pass on a prepared S x D input.
  EncodedTraffic<T> encode_values(const Matrix<T>& input, const std::vector<bool>& mask,
                                  std::optional<int> override_type = std::nullopt) {
    Tape<T> tape(false);
    nn::Context<T> ctx{tape, nullptr};
    auto g = encode(ctx, tape.constant(input), mask, override_type);
    EncodedTraffic<T> out;
    out.F = g.F.value();
    out.f_global = g.f_global.value();
    out.p = g.p.value();
    out.k_hat = g.k_hat;
    out.conditioning_index = g.conditioning_index;
    out.b_tilde = g.b_tilde.value();
    if (g.alpha.valid()) out.alpha_weights = g.alpha.value();
    out.mask = mask;
    return out;
  }

  void collect(nn::ParamRefs<T>& out) {
    input_proj.collect(out);
    unconditional_tf.collect(out);
    app_head.collect(out);
    out.push_back(&type_embedding);
    film_gamma.collect(out);
    film_beta.collect(out);
    conditional_tf.collect(out);
    out.push_back(&prototypes);
    out.push_back(&blend_logit);
    pattern_norm.collect(out);
    pattern_fc.collect(out);
    pattern_out_norm.collect(out);
  }
};

}  // namespace t2t
