#pragma once

// Layer building blocks on top of the autodiff tape.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "t2t/autograd.hpp"

namespace t2t::nn {

using ag::Index;
using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;

template <class T>
using ParamRefs = std::vector<Parameter<T>*>;

/// Forward-pass context: the tape plus the dropout RNG (null at inference).
template <class T>
struct Context {
  Tape<T>& tape;
  std::mt19937_64* rng = nullptr;

  bool training() const { return rng != nullptr; }
};

template <class T>
void xavier_uniform(Matrix<T>& w, Index fan_in, Index fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
}

/// Sinusoidal encoding of row index: even columns sin, odd columns cos.
template <class T>
Matrix<T> sinusoidal_positions(Index rows, Index dim) {
  Matrix<T> pe(rows, dim);
  for (Index pos = 0; pos < rows; ++pos) {
    for (Index i = 0; i < dim; ++i) {
      const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// y = x W + b with W stored in x out.
template <class T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, std::mt19937_64& rng)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {
    xavier_uniform(weight.value, in, out, rng);
  }

  Index in_features() const { return weight.value.rows(); }
  Index out_features() const { return weight.value.cols(); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return ag::add_row(ag::matmul(x, tape.param(weight)), tape.param(bias));
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <class T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim) : gamma(name + ".gamma", 1, dim), beta(name + ".beta", 1, dim) {
    gamma.value.setOnes();
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return ag::layer_norm_rows(x, tape.param(gamma), tape.param(beta));
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

/// Multi-head self-attention; keys with mask == false are excluded.
template <class T>
struct MultiHeadSelfAttention {
  Linear<T> query, key, value, output;
  Index heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, Index dim, Index num_heads, std::mt19937_64& rng)
      : query(name + ".q", dim, dim, rng),
        key(name + ".k", dim, dim, rng),
        value(name + ".v", dim, dim, rng),
        output(name + ".o", dim, dim, rng),
        heads(num_heads) {}

  Var<T> operator()(Context<T>& ctx, const Var<T>& x, const std::vector<bool>& mask) {
    auto& tape = ctx.tape;
    const Index dim = x.cols();
    const Index head_dim = dim / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));
    Var<T> q = query(tape, x), k = key(tape, x), v = value(tape, x);
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (Index h = 0; h < heads; ++h) {
      Var<T> qh = ag::slice_cols(q, h * head_dim, head_dim);
      Var<T> kh = ag::slice_cols(k, h * head_dim, head_dim);
      Var<T> vh = ag::slice_cols(v, h * head_dim, head_dim);
      Var<T> scores = ag::scale(ag::matmul_bt(qh, kh), inv_sqrt);
      Var<T> weights = ag::softmax_rows(scores, mask);
      outs.push_back(ag::matmul(weights, vh));
    }
    Var<T> joined = heads == 1 ? outs.front() : ag::concat_cols(outs);
    return output(tape, joined);
  }

  void collect(ParamRefs<T>& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
  }
};

/// Pre-norm transformer encoder layer with a ReLU feed-forward block.
template <class T>
struct TransformerLayer {
  LayerNorm<T> norm_attn, norm_ffn;
  MultiHeadSelfAttention<T> attention;
  Linear<T> ffn_in, ffn_out;
  T dropout = T(0);

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, Index dim, Index heads, Index ffn_dim, T drop, std::mt19937_64& rng)
      : norm_attn(name + ".norm_attn", dim),
        norm_ffn(name + ".norm_ffn", dim),
        attention(name + ".attn", dim, heads, rng),
        ffn_in(name + ".ffn_in", dim, ffn_dim, rng),
        ffn_out(name + ".ffn_out", ffn_dim, dim, rng),
        dropout(drop) {}

  Var<T> operator()(Context<T>& ctx, const Var<T>& x, const std::vector<bool>& mask) {
    auto& tape = ctx.tape;
    Var<T> a = attention(ctx, norm_attn(tape, x), mask);
    Var<T> h = ag::add(x, ag::dropout(a, dropout, ctx.rng));
    Var<T> f = ffn_out(tape, ag::relu(ffn_in(tape, norm_ffn(tape, h))));
    return ag::add(h, ag::dropout(f, dropout, ctx.rng));
  }

  void collect(ParamRefs<T>& out) {
    norm_attn.collect(out);
    norm_ffn.collect(out);
    attention.collect(out);
    ffn_in.collect(out);
    ffn_out.collect(out);
  }
};

/// Positional encoding, a stack of layers, final LayerNorm; padded rows of
/// the result are zeroed.
template <class T>
struct TransformerEncoder {
  std::vector<TransformerLayer<T>> layers;
  LayerNorm<T> final_norm;
  Matrix<T> positions;

  TransformerEncoder() = default;
  TransformerEncoder(const std::string& name, Index max_rows, Index dim, Index num_layers, Index heads,
                     Index ffn_dim, T drop, std::mt19937_64& rng)
      : final_norm(name + ".final_norm", dim), positions(sinusoidal_positions<T>(max_rows, dim)) {
    layers.reserve(num_layers);
    for (Index l = 0; l < num_layers; ++l) {
      layers.emplace_back(name + ".layer" + std::to_string(l), dim, heads, ffn_dim, drop, rng);
    }
  }

  Var<T> operator()(Context<T>& ctx, const Var<T>& x, const std::vector<bool>& mask) {
    auto& tape = ctx.tape;
    if (x.rows() > positions.rows()) fail(ErrorKind::ShapeMismatch, "transformer: more rows than positions");
    Var<T> h = ag::add(x, tape.constant(positions.topRows(x.rows())));
    for (auto& layer : layers) h = layer(ctx, h, mask);
    return ag::mask_rows(final_norm(tape, h), mask);
  }

  void collect(ParamRefs<T>& out) {
    for (auto& layer : layers) layer.collect(out);
    final_norm.collect(out);
  }
};

/// Gate order in the fused weight: input, forget, cell, output.
template <class T>
struct LSTMCell {
  Parameter<T> input_weight;   // in x 4H
  Parameter<T> hidden_weight;  // H x 4H
  Parameter<T> bias;           // 1 x 4H
  Index hidden = 0;

  LSTMCell() = default;
  LSTMCell(const std::string& name, Index in, Index hid, std::mt19937_64& rng)
      : input_weight(name + ".input_weight", in, 4 * hid),
        hidden_weight(name + ".hidden_weight", hid, 4 * hid),
        bias(name + ".bias", 1, 4 * hid),
        hidden(hid) {
    xavier_uniform(input_weight.value, in, 4 * hid, rng);
    xavier_uniform(hidden_weight.value, hid, 4 * hid, rng);
  }

  Index input_size() const { return input_weight.value.rows(); }

  /// Returns {h', c'}.
  std::pair<Var<T>, Var<T>> operator()(Tape<T>& tape, const Var<T>& x, const Var<T>& h, const Var<T>& c) {
    Var<T> gates = ag::add_row(
        ag::add(ag::matmul(x, tape.param(input_weight)), ag::matmul(h, tape.param(hidden_weight))),
        tape.param(bias));
    Var<T> i = ag::sigmoid(ag::slice_cols(gates, 0, hidden));
    Var<T> f = ag::sigmoid(ag::slice_cols(gates, hidden, hidden));
    Var<T> g = ag::tanh(ag::slice_cols(gates, 2 * hidden, hidden));
    Var<T> o = ag::sigmoid(ag::slice_cols(gates, 3 * hidden, hidden));
    Var<T> c_next = ag::add(ag::mul(f, c), ag::mul(i, g));
    Var<T> h_next = ag::mul(o, ag::tanh(c_next));
    return {h_next, c_next};
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&input_weight);
    out.push_back(&hidden_weight);
    out.push_back(&bias);
  }
};

}  // namespace t2t::nn
