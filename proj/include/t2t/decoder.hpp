#pragma once

// Attention LSTM caption decoder.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "t2t/autograd.hpp"
#include "t2t/encoder.hpp"
#include "t2t/nn.hpp"
#include "t2t/text.hpp"

namespace t2t {

template <class T>
struct DecoderState {
  Var<T> h;  // 1 x H
  Var<T> e;  // 1 x H (cell)
  int t = 0;
};

template <class T>
struct StepOutput {
  DecoderState<T> state;
  Var<T> logits;  // 1 x V, pre-softmax
  Var<T> phi;     // 1 x S attention weights
  Var<T> context; // 1 x H
};

template <class T>
struct TeacherForced {
  Var<T> log_probs;  // n x V, log q_t
  Var<T> hidden;     // n x H, h_t per step
};

template <class T>
struct CaptionDecoder {
  int vocab_size = 0;
  int hidden_dim = 0;
  int embed_dim = 0;
  int pattern_dim = 0;
  Parameter<T> word_embedding;  // V x L
  Parameter<T> attn_r, attn_u, attn_v, attn_o;  // 1 x H each
  nn::LSTMCell<T> lstm;         // input L + H + H'
  nn::Linear<T> output;         // H -> V
  nn::Linear<T> init_h, init_e; // f_global -> h0 / e0

  CaptionDecoder() = default;
  CaptionDecoder(int vocab, int H, int L, int H_prime, std::mt19937_64& rng)
      : vocab_size(vocab),
        hidden_dim(H),
        embed_dim(L),
        pattern_dim(H_prime),
        word_embedding("decoder.word_embedding", vocab, L),
        attn_r("decoder.attn_r", 1, H),
        attn_u("decoder.attn_u", 1, H),
        attn_v("decoder.attn_v", 1, H),
        attn_o("decoder.attn_o", 1, H),
        lstm("decoder.lstm", L + H + H_prime, H, rng),
        output("decoder.output", H, vocab, rng),
        init_h("decoder.init_h", H, H, rng),
        init_e("decoder.init_e", H, H, rng) {
    require(vocab >= 5, ErrorKind::InvalidConfig, "vocabulary must hold at least 5 tokens");
    nn::xavier_uniform(word_embedding.value, vocab, L, rng);
    nn::xavier_uniform(attn_r.value, H, 1, rng);
    nn::xavier_uniform(attn_u.value, H, 1, rng);
    nn::xavier_uniform(attn_v.value, H, 1, rng);
  }

  int lstm_input_size() const { return static_cast<int>(lstm.input_size()); }

  /// F (x) v, reused across steps.
  Var<T> project_features(Tape<T>& tape, const Var<T>& F) { return ag::mul_row(F, tape.param(attn_v)); }

  /// phi_s = softmax_s(r . tanh(u (x) h + v (x) f_s + o)) over unmasked s;
  /// c = sum_s phi_s f_s.
  std::pair<Var<T>, Var<T>> attend(Tape<T>& tape, const Var<T>& h_prev, const Var<T>& F, const Var<T>& F_v,
                                   const std::vector<bool>& mask) {
    require(static_cast<ag::Index>(mask.size()) == F.rows(), ErrorKind::ShapeMismatch, "attend: mask length");
    require(std::find(mask.begin(), mask.end(), true) != mask.end(), ErrorKind::AllMasked,
            "attend: every position is masked");
    Var<T> query = ag::add(ag::mul(tape.param(attn_u), h_prev), tape.param(attn_o));
    Var<T> act = ag::tanh(ag::add_row(F_v, query));                    // S x H
    Var<T> scores = ag::transpose(ag::matmul_bt(act, tape.param(attn_r)));  // 1 x S
    Var<T> phi = ag::softmax_rows(scores, mask);
    return {phi, ag::matmul(phi, F)};
  }

  std::pair<Var<T>, Var<T>> attend(Tape<T>& tape, const Var<T>& h_prev, const Var<T>& F,
                                   const std::vector<bool>& mask) {
    return attend(tape, h_prev, F, project_features(tape, F), mask);
  }

  DecoderState<T> initial_state(Tape<T>& tape, const Var<T>& f_global) {
    return {ag::tanh(init_h(tape, f_global)), ag::tanh(init_e(tape, f_global)), 0};
  }

  Var<T> embed(Tape<T>& tape, int token) {
    require(token >= 0 && token < vocab_size, ErrorKind::IndexOutOfRange,
            "token index " + std::to_string(token) + " outside vocabulary of size " + std::to_string(vocab_size));
    return ag::slice_rows(tape.param(word_embedding), token, 1);
  }

  /// x_t = [w_{t-1}; c_t; b~]; LSTM update; logits = FC(h_t).
  StepOutput<T> step(Tape<T>& tape, const DecoderState<T>& state, int prev_token, const Var<T>& F, const Var<T>& F_v,
                     const std::vector<bool>& mask, const Var<T>& b_tilde) {
    Var<T> w = embed(tape, prev_token);
    auto [phi, context] = attend(tape, state.h, F, F_v, mask);
    Var<T> x = ag::concat_cols(std::vector<Var<T>>{w, context, b_tilde});
    auto [h, e] = lstm(tape, x, state.h, state.e);
    StepOutput<T> out;
    out.state = {h, e, state.t + 1};
    out.logits = output(tape, h);
    out.phi = phi;
    out.context = context;
    return out;
  }

  /// Feeds BOS, gold[0], ..., gold[n-2]; one log-distribution per gold token.
  TeacherForced<T> teacher_forced(Tape<T>& tape, const Var<T>& F, const Var<T>& f_global, const Var<T>& b_tilde,
                                  const std::vector<bool>& mask, const std::vector<int>& gold) {
    require(!gold.empty(), ErrorKind::EmptyGold, "gold caption is empty");
    Var<T> F_v = project_features(tape, F);
    DecoderState<T> state = initial_state(tape, f_global);
    std::vector<Var<T>> logits, hidden;
    logits.reserve(gold.size());
    hidden.reserve(gold.size());
    int prev = Vocabulary::kBos;
    for (int tok : gold) {
      auto out = step(tape, state, prev, F, F_v, mask, b_tilde);
      logits.push_back(out.logits);
      hidden.push_back(out.state.h);
      state = out.state;
      prev = tok;
    }
    return {ag::log_softmax_rows(ag::concat_rows(logits)), ag::concat_rows(hidden)};
  }

  /// Argmax decoding (ties -> lowest index). Stops at EOS or after max_len
  /// steps; PAD/BOS/EOS are removed from the result.
  std::vector<int> decode_greedy(const EncodedTraffic<T>& enc, int max_len) {
    require(max_len >= 1, ErrorKind::InvalidConfig, "max_len must be >= 1");
    Tape<T> tape(false);
    Var<T> F = tape.constant(enc.F);
    Var<T> F_v = project_features(tape, F);
    Var<T> b = tape.constant(enc.b_tilde);
    DecoderState<T> state = initial_state(tape, tape.constant(enc.f_global));
    std::vector<int> tokens;
    int prev = Vocabulary::kBos;
    for (int t = 0; t < max_len; ++t) {
      auto out = step(tape, state, prev, F, F_v, enc.mask, b);
      const int next = argmax_lowest(out.logits.value().row(0));
      if (next == Vocabulary::kEos) break;
      if (next != Vocabulary::kPad && next != Vocabulary::kBos) tokens.push_back(next);
      state = out.state;
      prev = next;
    }
    return tokens;
  }

  /// Beam search without length normalization; width 1 equals greedy.
  std::vector<int> decode_beam(const EncodedTraffic<T>& enc, int max_len, int width) {
    require(max_len >= 1, ErrorKind::InvalidConfig, "max_len must be >= 1");
    require(width >= 1, ErrorKind::InvalidConfig, "beam width must be >= 1");
    if (width == 1) return decode_greedy(enc, max_len);
    struct Hyp {
      Matrix<T> h, e;
      std::vector<int> tokens;
      double score = 0.0;
      bool done = false;
    };
    Tape<T> root(false);
    auto init = initial_state(root, root.constant(enc.f_global));
    std::vector<Hyp> beams{{init.h.value(), init.e.value(), {}, 0.0, false}};
    for (int t = 0; t < max_len; ++t) {
      std::vector<Hyp> candidates;
      for (const auto& hyp : beams) {
        if (hyp.done) {
          candidates.push_back(hyp);
          continue;
        }
        Tape<T> tape(false);
        Var<T> F = tape.constant(enc.F);
        Var<T> F_v = project_features(tape, F);
        DecoderState<T> st{tape.constant(hyp.h), tape.constant(hyp.e), t};
        const int prev = hyp.tokens.empty() ? Vocabulary::kBos : hyp.tokens.back();
        auto out = step(tape, st, prev, F, F_v, enc.mask, tape.constant(enc.b_tilde));
        const auto& logit = out.logits.value();
        const T mx = logit.maxCoeff();
        const double lse = static_cast<double>(mx) + std::log(static_cast<double>((logit.array() - mx).exp().sum()));
        std::vector<int> order(vocab_size);
        for (int i = 0; i < vocab_size; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logit(0, a) > logit(0, b); });
        for (int j = 0; j < width && j < vocab_size; ++j) {
          const int tok = order[j];
          Hyp next{out.state.h.value(), out.state.e.value(), hyp.tokens,
                   hyp.score + static_cast<double>(logit(0, tok)) - lse, tok == Vocabulary::kEos};
          next.tokens.push_back(tok);
          candidates.push_back(std::move(next));
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
      if (static_cast<int>(candidates.size()) > width) candidates.resize(width);
      beams = std::move(candidates);
      if (std::all_of(beams.begin(), beams.end(), [](const Hyp& h) { return h.done; })) break;
    }
    std::vector<int> out;
    for (int tok : beams.front().tokens) {
      if (tok == Vocabulary::kEos) break;
      if (tok != Vocabulary::kPad && tok != Vocabulary::kBos) out.push_back(tok);
    }
    return out;
  }

  void collect(nn::ParamRefs<T>& out) {
    out.push_back(&word_embedding);
    out.push_back(&attn_r);
    out.push_back(&attn_u);
    out.push_back(&attn_v);
    out.push_back(&attn_o);
    lstm.collect(out);
    output.collect(out);
    init_h.collect(out);
    init_e.collect(out);
  }
};

}  // namespace t2t
