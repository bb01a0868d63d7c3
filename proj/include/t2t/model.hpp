#pragma once

// The complete traffic-to-text model: feature normalization, encoder,
// decoder and the two sentence-embedding projections used by the
// sentence loss.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "t2t/config.hpp"
#include "t2t/decoder.hpp"
#include "t2t/embedding.hpp"
#include "t2t/encoder.hpp"
#include "t2t/flow_ingest.hpp"
#include "t2t/losses.hpp"
#include "t2t/nn.hpp"
#include "t2t/text.hpp"

namespace t2t {

/// Per-feature z-score over valid rows; padding rows stay zero.
struct FeatureNormalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static FeatureNormalizer identity(int dim) {
    return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  }

  static FeatureNormalizer fit(const std::vector<const FlowFeatureSequence*>& sequences, int dim) {
    std::vector<double> sum(dim, 0.0), sq(dim, 0.0);
    double n = 0;
    for (const auto* s : sequences) {
      for (std::size_t r = 0; r < s->rows(); ++r) {
        if (!s->mask[r]) continue;
        require(static_cast<int>(s->features[r].size()) == dim, ErrorKind::ShapeMismatch,
                "feature dimension mismatch while fitting normalization");
        for (int d = 0; d < dim; ++d) {
          sum[d] += s->features[r][d];
          sq[d] += s->features[r][d] * s->features[r][d];
        }
        n += 1;
      }
    }
    FeatureNormalizer out = identity(dim);
    if (n == 0) return out;
    for (int d = 0; d < dim; ++d) {
      out.mean[d] = sum[d] / n;
      const double var = std::max(0.0, sq[d] / n - out.mean[d] * out.mean[d]);
      const double sd = std::sqrt(var);
      out.stddev[d] = sd > 1e-9 ? sd : 1.0;
    }
    return out;
  }

  template <class T>
  Matrix<T> apply(const FlowFeatureSequence& seq, int dim) const {
    require(static_cast<int>(mean.size()) == dim, ErrorKind::ShapeMismatch, "normalizer width mismatch");
    Matrix<T> out = Matrix<T>::Zero(static_cast<ag::Index>(seq.rows()), dim);
    for (std::size_t r = 0; r < seq.rows(); ++r) {
      require(static_cast<int>(seq.features[r].size()) == dim, ErrorKind::ShapeMismatch,
              "feature dimension " + std::to_string(seq.features[r].size()) + " does not match model input_dim " +
                  std::to_string(dim));
      if (!seq.mask[r]) continue;
      for (int d = 0; d < dim; ++d) out(r, d) = static_cast<T>((seq.features[r][d] - mean[d]) / stddev[d]);
    }
    return out;
  }
};

/// Label sentence embeddings projected to L by a seeded, frozen Xavier map.
template <class T>
Matrix<T> type_embedding_rows(const SentenceEmbedder& embedder, int embed_dim, std::uint64_t seed) {
  const auto& labels = app_type_labels();
  std::mt19937_64 rng(seed ^ 0xE3B0C442ULL);
  Matrix<double> proj(embedder.dim(), embed_dim);
  nn::xavier_uniform(proj, embedder.dim(), embed_dim, rng);
  Matrix<T> rows(static_cast<ag::Index>(labels.size()), embed_dim);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const auto v = embedder.embed(labels[k]);
    Eigen::Map<const Eigen::RowVectorXd> row(v.data(), static_cast<ag::Index>(v.size()));
    rows.row(static_cast<ag::Index>(k)) = (row * proj).template cast<T>();
  }
  return rows;
}

/// One training example in model-ready form.
template <class T>
struct PreparedSample {
  Matrix<T> input;
  std::vector<bool> mask;
  int app_type = 0;
  std::vector<int> gold;          // token ids ending in EOS
  Matrix<T> sentence_embedding;   // 1 x sentence_dim (may be empty)
};

template <class T>
struct ForwardResult {
  EncoderGraph<T> enc;
  TeacherForced<T> dec;
  LossComponents<T> losses;
  Var<T> total;
  Var<T> s, g;
};

template <class T>
struct T2TModel {
  RunConfig config;
  Vocabulary vocab;
  FeatureNormalizer normalizer;
  std::string embedder_id;
  int sentence_dim = 0;
  FeatureEncoder<T> encoder;
  CaptionDecoder<T> decoder;
  nn::Linear<T> sentence_s;  // H -> H'
  nn::Linear<T> sentence_g;  // sentence_dim -> H'

  T2TModel() = default;

  T2TModel(const RunConfig& cfg, Vocabulary v, FeatureNormalizer norm, const Matrix<T>& type_rows,
           std::string embedder, int sent_dim, std::uint64_t seed)
      : config(cfg), vocab(std::move(v)), normalizer(std::move(norm)), embedder_id(std::move(embedder)),
        sentence_dim(sent_dim) {
    config.validate();
    std::mt19937_64 rng(seed);
    const auto& ec = config.encoder;
    encoder = FeatureEncoder<T>(ec, type_rows, rng);
    decoder = CaptionDecoder<T>(vocab.size(), ec.hidden_dim, ec.embed_dim, ec.pattern_dim, rng);
    sentence_s = nn::Linear<T>("sentence.proj_s", ec.hidden_dim, ec.pattern_dim, rng);
    sentence_g = nn::Linear<T>("sentence.proj_g", sent_dim, ec.pattern_dim, rng);
  }

  nn::ParamRefs<T> parameters() {
    nn::ParamRefs<T> out;
    encoder.collect(out);
    decoder.collect(out);
    sentence_s.collect(out);
    sentence_g.collect(out);
    return out;
  }

  bool uses_app_loss() const { return config.encoder.use_dfm || config.encoder.use_fppl; }
  bool uses_contrastive_loss() const { return config.encoder.use_fppl; }

  Matrix<T> prepare_input(const FlowFeatureSequence& seq) const {
    require(static_cast<int>(seq.rows()) == config.encoder.max_flows, ErrorKind::ShapeMismatch,
            "sequence has " + std::to_string(seq.rows()) + " rows, model expects " +
                std::to_string(config.encoder.max_flows));
    require(seq.valid_count() > 0, ErrorKind::AllMasked, "sequence has no valid flows");
    return normalizer.template apply<T>(seq, config.encoder.input_dim);
  }

  EncodedTraffic<T> encode(const FlowFeatureSequence& seq, std::optional<int> override_type = std::nullopt) {
    return encoder.encode_values(prepare_input(seq), seq.mask, override_type);
  }

  std::vector<int> caption_ids(const FlowFeatureSequence& seq) {
    const auto enc = encode(seq);
    const int beam = config.decoder.beam_width;
    return beam > 1 ? decoder.decode_beam(enc, config.decoder.max_caption_len, beam)
                    : decoder.decode_greedy(enc, config.decoder.max_caption_len);
  }

  std::string caption(const FlowFeatureSequence& seq) { return vocab.decode(caption_ids(seq)); }

  /// Teacher-forced pass (ground-truth tokens and app type) with all
  /// enabled loss terms for a batch of one.
  ForwardResult<T> forward(nn::Context<T>& ctx, const PreparedSample<T>& sample) {
    auto& tape = ctx.tape;
    ForwardResult<T> r;
    r.enc = encoder.encode(ctx, tape.constant(sample.input), sample.mask, sample.app_type);
    r.dec = decoder.teacher_forced(tape, r.enc.F, r.enc.f_global, r.enc.b_tilde, sample.mask, sample.gold);
    const std::vector<int> label{sample.app_type};
    if (uses_app_loss()) r.losses.app = loss_app(r.enc.p, label);
    if (uses_contrastive_loss()) {
      r.losses.cont = loss_contrastive(r.enc.f_global, label, tape.param(encoder.prototypes),
                                       config.encoder.prototypes_per_type, static_cast<T>(config.loss.tau));
    }
    r.losses.cap = loss_caption(std::vector<Var<T>>{r.dec.log_probs}, std::vector<std::vector<int>>{sample.gold});
    if (sample.sentence_embedding.size() > 0) {
      std::vector<bool> all(sample.gold.size(), true);
      r.s = sentence_s(tape, ag::masked_mean_rows(r.dec.hidden, all));
      r.g = sentence_g(tape, tape.constant(sample.sentence_embedding));
      r.losses.sent = loss_sentence(r.s, r.g);
    }
    r.total = loss_overall(r.losses, config.loss);
    return r;
  }
};

}  // namespace t2t
