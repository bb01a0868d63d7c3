#pragma once

// Mini-batch training with teacher forcing, gradient clipping, periodic
// validation CIDEr and best-checkpoint retention.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "t2t/annotation.hpp"
#include "t2t/checkpoint.hpp"
#include "t2t/metrics.hpp"
#include "t2t/model.hpp"
#include "t2t/optim.hpp"

namespace t2t {

struct LossSummary {
  double app = 0, cont = 0, cap = 0, sent = 0, total = 0;

  nlohmann::json to_json() const {
    return {{"app", app}, {"cont", cont}, {"cap", cap}, {"sent", sent}, {"total", total}};
  }
};

struct EpochMetrics {
  int epoch = 0;
  LossSummary train;
  std::optional<double> val_cider;
  std::optional<double> val_bleu4;
  std::optional<double> val_loss;
  double grad_norm = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json val = nlohmann::json::object();
    if (val_cider) val["cider"] = *val_cider;
    if (val_bleu4) val["bleu4"] = *val_bleu4;
    if (val_loss) val["loss"] = *val_loss;
    return {{"epoch", epoch}, {"losses", train.to_json()}, {"val_scores", val}};
  }
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> metrics_log;
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Stop once the mean training caption loss of an epoch drops below this.
  std::optional<double> stop_below_cap_loss;
};

template <class T>
struct TrainResult {
  std::unique_ptr<T2TModel<T>> model;  // holds the best-validation weights
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double best_score = -1e300;
};

/// All records grouped by segment: one eval item per segment with every
/// caption of that segment as a reference. Order of first appearance.
struct SegmentGroup {
  const DatasetRecord* first = nullptr;
  std::vector<std::string> captions;
};

inline std::vector<SegmentGroup> group_by_segment(const std::vector<DatasetRecord>& records) {
  std::vector<SegmentGroup> out;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    auto [it, inserted] = index.emplace(r.sequence.segment_id, out.size());
    if (inserted) out.push_back({&r, {}});
    out[it->second].captions.push_back(r.caption);
  }
  return out;
}

template <class T>
EvalCorpus caption_corpus(T2TModel<T>& model, const std::vector<SegmentGroup>& groups,
                          std::vector<std::string>* candidates = nullptr) {
  EvalCorpus corpus;
  for (const auto& g : groups) {
    const std::string cand = model.caption(g.first->sequence);
    if (candidates) candidates->push_back(cand);
    EvalItem item{tokenize(cand), {}};
    for (const auto& c : g.captions) item.references.push_back(tokenize(c));
    corpus.push_back(std::move(item));
  }
  return corpus;
}

/// Fraction of segments whose predicted app type matches the label.
template <class T>
double app_type_accuracy(T2TModel<T>& model, const std::vector<SegmentGroup>& groups) {
  if (groups.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& g : groups) correct += model.encode(g.first->sequence).k_hat == g.first->app_type;
  return static_cast<double>(correct) / static_cast<double>(groups.size());
}

template <class T>
PreparedSample<T> prepare_sample(const T2TModel<T>& model, const DatasetRecord& r) {
  PreparedSample<T> s;
  s.input = model.prepare_input(r.sequence);
  s.mask = r.sequence.mask;
  require(r.app_type >= 0 && r.app_type < model.config.encoder.num_app_types, ErrorKind::LabelOutOfRange,
          "record " + r.sequence.segment_id + " has app_type " + std::to_string(r.app_type));
  s.app_type = r.app_type;
  s.gold = model.vocab.encode(r.caption, model.config.decoder.max_caption_len);
  if (!r.caption_embedding.empty()) {
    require(static_cast<int>(r.caption_embedding.size()) == model.sentence_dim, ErrorKind::ShapeMismatch,
            "caption embedding has " + std::to_string(r.caption_embedding.size()) + " values, expected " +
                std::to_string(model.sentence_dim));
    s.sentence_embedding.resize(1, model.sentence_dim);
    for (int d = 0; d < model.sentence_dim; ++d) s.sentence_embedding(0, d) = static_cast<T>(r.caption_embedding[d]);
  }
  return s;
}

/// Mean teacher-forced loss without dropout.
template <class T>
double evaluation_loss(T2TModel<T>& model, const std::vector<PreparedSample<T>>& samples) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : samples) {
    ag::Tape<T> tape(false);
    nn::Context<T> ctx{tape, nullptr};
    sum += static_cast<double>(model.forward(ctx, s).total.scalar());
  }
  return sum / static_cast<double>(samples.size());
}

/// Builds an untrained model whose vocabulary and normalization come from
/// the training records only.
template <class T>
std::unique_ptr<T2TModel<T>> make_model(const std::vector<DatasetRecord>& train, const RunConfig& cfg) {
  require(!train.empty(), ErrorKind::EmptyDataset, "training split is empty");
  cfg.validate();
  std::vector<std::string> captions;
  std::vector<const FlowFeatureSequence*> seqs;
  std::set<std::string> seen;
  for (const auto& r : train) {
    captions.push_back(r.caption);
    if (seen.insert(r.sequence.segment_id).second) seqs.push_back(&r.sequence);
  }
  Vocabulary vocab = Vocabulary::build(captions, cfg.decoder.min_token_freq);
  auto norm = FeatureNormalizer::fit(seqs, cfg.encoder.input_dim);
  const std::string& record_embedder = train.front().embedder_id;
  int sent_dim = static_cast<int>(train.front().caption_embedding.size());
  for (const auto& r : train) {
    require(r.embedder_id == record_embedder, ErrorKind::InvalidArtifact,
            "training records mix sentence embedders (" + record_embedder + ", " + r.embedder_id + ")");
    require(static_cast<int>(r.caption_embedding.size()) == sent_dim, ErrorKind::ShapeMismatch,
            "caption embeddings have inconsistent dimensions");
  }
  auto embedder = make_embedder(cfg.annotation.embedder, cfg.annotation.sentence_dim);
  if (!record_embedder.empty()) {
    require(record_embedder == embedder->id(), ErrorKind::InvalidConfig,
            "dataset was embedded with " + record_embedder + " but the configuration selects " + embedder->id());
  }
  if (sent_dim == 0) sent_dim = embedder->dim();
  const auto type_rows = type_embedding_rows<T>(*embedder, cfg.encoder.embed_dim, cfg.train.seed);
  return std::make_unique<T2TModel<T>>(cfg, std::move(vocab), std::move(norm), type_rows, embedder->id(), sent_dim,
                                       cfg.train.seed);
}

template <class T>
TrainResult<T> train_model(const std::vector<DatasetRecord>& train, const std::vector<DatasetRecord>& val,
                           const RunConfig& cfg, const TrainOptions& opts = {}) {
  TrainResult<T> result;
  result.model = make_model<T>(train, cfg);
  auto& model = *result.model;
  const auto& tc = cfg.train;

  std::vector<PreparedSample<T>> train_samples, val_samples;
  for (const auto& r : train) train_samples.push_back(prepare_sample(model, r));
  for (const auto& r : val) val_samples.push_back(prepare_sample(model, r));
  const auto val_groups = group_by_segment(val);

  auto params = model.parameters();
  Adam<T> optim(params, tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay);
  std::mt19937_64 rng(tc.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<ag::Matrix<T>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : params) best.push_back(p->value);
  };

  std::optional<std::ofstream> log;
  if (opts.metrics_log) {
    if (opts.metrics_log->has_parent_path()) std::filesystem::create_directories(opts.metrics_log->parent_path());
    log.emplace(*opts.metrics_log);
    require(static_cast<bool>(*log), ErrorKind::InvalidArtifact, "cannot write " + opts.metrics_log->string());
  }

  std::vector<std::size_t> order(train_samples.size());
  int since_best = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, tc.seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch));
    EpochMetrics em;
    em.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      const T inv_b = static_cast<T>(1.0 / static_cast<double>(end - start));
      optim.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        ag::Tape<T> tape(true);
        nn::Context<T> ctx{tape, &rng};
        auto r = model.forward(ctx, train_samples[order[b]]);
        tape.backward(r.total, inv_b);
        if (r.losses.app.valid()) em.train.app += static_cast<double>(r.losses.app.scalar());
        if (r.losses.cont.valid()) em.train.cont += static_cast<double>(r.losses.cont.scalar());
        if (r.losses.cap.valid()) em.train.cap += static_cast<double>(r.losses.cap.scalar());
        if (r.losses.sent.valid()) em.train.sent += static_cast<double>(r.losses.sent.scalar());
        em.train.total += static_cast<double>(r.total.scalar());
      }
      em.grad_norm = clip_grad_norm(params, tc.clip_norm);
      require(std::isfinite(em.grad_norm), ErrorKind::NonFiniteLoss, "gradient norm is not finite");
      optim.step();
    }
    const double n = static_cast<double>(order.size());
    em.train.app /= n, em.train.cont /= n, em.train.cap /= n, em.train.sent /= n, em.train.total /= n;

    const bool evaluate = epoch % tc.val_interval == 0 || epoch == tc.epochs;
    if (evaluate) {
      double score;
      if (!val_samples.empty()) {
        em.val_loss = evaluation_loss(model, val_samples);
        const auto corpus = caption_corpus(model, val_groups);
        em.val_bleu4 = bleu4(corpus);
        if (corpus.size() >= 2) em.val_cider = cider(corpus);
        score = em.val_cider ? *em.val_cider : -*em.val_loss;
      } else {
        score = -em.train.total;
      }
      if (score > result.best_score || best.empty()) {
        result.best_score = score;
        result.best_epoch = epoch;
        since_best = 0;
        snapshot();
        if (opts.checkpoint_dir) {
          save_checkpoint(model, *opts.checkpoint_dir,
                          {{"epoch", epoch}, {"best_score", score}, {"seed", tc.seed}});
        }
      } else {
        ++since_best;
      }
    }
    if (log) *log << em.to_json().dump() << '\n' << std::flush;
    result.history.push_back(em);
    if (opts.on_epoch) opts.on_epoch(em);
    if (tc.patience > 0 && since_best >= tc.patience) break;
    if (opts.stop_below_cap_loss && em.train.cap < *opts.stop_below_cap_loss) break;
  }
  if (!best.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  }
  if (opts.checkpoint_dir) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : result.history) history.push_back(h.to_json());
    save_checkpoint(model, *opts.checkpoint_dir,
                    {{"epoch", result.best_epoch}, {"best_score", result.best_score}, {"seed", tc.seed},
                     {"metric_history", history}});
  }
  return result;
}

}  // namespace t2t
