#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace t2t;
namespace fs = std::filesystem;

namespace {

constexpr int kFlows = 8;

RunConfig small_config() {
  RunConfig cfg;
  cfg.encoder.hidden_dim = 16;
  cfg.encoder.pattern_dim = 8;
  cfg.encoder.embed_dim = 8;
  cfg.encoder.prototypes_per_type = 2;
  cfg.encoder.max_flows = kFlows;
  cfg.encoder.transformer_layers = 1;
  cfg.encoder.attention_heads = 2;
  cfg.encoder.dropout = 0.1;
  cfg.decoder.max_caption_len = 12;
  cfg.decoder.min_token_freq = 1;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 3e-3;
  cfg.annotation.sentence_dim = 32;
  return cfg;
}

std::vector<DatasetRecord> synth_records(int n_per_type, std::uint64_t seed) {
  SynthOptions opts;
  opts.max_flows = kFlows;
  return to_dataset_records(generate(default_profiles(), n_per_type, seed, opts), HashedNgramEmbedder(32));
}

class ScratchDir {
 public:
  ScratchDir() : path_(fs::temp_directory_path() / ("t2t-model-" + std::to_string(::getpid()) + "-" +
                                                     std::to_string(counter_++))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

template <class T>
ag::Matrix<T> prototype_grad(T2TModel<T>& model, const PreparedSample<T>& s, const LossWeights& w) {
  model.config.loss = w;
  for (auto* p : model.parameters()) p->zero_grad();
  ag::Tape<T> tape(true);
  nn::Context<T> ctx{tape, nullptr};
  tape.backward(model.forward(ctx, s).total);
  return model.encoder.prototypes.grad;
}

LossWeights weights(double app, double cont, double cap, double sent) {
  LossWeights w;
  w.lambda_app = app, w.lambda_cont = cont, w.lambda_cap = cap, w.lambda_sent = sent;
  return w;
}

}  // namespace

TEST(RunConfig, ParsesKeyValueText) {
  RunConfig cfg;
  cfg.apply_text("# comment\nhidden_dim = 64  # trailing\n\nuse_fppl=false\nlearning_rate = 2e-3\nseed = 99\n");
  EXPECT_EQ(cfg.encoder.hidden_dim, 64);
  EXPECT_FALSE(cfg.encoder.use_fppl);
  EXPECT_DOUBLE_EQ(cfg.train.learning_rate, 2e-3);
  EXPECT_EQ(cfg.train.seed, 99u);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  RunConfig cfg;
  EXPECT_T2T_ERROR(cfg.set("hiden_dim", "4"), ErrorKind::InvalidConfig);
  EXPECT_T2T_ERROR(cfg.set("hidden_dim", "four"), ErrorKind::InvalidConfig);
  EXPECT_T2T_ERROR(cfg.set("use_dfm", "maybe"), ErrorKind::InvalidConfig);
  EXPECT_T2T_ERROR(cfg.apply_text("no equals sign"), ErrorKind::InvalidConfig);
  EXPECT_T2T_ERROR(RunConfig::from_file("/nonexistent/t2t.cfg"), ErrorKind::InvalidConfig);
  cfg.set("attention_heads", "3");
  EXPECT_T2T_ERROR(cfg.validate(), ErrorKind::InvalidConfig);
}

TEST(RunConfig, MapRoundTripCoversEveryKey) {
  RunConfig a = small_config();
  a.loss.tau = 0.07;
  a.annotation.embedder = "command:/bin/true";
  RunConfig b;
  for (const auto& [k, v] : a.to_map()) b.set(k, v);
  EXPECT_EQ(a.to_map(), b.to_map());
  EXPECT_DOUBLE_EQ(b.loss.tau, 0.07);
  EXPECT_GE(a.to_map().size(), 35u);
}

TEST(RunConfig, DefaultsMatchReferenceArchitecture) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.encoder.input_dim, 123);
  EXPECT_EQ(cfg.encoder.max_flows, 50);
  EXPECT_EQ(cfg.encoder.hidden_dim, 512);
  EXPECT_EQ(cfg.encoder.pattern_dim, 256);
  EXPECT_EQ(cfg.encoder.embed_dim, 64);
  EXPECT_EQ(cfg.encoder.prototypes_per_type, 5);
  EXPECT_EQ(cfg.encoder.num_app_types, 5);
  EXPECT_DOUBLE_EQ(cfg.loss.tau, 0.1);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Model, VocabularyComesFromTrainingSplitOnly) {
  auto train = synth_records(2, 1);
  auto val = synth_records(1, 2);
  val.front().caption = "zebra unicorn";
  const auto model = make_model<float>(train, small_config());
  EXPECT_EQ(model->vocab.id("zebra"), Vocabulary::kUnk);
  EXPECT_NE(model->vocab.id("playlist"), Vocabulary::kUnk);
}

TEST(Model, MakeModelValidatesInputs) {
  EXPECT_T2T_ERROR(make_model<float>({}, small_config()), ErrorKind::EmptyDataset);
  auto recs = synth_records(1, 0);
  auto cfg = small_config();
  cfg.annotation.sentence_dim = 16;
  EXPECT_T2T_ERROR(make_model<float>(recs, cfg), ErrorKind::InvalidConfig);
  recs[1].embedder_id = "other";
  EXPECT_T2T_ERROR(make_model<float>(recs, small_config()), ErrorKind::InvalidArtifact);
  auto model = make_model<float>(synth_records(1, 0), small_config());
  FlowFeatureSequence wrong;
  wrong.features.assign(kFlows + 1, std::vector<double>(features::kDim, 0.0));
  wrong.mask.assign(kFlows + 1, true);
  EXPECT_T2T_ERROR(model->prepare_input(wrong), ErrorKind::ShapeMismatch);
}

TEST(Model, ForwardProducesAllLossTerms) {
  auto model = make_model<double>(synth_records(2, 3), small_config());
  const auto s = prepare_sample(*model, synth_records(1, 4).front());
  ag::Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const auto r = model->forward(ctx, s);
  ASSERT_TRUE(r.losses.app.valid() && r.losses.cont.valid() && r.losses.cap.valid() && r.losses.sent.valid());
  const double sum = r.losses.app.scalar() + r.losses.cont.scalar() + r.losses.cap.scalar() + r.losses.sent.scalar();
  EXPECT_NEAR(r.total.scalar(), sum, 1e-12);
  EXPECT_GE(r.losses.sent.scalar(), 0.0);
  EXPECT_LE(r.losses.sent.scalar(), 2.0);
  EXPECT_EQ(r.dec.log_probs.rows(), static_cast<ag::Index>(s.gold.size()));
}

TEST(Model, AblationsDropTheirLossTerms) {
  auto cfg = small_config();
  cfg.encoder.use_fppl = false;
  auto no_fppl = make_model<double>(synth_records(1, 3), cfg);
  cfg.encoder.use_dfm = false;
  auto plain = make_model<double>(synth_records(1, 3), cfg);
  const auto rec = synth_records(1, 4).front();
  ag::Tape<double> tape(false);
  nn::Context<double> ctx{tape, nullptr};
  const auto a = no_fppl->forward(ctx, prepare_sample(*no_fppl, rec));
  EXPECT_TRUE(a.losses.app.valid());
  EXPECT_FALSE(a.losses.cont.valid());
  const auto b = plain->forward(ctx, prepare_sample(*plain, rec));
  EXPECT_FALSE(b.losses.app.valid());
  EXPECT_FALSE(b.losses.cont.valid());
}

TEST(Model, ZeroContrastiveWeightLeavesOnlyDecoderPathToPrototypes) {
  auto model = make_model<double>(synth_records(2, 5), small_config());
  for (const auto& rec : synth_records(1, 6)) {
    const auto s = prepare_sample(*model, rec);
    const auto full = prototype_grad(*model, s, weights(1, 1, 1, 1));
    const auto cont_only = prototype_grad(*model, s, weights(0, 1, 0, 0));
    const auto without_cont = prototype_grad(*model, s, weights(1, 0, 1, 1));
    const auto decoder_only = prototype_grad(*model, s, weights(0, 0, 1, 1));
    const auto app_only = prototype_grad(*model, s, weights(1, 0, 0, 0));
    EXPECT_EQ(app_only.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(decoder_only.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(without_cont, decoder_only);
    EXPECT_LT((full - cont_only - without_cont).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Training, SameSeedGivesIdenticalRuns) {
  const auto train = synth_records(4, 7), val = synth_records(1, 8);
  const auto a = train_model<float>(train, val, small_config());
  const auto b = train_model<float>(train, val, small_config());
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].train.total, b.history[e].train.total);
    EXPECT_EQ(*a.history[e].val_loss, *b.history[e].val_loss);
  }
  auto pa = a.model->parameters(), pb = b.model->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
}

TEST(Training, LossDescendsOverFiftyEpochs) {
  auto cfg = small_config();
  cfg.train.epochs = 50;
  cfg.train.val_interval = 50;
  const auto r = train_model<float>(synth_records(4, 9), {}, cfg);
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_LT(r.history.back().train.total, r.history.front().train.total);
  EXPECT_LT(r.history.back().train.cap, r.history.front().train.cap);
}

TEST(Training, RejectsEmptyTrainingSet) {
  EXPECT_T2T_ERROR(train_model<float>({}, {}, small_config()), ErrorKind::EmptyDataset);
}

TEST(Training, WritesMetricsLogAndCheckpoint) {
  ScratchDir dir;
  TrainOptions opts;
  opts.checkpoint_dir = dir.path() / "ckpt";
  opts.metrics_log = dir.path() / "metrics.jsonl";
  auto cfg = small_config();
  cfg.train.epochs = 3;
  train_model<float>(synth_records(3, 10), synth_records(1, 11), cfg, opts);
  std::ifstream log(*opts.metrics_log);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<int>(), ++lines);
    EXPECT_TRUE(j.at("losses").contains("cap"));
    EXPECT_TRUE(j.at("val_scores").contains("cider"));
  }
  EXPECT_EQ(lines, 3);
  EXPECT_TRUE(fs::exists(dir.path() / "ckpt" / "manifest.json"));
  EXPECT_FALSE(fs::is_empty(dir.path() / "ckpt" / "weights"));
  EXPECT_EQ(read_manifest(dir.path() / "ckpt").at("metric_history").size(), 3u);
}

TEST(Checkpoint, RoundTripReproducesEvalOutputsExactly) {
  ScratchDir dir;
  auto trained = train_model<float>(synth_records(3, 12), synth_records(1, 13), small_config());
  save_checkpoint(*trained.model, dir.path());
  auto loaded = load_checkpoint<float>(dir.path());
  const auto probes = synth_records(2, 14);
  ASSERT_EQ(probes.size(), 10u);
  for (const auto& rec : probes) {
    const auto a = trained.model->encode(rec.sequence), b = loaded.encode(rec.sequence);
    EXPECT_EQ((a.F - b.F).cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_EQ((a.p - b.p).cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_EQ((a.b_tilde - b.b_tilde).cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_EQ(a.k_hat, b.k_hat);
    EXPECT_EQ(trained.model->caption_ids(rec.sequence), loaded.caption_ids(rec.sequence));
    const auto sa = prepare_sample(*trained.model, rec), sb = prepare_sample(loaded, rec);
    EXPECT_EQ(evaluation_loss(*trained.model, std::vector{sa}), evaluation_loss(loaded, std::vector{sb}));
  }
}

TEST(Checkpoint, LayoutIsLittleEndianFloat32) {
  ScratchDir dir;
  auto model = make_model<float>(synth_records(1, 15), small_config());
  save_checkpoint(*model, dir.path());
  const auto manifest = read_manifest(dir.path());
  for (const auto& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    EXPECT_EQ(fs::file_size(dir.path() / t.at("file").get<std::string>()), shape[0] * shape[1] * 4);
  }
  const auto& first = manifest.at("tensors").at(0);
  std::ifstream in(dir.path() / first.at("file").get<std::string>(), std::ios::binary);
  unsigned char raw[4];
  in.read(reinterpret_cast<char*>(raw), 4);
  const std::uint32_t bits = raw[0] | raw[1] << 8 | raw[2] << 16 | static_cast<std::uint32_t>(raw[3]) << 24;
  float v;
  std::memcpy(&v, &bits, 4);
  EXPECT_EQ(v, model->parameters().front()->value.data()[0]);
}

TEST(Checkpoint, DetectsCorruption) {
  ScratchDir dir;
  auto model = make_model<float>(synth_records(1, 16), small_config());
  save_checkpoint(*model, dir.path());
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "missing"), Error);
  std::ofstream(dir.path() / "vocab.json", std::ios::app) << " ";
  EXPECT_T2T_ERROR(load_checkpoint<float>(dir.path()), ErrorKind::InvalidArtifact);
  save_checkpoint(*model, dir.path());
  const auto file = dir.path() / read_manifest(dir.path()).at("tensors").at(0).at("file").get<std::string>();
  fs::resize_file(file, fs::file_size(file) - 4);
  EXPECT_T2T_ERROR(load_checkpoint<float>(dir.path()), ErrorKind::InvalidArtifact);
}
