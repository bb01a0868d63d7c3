// t2t: command-line front end for extraction, annotation, dataset
// assembly, synthetic data, training, captioning and evaluation.
//
// Exit codes: 0 ok, 1 missing/invalid artifact, 2 bad configuration,
// 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "t2t/t2t.hpp"
#include "t2t/vlm_provider.hpp"

namespace fs = std::filesystem;
using namespace t2t;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::InvalidSplit:
    case ErrorKind::LeakageDetected:
    case ErrorKind::InvalidProfile:
    case ErrorKind::ProviderAuthError:
      return 2;
    case ErrorKind::NonFiniteLoss:
      return 3;
    default:
      return 1;
  }
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  std::vector<std::string> overrides;

  RunConfig load() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      require(eq != std::string::npos, ErrorKind::InvalidConfig, "--set expects key=value, got " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.train.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::InvalidArtifact, "cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::MissingArtifact, "cannot open " + path.string());
  return in;
}

std::vector<std::string> read_lines(const fs::path& path) {
  auto in = open_in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  while (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

SplitFractions parse_split(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      v.push_back(std::stod(part));
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidSplit, "bad split fraction: " + part);
    }
  }
  require(v.size() == 3, ErrorKind::InvalidSplit, "--split expects three comma-separated fractions");
  SplitFractions f{v[0], v[1], v[2]};
  f.validate();
  return f;
}

void write_splits(const fs::path& dir, const DatasetSplits& s, const nlohmann::json& manifest) {
  fs::create_directories(dir);
  write_dataset_file(dir / "train.jsonl", s.train);
  write_dataset_file(dir / "val.jsonl", s.val);
  write_dataset_file(dir / "test.jsonl", s.test);
  auto out = open_out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

std::vector<FlowFeatureSequence> segments_from_pcap(const fs::path& pcap, const RunConfig& cfg,
                                                    PcapParseResult* stats = nullptr, std::size_t* flows = nullptr) {
  auto parsed = parse_pcap(pcap.string());
  auto fl = assemble_flows(parsed.packets);
  if (flows) *flows = fl.size();
  auto segs = segment_flows(fl, cfg.extract.segment_secs, cfg.extract.max_flows, pcap.stem().string());
  if (stats) *stats = std::move(parsed);
  return segs;
}

// ---------------------------------------------------------------- commands

int cmd_extract(const Globals& g, const std::string& pcap, const std::string& out_path,
                std::optional<double> segment_secs, std::optional<int> max_flows) {
  RunConfig cfg = g.load();
  if (segment_secs) cfg.extract.segment_secs = *segment_secs;
  if (max_flows) cfg.extract.max_flows = *max_flows;
  cfg.validate();
  PcapParseResult stats;
  std::size_t flows = 0;
  const auto segs = segments_from_pcap(pcap, cfg, &stats, &flows);
  std::size_t kept = 0;
  for (const auto& s : segs) kept += s.valid_count();
  {
    auto out = open_out(out_path);
    write_segments_jsonl(out, segs);
  }
  const std::size_t dropped_frames = stats.truncated + stats.non_ip + stats.non_transport;
  std::cout << "packets " << stats.packets.size() << "\nflows " << flows << "\nsegments " << segs.size()
            << "\ndropped_frames " << dropped_frames << "\ndropped_flows " << (flows - kept) << '\n';
  return 0;
}

int cmd_annotate(const Globals& g, const std::string& clips, const std::string& provider_name,
                 const std::string& prompt_file, const std::string& out_path, std::optional<std::string> cache_dir) {
  const RunConfig cfg = g.load();
  AnnotateOptions opts;
  opts.cache_dir = cache_dir ? *cache_dir : cfg.annotation.cache_dir;
  opts.captions_per_clip = cfg.annotation.captions_per_clip;
  opts.parallelism = cfg.annotation.parallelism;
  if (!prompt_file.empty()) {
    auto in = open_in(prompt_file);
    std::stringstream ss;
    ss << in.rdbuf();
    opts.prompt = ss.str();
  }
  std::unique_ptr<CaptionProvider> provider;
  if (provider_name == "mock") {
    provider = std::make_unique<MockProvider>(cfg.train.seed);
  } else if (provider_name == "vlm") {
    provider = std::make_unique<VlmProvider>(cfg.annotation.vlm_endpoint, cfg.annotation.vlm_model,
                                             cfg.annotation.vlm_timeout_secs);
  } else {
    fail(ErrorKind::InvalidConfig, "unknown provider: " + provider_name + " (expected mock or vlm)");
  }
  const auto clip_list = list_clips(clips);
  AnnotationStats stats;
  const auto records = annotate_clips(clip_list, *provider, opts, &stats);
  {
    auto out = open_out(out_path);
    write_caption_records(out, records);
  }
  std::cout << "clips " << clip_list.size() << "\nrecords " << records.size() << "\nremote_calls "
            << stats.remote_calls << "\ncache_hits " << stats.cache_hits << "\nskipped " << stats.skipped << '\n';
  return 0;
}

int cmd_dataset(const Globals& g, const std::string& segments_path, const std::string& captions_path,
                const std::string& split_text, const std::string& out_dir) {
  const RunConfig cfg = g.load();
  const auto split = parse_split(split_text);
  auto seg_in = open_in(segments_path);
  const auto segments = read_segments_jsonl(seg_in);
  auto cap_in = open_in(captions_path);
  const auto records = read_caption_records(cap_in);
  const auto alignment = align_by_timestamp(segments, records, cfg.extract.segment_secs);
  const auto joined = join_aligned(segments, records, alignment);
  const auto embedder = make_embedder(cfg.annotation.embedder, cfg.annotation.sentence_dim);
  const auto splits = build_dataset(joined, split, cfg.train.seed, *embedder);
  nlohmann::json manifest = {{"embedder_id", embedder->id()},
                             {"seed", cfg.train.seed},
                             {"split", {split.train, split.val, split.test}},
                             {"records", {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}}},
                             {"aligned_segments", alignment.pairs.size()},
                             {"dropped_segments", alignment.dropped_segments},
                             {"dropped_records", alignment.dropped_records}};
  write_splits(out_dir, splits, manifest);
  std::cout << "aligned " << alignment.pairs.size() << "\ndropped_segments " << alignment.dropped_segments
            << "\ndropped_records " << alignment.dropped_records << "\ntrain " << splits.train.size() << "\nval "
            << splits.val.size() << "\ntest " << splits.test.size() << '\n';
  return 0;
}

int cmd_synth(const Globals& g, int n_per_type, const std::string& out_path, const std::string& split_dir,
              const std::string& split_text) {
  const RunConfig cfg = g.load();
  SynthOptions opts;
  opts.segment_secs = cfg.extract.segment_secs;
  opts.max_flows = cfg.encoder.max_flows;
  const auto samples = generate(default_profiles(), n_per_type, cfg.train.seed, opts);
  const auto embedder = make_embedder(cfg.annotation.embedder, cfg.annotation.sentence_dim);
  if (!out_path.empty()) write_dataset_file(out_path, to_dataset_records(samples, *embedder));
  if (!split_dir.empty()) {
    const auto split = parse_split(split_text);
    const auto splits = synth_splits(samples, split, cfg.train.seed, *embedder);
    write_splits(split_dir, splits,
                 {{"embedder_id", embedder->id()},
                  {"seed", cfg.train.seed},
                  {"n_per_type", n_per_type},
                  {"split", {split.train, split.val, split.test}}});
  }
  std::cout << "samples " << samples.size() << '\n';
  if (g.verbose) std::cerr << "separability " << separability_report(samples) << '\n';
  return 0;
}

int cmd_train(const Globals& g, const std::string& train_path, const std::string& val_path,
              const std::string& out_dir, const std::string& log_path) {
  const RunConfig cfg = g.load();
  const auto train = read_dataset_file(train_path);
  require(!train.empty(), ErrorKind::EmptyDataset, "training file " + train_path + " has no records");
  const auto val = val_path.empty() ? std::vector<DatasetRecord>{} : read_dataset_file(val_path);
  TrainOptions opts;
  opts.checkpoint_dir = fs::path(out_dir);
  opts.metrics_log = log_path.empty() ? fs::path(out_dir) / "metrics.jsonl" : fs::path(log_path);
  if (g.verbose) opts.on_epoch = [](const EpochMetrics& m) { std::cerr << m.to_json().dump() << '\n'; };
  const auto result = train_model<float>(train, val, cfg, opts);
  std::cout << "best_epoch " << result.best_epoch << "\nepochs_run " << result.history.size() << "\ncheckpoint "
            << out_dir << '\n';
  return 0;
}

std::vector<FlowFeatureSequence> load_inputs(const std::string& pcap, const std::string& segments,
                                             const RunConfig& cfg) {
  require(pcap.empty() != segments.empty(), ErrorKind::InvalidConfig, "give exactly one of --pcap or --segments");
  if (!pcap.empty()) return segments_from_pcap(pcap, cfg);
  auto in = open_in(segments);
  return read_segments_jsonl(in);
}

int cmd_caption(const Globals& g, const std::string& checkpoint, const std::string& pcap,
                const std::string& segments) {
  require(fs::exists(fs::path(checkpoint) / "manifest.json"), ErrorKind::MissingArtifact,
          "no checkpoint at " + checkpoint);
  auto model = load_checkpoint<float>(checkpoint);
  RunConfig cfg = model.config;
  if (!g.overrides.empty() || !g.config_path.empty()) {
    const RunConfig user = g.load();
    cfg.extract = user.extract;
    model.config.decoder.beam_width = user.decoder.beam_width;
  }
  const auto inputs = load_inputs(pcap, segments, cfg);
  for (const auto& seq : inputs) std::cout << model.caption(seq) << '\n';
  return 0;
}

int cmd_evaluate(const Globals& g, const std::string& candidates, const std::vector<std::string>& references,
                 const std::string& checkpoint, const std::string& dataset, const std::string& metrics,
                 bool per_item, bool smooth) {
  (void)g;
  const auto which = metrics.empty() ? std::set<std::string>{} : parse_metric_list(metrics);
  EvalCorpus corpus;
  if (!checkpoint.empty()) {
    require(!dataset.empty(), ErrorKind::InvalidConfig, "--checkpoint needs --dataset");
    require(fs::exists(fs::path(checkpoint) / "manifest.json"), ErrorKind::MissingArtifact,
            "no checkpoint at " + checkpoint);
    auto model = load_checkpoint<float>(checkpoint);
    const auto records = read_dataset_file(dataset);
    corpus = caption_corpus(model, group_by_segment(records));
  } else {
    require(!candidates.empty() && !references.empty(), ErrorKind::InvalidConfig,
            "give --candidates with --references, or --checkpoint with --dataset");
    const auto cands = read_lines(candidates);
    std::vector<std::vector<std::string>> refs(cands.size());
    for (const auto& rf : references) {
      const auto lines = read_lines(rf);
      require(lines.size() == cands.size(), ErrorKind::LengthMismatch,
              rf + " has " + std::to_string(lines.size()) + " lines, candidates have " + std::to_string(cands.size()));
      for (std::size_t i = 0; i < lines.size(); ++i) refs[i].push_back(lines[i]);
    }
    corpus = make_corpus(cands, refs);
  }
  const auto report = score_corpus(corpus, which, BleuOptions{smooth});
  std::cout << report.to_json(per_item).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic-to-text: describe smartphone app activity from encrypted traffic"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Key-value configuration file");
  app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_flag("-v,--verbose", g.verbose, "Progress output on stderr");
  app.add_option("--set", g.overrides, "Configuration override key=value (repeatable)");

  std::function<int()> run;

  auto* extract = app.add_subcommand("extract", "PCAP -> segment JSONL");
  std::string ex_pcap, ex_out = "segments.jsonl";
  std::optional<double> ex_secs;
  std::optional<int> ex_flows;
  extract->add_option("pcap,--pcap", ex_pcap, "Capture file")->required();
  extract->add_option("-o,--out", ex_out, "Output JSONL");
  extract->add_option("--segment-secs", ex_secs, "Window length in seconds");
  extract->add_option("--max-flows", ex_flows, "Flows kept per window");
  extract->callback([&] { run = [&] { return cmd_extract(g, ex_pcap, ex_out, ex_secs, ex_flows); }; });

  auto* annotate = app.add_subcommand("annotate", "Caption screen-recording clips");
  std::string an_clips, an_provider = "mock", an_prompt, an_out = "captions.jsonl";
  std::optional<std::string> an_cache;
  annotate->add_option("clips,--clips", an_clips, "Directory of clip sidecar JSON files")->required();
  annotate->add_option("--provider", an_provider, "mock or vlm");
  annotate->add_option("--prompt-file", an_prompt, "Replace the built-in prompt");
  annotate->add_option("--cache-dir", an_cache, "Annotation cache directory");
  annotate->add_option("-o,--out", an_out, "Output caption-record JSONL");
  annotate->callback([&] { run = [&] { return cmd_annotate(g, an_clips, an_provider, an_prompt, an_out, an_cache); }; });

  auto* dataset = app.add_subcommand("dataset", "Join segments and captions into split JSONL files");
  std::string ds_segments, ds_captions, ds_split = "0.8,0.1,0.1", ds_out = "dataset";
  dataset->add_option("--segments", ds_segments, "Segment JSONL from extract")->required();
  dataset->add_option("--captions", ds_captions, "Caption-record JSONL from annotate")->required();
  dataset->add_option("--split", ds_split, "train,val,test fractions");
  dataset->add_option("-o,--out", ds_out, "Output directory");
  dataset->callback([&] { run = [&] { return cmd_dataset(g, ds_segments, ds_captions, ds_split, ds_out); }; });

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  int sy_n = 10;
  std::string sy_out, sy_split_dir, sy_split = "0.8,0.1,0.1";
  synth->add_option("--n-per-type", sy_n, "Samples per app type");
  synth->add_option("-o,--out", sy_out, "Output dataset JSONL");
  synth->add_option("--split-dir", sy_split_dir, "Also write train/val/test files here");
  synth->add_option("--split", sy_split, "train,val,test fractions for --split-dir");
  synth->callback([&] {
    run = [&] {
      require(!sy_out.empty() || !sy_split_dir.empty(), ErrorKind::InvalidConfig, "give --out and/or --split-dir");
      return cmd_synth(g, sy_n, sy_out, sy_split_dir, sy_split);
    };
  });

  auto* train = app.add_subcommand("train", "Train a model");
  std::string tr_train, tr_val, tr_out = "checkpoint", tr_log;
  train->add_option("--train", tr_train, "Training dataset JSONL")->required();
  train->add_option("--val", tr_val, "Validation dataset JSONL");
  train->add_option("-o,--out", tr_out, "Checkpoint directory");
  train->add_option("--log", tr_log, "Metrics JSONL (default <out>/metrics.jsonl)");
  train->callback([&] { run = [&] { return cmd_train(g, tr_train, tr_val, tr_out, tr_log); }; });

  auto* caption = app.add_subcommand("caption", "Caption traffic with a trained model");
  std::string ca_ckpt, ca_pcap, ca_segments;
  caption->add_option("--checkpoint", ca_ckpt, "Checkpoint directory")->required();
  caption->add_option("--pcap", ca_pcap, "Capture file");
  caption->add_option("--segments", ca_segments, "Segment or dataset JSONL");
  caption->callback([&] { run = [&] { return cmd_caption(g, ca_ckpt, ca_pcap, ca_segments); }; });

  auto* evaluate = app.add_subcommand("evaluate", "Score captions");
  std::string ev_cands, ev_ckpt, ev_dataset, ev_metrics;
  std::vector<std::string> ev_refs;
  bool ev_items = false, ev_smooth = false;
  evaluate->add_option("--candidates", ev_cands, "One candidate caption per line");
  evaluate->add_option("--references", ev_refs, "Reference files, line-aligned with candidates");
  evaluate->add_option("--checkpoint", ev_ckpt, "Caption --dataset with this model and score it");
  evaluate->add_option("--dataset", ev_dataset, "Dataset JSONL (references grouped by segment)");
  evaluate->add_option("--metrics", ev_metrics, "Comma-separated subset of bleu4,meteor,rouge_l,cider");
  evaluate->add_flag("--per-item", ev_items, "Include per-item scores");
  evaluate->add_flag("--bleu-smoothing", ev_smooth, "Add-one smoothing for BLEU orders 2-4");
  evaluate->callback([&] {
    run = [&] { return cmd_evaluate(g, ev_cands, ev_refs, ev_ckpt, ev_dataset, ev_metrics, ev_items, ev_smooth); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
