#pragma once

// Clip annotation (provider + content-addressed cache), timestamp
// alignment of clips to traffic segments, and dataset assembly.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "t2t/embedding.hpp"
#include "t2t/encoder.hpp"
#include "t2t/error.hpp"
#include "t2t/flow_ingest.hpp"
#include "t2t/hash.hpp"

namespace t2t {

enum class CaptionSource { vlm, mock, human };

inline std::string to_string(CaptionSource s) {
  switch (s) {
    case CaptionSource::vlm: return "vlm";
    case CaptionSource::mock: return "mock";
    case CaptionSource::human: return "human";
  }
  return "unknown";
}

inline CaptionSource caption_source_from_string(const std::string& s) {
  if (s == "vlm") return CaptionSource::vlm;
  if (s == "mock") return CaptionSource::mock;
  if (s == "human") return CaptionSource::human;
  fail(ErrorKind::InvalidConfig, "unknown caption source: " + s);
}

struct CaptionRecord {
  std::string segment_id;
  std::vector<std::string> captions;
  int app_type = 0;
  CaptionSource source = CaptionSource::mock;
  double clip_start = 0.0;
  double clip_end = 0.0;

  bool operator==(const CaptionRecord&) const = default;

  void validate(int num_types = kNumAppTypes) const {
    require(!captions.empty(), ErrorKind::EmptyGold, "caption record " + segment_id + " has no captions");
    require(app_type >= 0 && app_type < num_types, ErrorKind::LabelOutOfRange,
            "caption record " + segment_id + " has app_type " + std::to_string(app_type));
  }

  nlohmann::json to_json() const {
    return {{"segment_id", segment_id}, {"captions", captions},   {"app_type", app_type},
            {"source", to_string(source)}, {"clip_start", clip_start}, {"clip_end", clip_end}};
  }

  static CaptionRecord from_json(const nlohmann::json& j) {
    CaptionRecord r;
    r.segment_id = j.at("segment_id").get<std::string>();
    r.captions = j.at("captions").get<std::vector<std::string>>();
    r.app_type = j.at("app_type").get<int>();
    r.source = caption_source_from_string(j.value("source", "human"));
    r.clip_start = j.value("clip_start", 0.0);
    r.clip_end = j.value("clip_end", 0.0);
    return r;
  }
};

inline void write_caption_records(std::ostream& os, const std::vector<CaptionRecord>& records) {
  for (const auto& r : records) os << r.to_json().dump() << '\n';
}

inline std::vector<CaptionRecord> read_caption_records(std::istream& is) {
  std::vector<CaptionRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(CaptionRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InvalidArtifact, "caption line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- clips

/// A clip as described by its metadata sidecar `<name>.json`:
/// {"app_type": "video", "start": 0, "end": 15, "verb": "scrolls",
///  "noun": "comments section", "clip": "<name>.mp4", "id": "..."}.
struct ClipInfo {
  std::string id;
  std::filesystem::path sidecar;
  std::filesystem::path media;  // empty when no media file is present
  int app_type = 0;
  double start = 0.0;
  double end = 0.0;
  std::string verb;
  std::string noun;
  std::string content_hash;  // sha256 of media bytes, or of the sidecar
};

inline std::string read_binary(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::MissingArtifact, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ClipInfo load_clip(const std::filesystem::path& sidecar) {
  nlohmann::json j;
  const std::string text = read_binary(sidecar);
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArtifact, "bad clip sidecar " + sidecar.string() + ": " + e.what());
  }
  ClipInfo c;
  c.sidecar = sidecar;
  c.id = j.value("id", sidecar.stem().string());
  const auto& at = j.at("app_type");
  c.app_type = at.is_string() ? app_type_index(at.get<std::string>()) : at.get<int>();
  require(c.app_type >= 0 && c.app_type < kNumAppTypes, ErrorKind::LabelOutOfRange,
          "clip " + c.id + " has an invalid app_type");
  c.start = j.value("start", 0.0);
  c.end = j.value("end", c.start + kSegmentSecs);
  c.verb = j.value("verb", "");
  c.noun = j.value("noun", "");
  if (j.contains("clip")) {
    c.media = sidecar.parent_path() / j.at("clip").get<std::string>();
    c.content_hash = sha256_hex(read_binary(c.media));
  } else {
    c.content_hash = sha256_hex(text);
  }
  return c;
}

/// All `*.json` sidecars of a directory, sorted by file name.
inline std::vector<ClipInfo> list_clips(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::MissingArtifact, "clip directory not found: " + dir.string());
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<ClipInfo> out;
  for (const auto& p : paths) out.push_back(load_clip(p));
  return out;
}

// ---------------------------------------------------------------- providers

inline constexpr const char* kPromptVersion = "annotate-v1";

inline std::string default_prompt(int n) {
  return "You are given a screen recording of a smartphone. Write " + std::to_string(n) +
         " different descriptions of what the user does on screen. Each description is one or two "
         "sentences, in the third person and present tense, and names the app type and the "
         "on-screen action. Return one description per line with no numbering.";
}

class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  virtual std::vector<std::string> request(const ClipInfo& clip, const std::string& prompt, int n) = 0;
  virtual CaptionSource source() const = 0;
  virtual std::string model_id() const = 0;
};

/// Offline provider: captions are a pure function of clip metadata and seed.
class MockProvider final : public CaptionProvider {
 public:
  explicit MockProvider(std::uint64_t seed = 0) : seed_(seed) {}

  std::vector<std::string> request(const ClipInfo& clip, const std::string&, int n) override {
    return mock_captions(clip.app_type, clip.verb, clip.noun, n, seed_);
  }
  CaptionSource source() const override { return CaptionSource::mock; }
  std::string model_id() const override { return "mock-v1:" + std::to_string(seed_); }

  static std::vector<std::string> mock_captions(int app_type, std::string verb, std::string noun, int n,
                                                std::uint64_t seed) {
    require(n >= 1, ErrorKind::InvalidConfig, "caption count must be >= 1");
    if (verb.empty()) verb = "uses";
    if (noun.empty()) noun = "main screen";
    const std::string app = app_type_labels().at(static_cast<std::size_t>(app_type));
    static const std::vector<std::string> subjects{"the user", "a user", "someone", "the person"};
    static const std::vector<std::string> patterns{
        "{s} {v} the {n} in the {a} app", "in the {a} app {s} {v} the {n}",
        "{s} opens the {a} app and {v} the {n}", "{s} is on a {a} app and {v} the {n}",
        "while using a {a} app {s} {v} the {n}"};
    std::vector<std::string> all;
    for (const auto& p : patterns) {
      for (const auto& s : subjects) {
        std::string out;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] == '{' && i + 2 < p.size() && p[i + 2] == '}') {
            const char slot = p[i + 1];
            out += slot == 's' ? s : slot == 'v' ? verb : slot == 'n' ? noun : app;
            i += 2;
          } else {
            out.push_back(p[i]);
          }
        }
        all.push_back(out);
      }
    }
    std::mt19937_64 rng(seed ^ fnv1a64(app + "|" + verb + "|" + noun));
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng() % i]);
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(all[static_cast<std::size_t>(i) % all.size()]);
    return out;
  }

 private:
  std::uint64_t seed_;
};

// ---------------------------------------------------------------- annotator

struct AnnotationStats {
  std::size_t remote_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t skipped = 0;
};

struct AnnotateOptions {
  std::filesystem::path cache_dir = ".cache/annotations";
  int captions_per_clip = 20;
  int parallelism = 4;
  int max_attempts = 3;
  double backoff_secs = 1.0;
  std::string prompt;  // empty: default_prompt(captions_per_clip)
};

inline std::string annotation_cache_key(const ClipInfo& clip, const std::string& prompt, const std::string& model,
                                        int n) {
  return sha256_hex(std::string(kPromptVersion) + "\n" + prompt + "\n" + model + "\n" + std::to_string(n) + "\n" +
                    clip.content_hash);
}

/// Annotates clips with bounded parallelism. Results are cached under
/// `<cache_dir>/<sha256>.json`; timeouts are retried with exponential
/// backoff and the clip is skipped (with a warning) once retries run out.
inline std::vector<CaptionRecord> annotate_clips(const std::vector<ClipInfo>& clips, CaptionProvider& provider,
                                                 const AnnotateOptions& opts, AnnotationStats* stats = nullptr,
                                                 std::ostream* warn = &std::cerr) {
  const std::string prompt = opts.prompt.empty() ? default_prompt(opts.captions_per_clip) : opts.prompt;
  std::filesystem::create_directories(opts.cache_dir);
  std::vector<std::optional<CaptionRecord>> results(clips.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> calls{0}, hits{0}, skipped{0};
  std::mutex write_mu;
  std::exception_ptr first_error;

  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= clips.size()) return;
      const ClipInfo& clip = clips[i];
      const std::string key = annotation_cache_key(clip, prompt, provider.model_id(), opts.captions_per_clip);
      const auto path = opts.cache_dir / (key + ".json");
      std::vector<std::string> captions;
      bool cached = false;
      if (std::filesystem::exists(path)) {
        try {
          captions = nlohmann::json::parse(read_binary(path)).at("captions").get<std::vector<std::string>>();
          cached = !captions.empty();
        } catch (const std::exception&) {
          cached = false;
        }
      }
      if (cached) {
        ++hits;
      } else {
        bool done = false;
        for (int attempt = 0; attempt < opts.max_attempts && !done; ++attempt) {
          try {
            ++calls;
            captions = provider.request(clip, prompt, opts.captions_per_clip);
            done = true;
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::ProviderTimeout) {
              std::lock_guard lock(write_mu);
              if (!first_error) first_error = std::current_exception();
              return;
            }
            if (attempt + 1 < opts.max_attempts && opts.backoff_secs > 0) {
              std::this_thread::sleep_for(std::chrono::duration<double>(opts.backoff_secs * std::pow(2.0, attempt)));
            }
          }
        }
        if (!done || captions.empty()) {
          ++skipped;
          std::lock_guard lock(write_mu);
          if (warn) *warn << "warning: skipping clip " << clip.id << " after " << opts.max_attempts << " attempts\n";
          continue;
        }
        std::lock_guard lock(write_mu);
        const auto tmp = path.string() + ".tmp";
        {
          std::ofstream out(tmp, std::ios::binary);
          out << nlohmann::json{{"captions", captions}, {"model", provider.model_id()}, {"prompt_version", kPromptVersion}}
                     .dump();
        }
        std::filesystem::rename(tmp, path);
      }
      CaptionRecord rec;
      rec.segment_id = clip.id;
      rec.captions = std::move(captions);
      rec.app_type = clip.app_type;
      rec.source = provider.source();
      rec.clip_start = clip.start;
      rec.clip_end = clip.end;
      results[i] = std::move(rec);
    }
  };

  const int workers = std::max(1, std::min<int>(opts.parallelism, static_cast<int>(clips.size())));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  if (stats) {
    stats->remote_calls = calls;
    stats->cache_hits = hits;
    stats->skipped = skipped;
  }
  std::vector<CaptionRecord> out;
  for (auto& r : results) {
    if (r) out.push_back(std::move(*r));
  }
  return out;
}

// ---------------------------------------------------------------- alignment

struct AlignedPair {
  std::size_t segment;  // index into the segment list
  std::size_t record;   // index into the caption-record list
  double overlap;
};

struct AlignmentResult {
  std::vector<AlignedPair> pairs;  // ordered by segment index
  std::size_t dropped_segments = 0;
  std::size_t dropped_records = 0;
};

inline double interval_overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

/// One-to-one pairing by largest positive overlap between the segment
/// window [start, start + segment_secs) and the clip interval.
inline AlignmentResult align_by_timestamp(const std::vector<FlowFeatureSequence>& segments,
                                          const std::vector<CaptionRecord>& records,
                                          double segment_secs = kSegmentSecs) {
  std::vector<AlignedPair> candidates;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const double s0 = segments[s].segment_start, s1 = s0 + segment_secs;
    for (std::size_t r = 0; r < records.size(); ++r) {
      const double ov = interval_overlap(s0, s1, records[r].clip_start, records[r].clip_end);
      if (ov > 0) candidates.push_back({s, r, ov});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const AlignedPair& a, const AlignedPair& b) { return a.overlap > b.overlap; });
  std::vector<bool> seg_used(segments.size(), false), rec_used(records.size(), false);
  AlignmentResult out;
  for (const auto& c : candidates) {
    if (seg_used[c.segment] || rec_used[c.record]) continue;
    seg_used[c.segment] = rec_used[c.record] = true;
    out.pairs.push_back(c);
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const AlignedPair& a, const AlignedPair& b) { return a.segment < b.segment; });
  out.dropped_segments = segments.size() - out.pairs.size();
  out.dropped_records = records.size() - out.pairs.size();
  return out;
}

inline std::vector<double> embed_sentence(const SentenceEmbedder& embedder, const std::string& text) {
  return embedder.embed(text);
}

// ---------------------------------------------------------------- dataset

struct DatasetRecord {
  FlowFeatureSequence sequence;
  std::string caption;
  int app_type = 0;
  std::vector<double> caption_embedding;
  std::string embedder_id;

  bool operator==(const DatasetRecord&) const = default;

  nlohmann::json to_json() const {
    return {{"segment_id", sequence.segment_id},
            {"segment_start", sequence.segment_start},
            {"features", sequence.features},
            {"mask", sequence.mask},
            {"caption", caption},
            {"app_type", app_type},
            {"caption_embedding", caption_embedding},
            {"embedder_id", embedder_id}};
  }

  static DatasetRecord from_json(const nlohmann::json& j) {
    DatasetRecord r;
    r.sequence.segment_id = j.at("segment_id").get<std::string>();
    r.sequence.segment_start = j.value("segment_start", 0.0);
    r.sequence.features = j.at("features").get<std::vector<std::vector<double>>>();
    r.sequence.mask = j.at("mask").get<std::vector<bool>>();
    require(r.sequence.mask.size() == r.sequence.features.size(), ErrorKind::ShapeMismatch,
            "record " + r.sequence.segment_id + ": mask length differs from feature rows");
    r.caption = j.at("caption").get<std::string>();
    r.app_type = j.at("app_type").get<int>();
    r.caption_embedding = j.value("caption_embedding", std::vector<double>{});
    r.embedder_id = j.value("embedder_id", "");
    return r;
  }
};

inline void write_dataset_jsonl(std::ostream& os, const std::vector<DatasetRecord>& records) {
  for (const auto& r : records) os << r.to_json().dump() << '\n';
}

inline std::vector<DatasetRecord> read_dataset_jsonl(std::istream& is) {
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(DatasetRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InvalidArtifact, "dataset line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<DatasetRecord> read_dataset_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::MissingArtifact, "cannot open dataset " + path.string());
  return read_dataset_jsonl(in);
}

inline void write_dataset_file(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::InvalidArtifact, "cannot write " + path.string());
  write_dataset_jsonl(out, records);
}

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;

  void validate() const {
    require(train >= 0 && val >= 0 && test >= 0, ErrorKind::InvalidSplit, "split fractions must be non-negative");
    require(std::abs(train + val + test - 1.0) < 1e-9, ErrorKind::InvalidSplit,
            "split fractions must sum to 1 (got " + std::to_string(train + val + test) + ")");
  }
};

struct DatasetSplits {
  std::vector<DatasetRecord> train, val, test;
};

/// Seeded Fisher-Yates with an explicit index rule so the permutation does
/// not depend on the standard library's distribution implementation.
template <class V>
void seeded_shuffle(V& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng() % i]);
}

/// Segment counts for each split: round(train * n), round(val * n), rest.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n))));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n))));
  return {n_train, n_val, n - n_train - n_val};
}

inline void check_no_leakage(const DatasetSplits& s) {
  std::map<std::string, int> owner;
  const std::vector<DatasetRecord>* parts[3] = {&s.train, &s.val, &s.test};
  for (int k = 0; k < 3; ++k) {
    for (const auto& r : *parts[k]) {
      auto [it, inserted] = owner.emplace(r.sequence.segment_id, k);
      require(inserted || it->second == k, ErrorKind::LeakageDetected,
              "segment " + r.sequence.segment_id + " appears in more than one split");
    }
  }
}

struct LabeledSegment {
  FlowFeatureSequence sequence;
  std::vector<std::string> captions;
  int app_type = 0;
};

/// Expands each segment into one record per caption and splits by segment.
inline DatasetSplits build_dataset(const std::vector<LabeledSegment>& segments, const SplitFractions& split,
                                   std::uint64_t seed, const SentenceEmbedder& embedder) {
  split.validate();
  std::set<std::string> ids;
  for (const auto& s : segments) {
    require(ids.insert(s.sequence.segment_id).second, ErrorKind::LeakageDetected,
            "duplicate segment_id " + s.sequence.segment_id + " would leak across splits");
  }
  std::vector<std::size_t> order(segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  seeded_shuffle(order, seed);
  const auto counts = split_counts(order.size(), split);
  std::unordered_map<std::string, std::vector<double>> cache;
  auto embed = [&](const std::string& text) -> const std::vector<double>& {
    auto it = cache.find(text);
    if (it == cache.end()) it = cache.emplace(text, embedder.embed(text)).first;
    return it->second;
  };
  DatasetSplits out;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto& seg = segments[order[pos]];
    auto& dest = pos < counts[0] ? out.train : pos < counts[0] + counts[1] ? out.val : out.test;
    for (const auto& c : seg.captions) {
      DatasetRecord r;
      r.sequence = seg.sequence;
      r.caption = c;
      r.app_type = seg.app_type;
      r.caption_embedding = embed(c);
      r.embedder_id = embedder.id();
      dest.push_back(std::move(r));
    }
  }
  check_no_leakage(out);
  return out;
}

/// Joins aligned segments with their caption records.
inline std::vector<LabeledSegment> join_aligned(const std::vector<FlowFeatureSequence>& segments,
                                                const std::vector<CaptionRecord>& records,
                                                const AlignmentResult& alignment) {
  std::vector<LabeledSegment> out;
  for (const auto& p : alignment.pairs) {
    const auto& rec = records[p.record];
    rec.validate();
    out.push_back({segments[p.segment], rec.captions, rec.app_type});
  }
  return out;
}

}  // namespace t2t
