#pragma once

// Seeded synthetic traffic/caption generator. Each profile draws packet
// trains per flow; flows go through the same featurizer as captured
// traffic. The caption is fixed by (app type, action), and the action also
// shapes the traffic, so caption content is recoverable from features.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "t2t/annotation.hpp"
#include "t2t/config.hpp"
#include "t2t/error.hpp"
#include "t2t/flow_ingest.hpp"
#include "t2t/text.hpp"

namespace t2t {

struct SynthAction {
  std::string verb;
  std::string noun;
};

struct AppProfile {
  int app_type = 0;
  int flows_min = 1, flows_max = 1;      // flows per segment
  int packets_min = 2, packets_max = 2;  // packets per flow
  double up_size_mean = 100, up_size_sd = 10;
  double down_size_mean = 100, down_size_sd = 10;
  double up_fraction = 0.5;  // probability a packet travels initiator -> responder
  double burstiness = 0.0;   // probability the next packet follows within a burst gap
  double mean_gap = 0.5;     // seconds, between non-burst packets
  double tcp_fraction = 1.0;
  std::vector<std::string> templates;  // "{verb}" and "{noun}" slots
  std::vector<SynthAction> actions;

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorKind::InvalidProfile, what); };
    check(app_type >= 0 && app_type < kNumAppTypes, "app_type out of range");
    check(flows_min >= 1 && flows_max >= flows_min, "invalid flow-count range");
    check(packets_min >= 1 && packets_max >= packets_min, "invalid packet-count range");
    check(up_size_mean > 0 && down_size_mean > 0 && up_size_sd > 0 && down_size_sd > 0,
          "packet-size parameters must be positive");
    check(up_fraction > 0 && up_fraction < 1, "up_fraction must be in (0, 1)");
    check(burstiness >= 0 && burstiness <= 1, "burstiness must be in [0, 1]");
    check(mean_gap > 0, "mean_gap must be positive");
    check(tcp_fraction >= 0 && tcp_fraction <= 1, "tcp_fraction must be in [0, 1]");
    check(templates.size() >= 3, "a profile needs at least 3 caption templates");
    check(!actions.empty(), "a profile needs at least one action");
    for (const auto& t : templates) {
      check(t.find("{verb}") != std::string::npos && t.find("{noun}") != std::string::npos,
            "template lacks a {verb} or {noun} slot: " + t);
    }
  }

  /// Action `a` scales packets per flow and downlink sizes.
  double action_packet_scale(int a) const { return 0.5 + 0.4 * a; }
  double action_size_scale(int a) const { return 0.8 + 0.15 * a; }
};

inline std::string fill_template(const std::string& tmpl, const SynthAction& action) {
  std::string out = tmpl;
  auto replace = [&](const std::string& slot, const std::string& value) {
    for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + value.size())) {
      out.replace(pos, slot.size(), value);
    }
  };
  replace("{verb}", action.verb);
  replace("{noun}", action.noun);
  return out;
}

/// Defaults, indexed by app type (music, video, shopping, messaging,
/// social media).
inline std::vector<AppProfile> default_profiles() {
  std::vector<AppProfile> p(kNumAppTypes);
  p[0] = {0, 3, 6, 40, 80, 80, 20, 900, 200, 0.25, 0.3, 0.15, 1.0,
          {"the user {verb} the {noun} in a music app", "someone {verb} the {noun} while listening to songs",
           "a listener {verb} the {noun} on the music player"},
          {{"plays", "playlist"}, {"skips", "track"}, {"browses", "album library"}, {"streams", "radio station"}}};
  p[1] = {1, 8, 14, 80, 160, 90, 30, 1100, 150, 0.15, 0.85, 0.3, 1.0,
          {"the user {verb} the {noun} in a video app", "a viewer {verb} the {noun} on the video player",
           "someone {verb} the {noun} while watching videos"},
          {{"watches", "short clip"}, {"scrolls", "comments section"}, {"buffers", "live broadcast"},
           {"loads", "movie trailer"}}};
  p[2] = {2, 10, 18, 15, 40, 400, 150, 700, 300, 0.45, 0.4, 0.25, 1.0,
          {"the user {verb} the {noun} in a shopping app", "a shopper {verb} the {noun} in the online store",
           "someone {verb} the {noun} while shopping online"},
          {{"searches", "product catalog"}, {"adds", "item to the cart"}, {"views", "product photos"},
           {"checks", "order status"}}};
  p[3] = {3, 2, 4, 6, 16, 180, 60, 160, 60, 0.5, 0.1, 0.8, 0.7,
          {"the user {verb} the {noun} in a messaging app", "a person {verb} the {noun} in a private conversation",
           "someone {verb} the {noun} while chatting with friends"},
          {{"sends", "text message"}, {"reads", "chat history"}, {"types", "quick reply"}, {"shares", "voice note"}}};
  p[4] = {4, 6, 10, 40, 90, 150, 50, 1000, 250, 0.3, 0.7, 0.2, 1.0,
          {"the user {verb} the {noun} in a social media app", "a member {verb} the {noun} on the social network",
           "someone {verb} the {noun} while browsing the timeline"},
          {{"likes", "friend post"}, {"refreshes", "news feed"}, {"uploads", "profile picture"},
           {"follows", "new account"}}};
  return p;
}

struct SynthSample {
  FlowFeatureSequence sequence;
  std::string caption;
  int app_type = 0;
  int action = 0;
  std::uint64_t seed = 0;

  bool operator==(const SynthSample&) const = default;
};

struct SynthOptions {
  double segment_secs = kSegmentSecs;
  int max_flows = kMaxFlows;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xBF58476D1CE4E5B9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double normal(std::mt19937_64& rng, double mean, double sd) {
  const double u1 = std::max(unit(rng), 1e-300), u2 = unit(rng);
  return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

inline Flow synth_flow(const AppProfile& prof, int action, std::mt19937_64& rng, double window_start,
                       double window_end, int flow_index) {
  Flow f;
  const bool tcp = unit(rng) < prof.tcp_fraction;
  const std::string client = "10.0.0.2";
  const std::string server = "203.0.113." + std::to_string(1 + flow_index % 250);
  const auto client_port = static_cast<std::uint16_t>(40000 + flow_index);
  const std::uint16_t server_port = tcp ? 443 : static_cast<std::uint16_t>(3478 + prof.app_type);
  f.initiator_addr = client;
  f.initiator_port = client_port;
  f.responder_port = server_port;
  const double span = window_end - window_start;
  double t = window_start + unit(rng) * span * 0.8;
  f.start_time = t;
  const int base = uniform_int(rng, prof.packets_min, prof.packets_max);
  const int count = std::max(2, static_cast<int>(std::lround(base * prof.action_packet_scale(action))));
  const double down_mean = prof.down_size_mean * prof.action_size_scale(action);
  for (int k = 0; k < count && t < window_end; ++k) {
    const bool up = k == 0 || unit(rng) < prof.up_fraction;
    PacketRecord p;
    p.timestamp = t;
    p.protocol = tcp ? Protocol::TCP : Protocol::UDP;
    p.src_addr = up ? client : server;
    p.dst_addr = up ? server : client;
    p.src_port = up ? client_port : server_port;
    p.dst_port = up ? server_port : client_port;
    const double size = up ? normal(rng, prof.up_size_mean, prof.up_size_sd) : normal(rng, down_mean, prof.down_size_sd);
    p.length = static_cast<std::uint32_t>(std::clamp(std::lround(size), 40L, 1500L));
    if (tcp) {
      p.tcp_flags = k == 0 ? tcp_flag::SYN : static_cast<std::uint8_t>(tcp_flag::ACK | (p.length > 100 ? tcp_flag::PSH : 0));
    }
    (up ? f.packets_up : f.packets_down).push_back(p);
    const double gap = unit(rng) < prof.burstiness ? 0.001 + 0.049 * unit(rng)
                                                   : -prof.mean_gap * std::log(std::max(unit(rng), 1e-12));
    t += gap;
  }
  f.key = FlowKey::from_packet(f.packets_up.front());
  return f;
}

}  // namespace detail

/// One sample of profile `prof` with the given action and seed.
inline SynthSample synth_sample(const AppProfile& prof, int action, std::uint64_t sample_seed, double segment_start,
                                const std::string& segment_id, const SynthOptions& opts = {}) {
  std::mt19937_64 rng(sample_seed);
  const double end = segment_start + opts.segment_secs;
  const int flows = std::min(detail::uniform_int(rng, prof.flows_min, prof.flows_max), opts.max_flows);
  std::vector<Flow> fl;
  for (int i = 0; i < flows; ++i) fl.push_back(detail::synth_flow(prof, action, rng, segment_start, end, i));
  std::stable_sort(fl.begin(), fl.end(), [](const Flow& a, const Flow& b) { return a.start_time < b.start_time; });
  SynthSample s;
  s.sequence.segment_id = segment_id;
  s.sequence.segment_start = segment_start;
  s.sequence.features.assign(opts.max_flows, std::vector<double>(features::kDim, 0.0));
  s.sequence.mask.assign(opts.max_flows, false);
  for (std::size_t r = 0; r < fl.size(); ++r) {
    s.sequence.features[r] = featurize_flow(fl[r], segment_start, end);
    s.sequence.mask[r] = true;
  }
  s.app_type = prof.app_type;
  s.action = action;
  s.seed = sample_seed;
  const auto& tmpl = prof.templates[static_cast<std::size_t>(action) % prof.templates.size()];
  s.caption = fill_template(tmpl, prof.actions[static_cast<std::size_t>(action)]);
  return s;
}

/// Balanced generation: sample i of every profile is emitted before sample
/// i + 1 of any profile; actions cycle within each profile.
inline std::vector<SynthSample> generate(const std::vector<AppProfile>& profiles, int n_per_type, std::uint64_t seed,
                                         const SynthOptions& opts = {}) {
  require(n_per_type >= 1, ErrorKind::InvalidConfig, "n_per_type must be >= 1");
  require(!profiles.empty(), ErrorKind::InvalidProfile, "no profiles given");
  for (const auto& p : profiles) p.validate();
  std::vector<SynthSample> out;
  out.reserve(profiles.size() * static_cast<std::size_t>(n_per_type));
  for (int i = 0; i < n_per_type; ++i) {
    for (std::size_t k = 0; k < profiles.size(); ++k) {
      const auto& prof = profiles[k];
      const int action = i % static_cast<int>(prof.actions.size());
      const std::size_t index = out.size();
      char id[64];
      std::snprintf(id, sizeof id, "synth_%06zu", index);
      out.push_back(synth_sample(prof, action, detail::mix_seed(seed, k, static_cast<std::uint64_t>(i)),
                                 static_cast<double>(index) * opts.segment_secs, id, opts));
    }
  }
  return out;
}

/// Converts samples to dataset records (one caption each).
inline std::vector<DatasetRecord> to_dataset_records(const std::vector<SynthSample>& samples,
                                                     const SentenceEmbedder& embedder) {
  std::vector<DatasetRecord> out;
  std::map<std::string, std::vector<double>> cache;
  for (const auto& s : samples) {
    auto it = cache.find(s.caption);
    if (it == cache.end()) it = cache.emplace(s.caption, embedder.embed(s.caption)).first;
    out.push_back({s.sequence, s.caption, s.app_type, it->second, embedder.id()});
  }
  return out;
}

/// Segment-level split of synthetic samples through `build_dataset`.
inline DatasetSplits synth_splits(const std::vector<SynthSample>& samples, const SplitFractions& split,
                                  std::uint64_t seed, const SentenceEmbedder& embedder) {
  std::vector<LabeledSegment> segs;
  segs.reserve(samples.size());
  for (const auto& s : samples) segs.push_back({s.sequence, {s.caption}, s.app_type});
  return build_dataset(segs, split, seed, embedder);
}

/// Mean of the valid rows of a sequence.
inline std::vector<double> pooled_features(const FlowFeatureSequence& seq) {
  const std::size_t dim = seq.features.empty() ? 0 : seq.features.front().size();
  std::vector<double> out(dim, 0.0);
  double n = 0;
  for (std::size_t r = 0; r < seq.rows(); ++r) {
    if (!seq.mask[r]) continue;
    for (std::size_t d = 0; d < dim; ++d) out[d] += seq.features[r][d];
    n += 1;
  }
  if (n > 0) {
    for (double& v : out) v /= n;
  }
  return out;
}

/// Nearest-centroid accuracy on z-scored pooled features under k-fold
/// cross-validation. Folds come from a seeded permutation; statistics are
/// fit on the training folds only.
inline double separability_report(const std::vector<std::vector<double>>& x, const std::vector<int>& labels,
                                  int folds = 5, std::uint64_t seed = 0) {
  require(x.size() == labels.size(), ErrorKind::LengthMismatch, "feature and label counts differ");
  std::set<int> types(labels.begin(), labels.end());
  require(types.size() >= 2, ErrorKind::TooFewTypes, "separability needs at least 2 app types");
  require(folds >= 2, ErrorKind::InvalidConfig, "separability needs at least 2 folds");
  const std::size_t dim = x.front().size();
  std::vector<std::size_t> perm(x.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  seeded_shuffle(perm, seed);
  std::vector<int> fold_of(x.size());
  for (std::size_t pos = 0; pos < perm.size(); ++pos) fold_of[perm[pos]] = static_cast<int>(pos % folds);
  std::size_t correct = 0, total = 0;
  for (int fold = 0; fold < folds; ++fold) {
    std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
    double n = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (fold_of[i] == fold) continue;
      for (std::size_t d = 0; d < dim; ++d) mean[d] += x[i][d];
      n += 1;
    }
    if (n == 0) continue;
    for (double& m : mean) m /= n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (fold_of[i] == fold) continue;
      for (std::size_t d = 0; d < dim; ++d) sd[d] += (x[i][d] - mean[d]) * (x[i][d] - mean[d]);
    }
    for (double& s : sd) s = std::sqrt(s / n) > 1e-12 ? std::sqrt(s / n) : 1.0;
    std::map<int, std::vector<double>> centroid;
    std::map<int, double> count;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (fold_of[i] == fold) continue;
      auto& c = centroid[labels[i]];
      c.resize(dim, 0.0);
      for (std::size_t d = 0; d < dim; ++d) c[d] += (x[i][d] - mean[d]) / sd[d];
      count[labels[i]] += 1;
    }
    for (auto& [k, c] : centroid) {
      for (double& v : c) v /= count[k];
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (fold_of[i] != fold) continue;
      int best = -1;
      double best_d = 0;
      for (const auto& [k, c] : centroid) {
        double dist = 0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double z = (x[i][d] - mean[d]) / sd[d] - c[d];
          dist += z * z;
        }
        if (best < 0 || dist < best_d) best = k, best_d = dist;
      }
      correct += best == labels[i];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

inline double separability_report(const std::vector<SynthSample>& samples, int folds = 5, std::uint64_t seed = 0) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& s : samples) {
    x.push_back(pooled_features(s.sequence));
    y.push_back(s.app_type);
  }
  require(!x.empty(), ErrorKind::TooFewTypes, "no samples");
  return separability_report(x, y, folds, seed);
}

/// Vocabulary of all captions a profile can emit.
inline std::set<std::string> profile_vocabulary(const AppProfile& prof) {
  std::set<std::string> out;
  for (const auto& t : prof.templates) {
    for (const auto& a : prof.actions) {
      for (auto& tok : tokenize(fill_template(t, a))) out.insert(tok);
    }
  }
  return out;
}

}  // namespace t2t
