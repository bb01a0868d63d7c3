#pragma once

// Corpus-level caption metrics: BLEU-4, METEOR (exact + stem stages),
// ROUGE-L and CIDEr-D.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "t2t/error.hpp"
#include "t2t/porter_stemmer.hpp"
#include "t2t/text.hpp"

namespace t2t {

using Tokens = std::vector<std::string>;

struct EvalItem {
  Tokens candidate;
  std::vector<Tokens> references;
};

using EvalCorpus = std::vector<EvalItem>;

inline void validate_corpus(const EvalCorpus& corpus) {
  require(!corpus.empty(), ErrorKind::TooFewItems, "evaluation corpus is empty");
  for (const auto& item : corpus) {
    require(!item.references.empty(), ErrorKind::EmptyGold, "evaluation item has no references");
  }
}

/// Tokenizes raw strings with the decoder tokenizer.
inline EvalCorpus make_corpus(const std::vector<std::string>& candidates,
                              const std::vector<std::vector<std::string>>& references) {
  require(candidates.size() == references.size(), ErrorKind::LengthMismatch,
          "candidate count " + std::to_string(candidates.size()) + " differs from reference count " +
              std::to_string(references.size()));
  EvalCorpus out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    EvalItem item{tokenize(candidates[i]), {}};
    for (const auto& r : references[i]) item.references.push_back(tokenize(r));
    out.push_back(std::move(item));
  }
  return out;
}

namespace detail {

using NgramCounts = std::map<Tokens, int>;

inline NgramCounts ngram_counts(const Tokens& toks, std::size_t n) {
  NgramCounts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Tokens(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

inline Tokens stem_all(const Tokens& toks) {
  PorterStemmer stem;
  Tokens out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(stem(t));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- BLEU-4

struct BleuOptions {
  bool smoothing = false;  // add-one on orders 2..4
};

inline double bleu4(const EvalCorpus& corpus, const BleuOptions& opts = {}) {
  validate_corpus(corpus);
  double matches[4] = {0, 0, 0, 0};
  double totals[4] = {0, 0, 0, 0};
  double cand_len = 0, ref_len = 0;
  for (const auto& item : corpus) {
    const auto c = item.candidate.size();
    cand_len += static_cast<double>(c);
    std::size_t best = item.references.front().size();
    for (const auto& r : item.references) {
      const auto d = [&](std::size_t len) { return len > c ? len - c : c - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cand = detail::ngram_counts(item.candidate, n);
      std::map<Tokens, int> max_ref;
      for (const auto& r : item.references) {
        for (const auto& [g, cnt] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : cand) {
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matches[n - 1] += std::min(cnt, it->second);
      }
      totals[n - 1] += c >= n ? static_cast<double>(c - n + 1) : 0.0;
    }
  }
  if (cand_len == 0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    double m = matches[n], t = totals[n];
    if (opts.smoothing && n > 0) m += 1, t += 1;
    if (m == 0 || t == 0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / 4.0);
}

// ---------------------------------------------------------------- METEOR

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

namespace detail {

/// One-to-one alignment in two stages (surface form, then Porter stem).
/// Within a stage each candidate token prefers the reference slot right
/// after the previous match, otherwise the leftmost free slot.
inline MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref) {
  std::vector<int> cand_to_ref(cand.size(), -1);
  std::vector<bool> ref_used(ref.size(), false);
  const Tokens cand_stem = stem_all(cand), ref_stem = stem_all(ref);
  for (int stage = 0; stage < 2; ++stage) {
    const Tokens& a = stage == 0 ? cand : cand_stem;
    const Tokens& b = stage == 0 ? ref : ref_stem;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (cand_to_ref[i] >= 0) continue;
      int prev = -1;
      for (std::size_t k = i; k-- > 0;) {
        if (cand_to_ref[k] >= 0) {
          prev = cand_to_ref[k];
          break;
        }
      }
      int pick = -1;
      const auto next = static_cast<std::size_t>(prev + 1);
      if (prev >= 0 && next < b.size() && !ref_used[next] && b[next] == a[i]) {
        pick = static_cast<int>(next);
      } else {
        for (std::size_t j = 0; j < b.size(); ++j) {
          if (!ref_used[j] && b[j] == a[i]) {
            pick = static_cast<int>(j);
            break;
          }
        }
      }
      if (pick >= 0) {
        cand_to_ref[i] = pick;
        ref_used[pick] = true;
      }
    }
  }
  MeteorAlignment out;
  int last_cand = -2, last_ref = -2;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const int j = cand_to_ref[i];
    if (j < 0) continue;
    ++out.matches;
    if (!(static_cast<int>(i) == last_cand + 1 && j == last_ref + 1)) ++out.chunks;
    last_cand = static_cast<int>(i);
    last_ref = j;
  }
  return out;
}

}  // namespace detail

inline double meteor_pair(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto a = detail::meteor_align(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(a.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

inline std::vector<double> meteor_items(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  std::vector<double> out;
  for (const auto& item : corpus) {
    double best = 0.0;
    for (const auto& r : item.references) best = std::max(best, meteor_pair(item.candidate, r));
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------- ROUGE-L

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_pair(const Tokens& cand, const Tokens& ref, double beta = 1.2) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(cand, ref));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(cand.size());
  const double r = lcs / static_cast<double>(ref.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

inline std::vector<double> rouge_l_items(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  std::vector<double> out;
  for (const auto& item : corpus) {
    double best = 0.0;
    for (const auto& r : item.references) best = std::max(best, rouge_l_pair(item.candidate, r));
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------- CIDEr-D

struct CiderOptions {
  double sigma = 6.0;
  double scale = 10.0;
  bool stem = true;
};

inline std::vector<double> cider_items(const EvalCorpus& corpus, const CiderOptions& opts = {}) {
  validate_corpus(corpus);
  require(corpus.size() >= 2, ErrorKind::TooFewItems, "CIDEr needs at least 2 corpus items");
  constexpr std::size_t kOrders = 4;
  using Vec = std::map<Tokens, double>;
  struct Doc {
    std::array<detail::NgramCounts, kOrders> counts;
    std::size_t length = 0;
  };
  auto cook = [&](const Tokens& t) {
    Doc d;
    const Tokens toks = opts.stem ? detail::stem_all(t) : t;
    d.length = toks.size();
    for (std::size_t n = 0; n < kOrders; ++n) d.counts[n] = detail::ngram_counts(toks, n + 1);
    return d;
  };
  std::vector<Doc> cands;
  std::vector<std::vector<Doc>> refs;
  std::map<Tokens, double> df;
  for (const auto& item : corpus) {
    cands.push_back(cook(item.candidate));
    refs.emplace_back();
    std::set<Tokens> seen;
    for (const auto& r : item.references) {
      refs.back().push_back(cook(r));
      for (const auto& counts : refs.back().back().counts) {
        for (const auto& kv : counts) seen.insert(kv.first);
      }
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_n = std::log(static_cast<double>(corpus.size()));
  auto weigh = [&](const Doc& d, std::array<Vec, kOrders>& vec, std::array<double, kOrders>& norm) {
    for (std::size_t n = 0; n < kOrders; ++n) {
      norm[n] = 0.0;
      for (const auto& [g, tf] : d.counts[n]) {
        auto it = df.find(g);
        const double doc_freq = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        const double w = static_cast<double>(tf) * (log_n - doc_freq);
        vec[n][g] = w;
        norm[n] += w * w;
      }
      norm[n] = std::sqrt(norm[n]);
    }
  };
  std::vector<double> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::array<Vec, kOrders> cv;
    std::array<double, kOrders> cn{};
    weigh(cands[i], cv, cn);
    double total = 0.0;
    for (const auto& rd : refs[i]) {
      std::array<Vec, kOrders> rv;
      std::array<double, kOrders> rn{};
      weigh(rd, rv, rn);
      const double delta = static_cast<double>(cands[i].length) - static_cast<double>(rd.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * opts.sigma * opts.sigma));
      double sum = 0.0;
      for (std::size_t n = 0; n < kOrders; ++n) {
        double val = 0.0;
        for (const auto& [g, w] : cv[n]) {
          auto it = rv[n].find(g);
          if (it != rv[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (cn[n] != 0 && rn[n] != 0) val /= cn[n] * rn[n];
        sum += val * penalty;
      }
      total += sum / static_cast<double>(kOrders);
    }
    out.push_back(opts.scale * total / static_cast<double>(refs[i].size()));
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double meteor(const EvalCorpus& corpus) { return mean_of(meteor_items(corpus)); }
inline double rouge_l(const EvalCorpus& corpus) { return mean_of(rouge_l_items(corpus)); }
inline double cider(const EvalCorpus& corpus, const CiderOptions& opts = {}) {
  return mean_of(cider_items(corpus, opts));
}

// ---------------------------------------------------------------- report

struct ScoreReport {
  std::optional<double> bleu4, meteor, rouge_l, cider;
  std::vector<double> meteor_items, rouge_l_items, cider_items;
  std::string notes = "METEOR uses exact and stem matching only; CIDEr is CIDEr-D (sigma 6, x10)";

  nlohmann::json to_json(bool with_items = false) const {
    nlohmann::json j = nlohmann::json::object();
    if (bleu4) j["bleu4"] = *bleu4;
    if (meteor) j["meteor"] = *meteor;
    if (rouge_l) j["rouge_l"] = *rouge_l;
    if (cider) j["cider"] = *cider;
    if (with_items) {
      nlohmann::json items = nlohmann::json::object();
      if (meteor) items["meteor"] = meteor_items;
      if (rouge_l) items["rouge_l"] = rouge_l_items;
      if (cider) items["cider"] = cider_items;
      j["per_item"] = items;
    }
    j["notes"] = notes;
    return j;
  }
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"bleu4", "meteor", "rouge_l", "cider"};
  return names;
}

/// Parses "bleu4,cider"; empty means all metrics.
inline std::set<std::string> parse_metric_list(const std::string& spec) {
  std::set<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    require(std::find(metric_names().begin(), metric_names().end(), cur) != metric_names().end(),
            ErrorKind::InvalidConfig, "unknown metric: " + cur);
    out.insert(cur);
    cur.clear();
  };
  for (char c : spec) {
    if (c == ',' || c == ' ') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  if (out.empty()) out.insert(metric_names().begin(), metric_names().end());
  return out;
}

inline ScoreReport score_corpus(const EvalCorpus& corpus, const std::set<std::string>& which = {},
                                const BleuOptions& bleu_opts = {}) {
  validate_corpus(corpus);
  auto want = [&](const char* m) { return which.empty() || which.count(m) > 0; };
  ScoreReport r;
  if (want("bleu4")) r.bleu4 = bleu4(corpus, bleu_opts);
  if (want("meteor")) {
    r.meteor_items = meteor_items(corpus);
    r.meteor = mean_of(r.meteor_items);
  }
  if (want("rouge_l")) {
    r.rouge_l_items = rouge_l_items(corpus);
    r.rouge_l = mean_of(r.rouge_l_items);
  }
  if (which.empty() && corpus.size() < 2) {
    r.notes += "; CIDEr skipped for a single-item corpus";
  } else if (want("cider")) {
    r.cider_items = cider_items(corpus);
    r.cider = mean_of(r.cider_items);
  }
  return r;
}

}  // namespace t2t
