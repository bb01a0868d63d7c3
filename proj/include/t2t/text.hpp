#pragma once

// Caption tokenization and the decoder vocabulary.

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "t2t/error.hpp"

namespace t2t {

/// Lowercases and splits on whitespace and ASCII punctuation; punctuation
/// is dropped. Bytes >= 0x80 are kept inside tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `words` are the non-special tokens in index order (starting at 4).
  explicit Vocabulary(const std::vector<std::string>& words) {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& w : words) {
      require(!w.empty(), ErrorKind::InvalidArtifact, "empty vocabulary token");
      tokens_.push_back(w);
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const bool inserted = index_.emplace(tokens_[i], static_cast<int>(i)).second;
      require(inserted, ErrorKind::InvalidArtifact, "duplicate vocabulary token: " + tokens_[i]);
    }
  }

  /// Keeps tokens seen at least `min_freq` times, most frequent first, ties
  /// alphabetical.
  static Vocabulary build(const std::vector<std::string>& captions, int min_freq) {
    std::map<std::string, int> counts;
    for (const auto& c : captions) {
      for (auto& tok : tokenize(c)) ++counts[tok];
    }
    std::vector<std::pair<std::string, int>> kept;
    for (auto& [tok, n] : counts) {
      if (n >= min_freq && !is_special_text(tok)) kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    words.reserve(kept.size());
    for (auto& [tok, n] : kept) words.push_back(tok);
    return Vocabulary(words);
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const {
    require(id >= 0 && id < size(), ErrorKind::IndexOutOfRange, "token id out of range");
    return tokens_[id];
  }
  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Token ids of the caption, truncated to `max_len` words, then EOS.
  std::vector<int> encode(std::string_view caption, int max_len) const {
    std::vector<int> ids;
    for (auto& tok : tokenize(caption)) {
      if (static_cast<int>(ids.size()) >= max_len) break;
      ids.push_back(id(tok));
    }
    ids.push_back(kEos);
    return ids;
  }

  /// Drops PAD/BOS/EOS; UNK renders as "<unk>".
  std::vector<std::string> words(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (int i : ids) {
      if (i == kPad || i == kBos || i == kEos) continue;
      out.push_back(token(i));
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const { return join_tokens(words(ids)); }

  nlohmann::json to_json() const { return nlohmann::json(tokens_); }

  static Vocabulary from_json(const nlohmann::json& j) {
    std::vector<std::string> all;
    try {
      all = j.get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InvalidArtifact, std::string("bad vocabulary: ") + e.what());
    }
    require(all.size() >= kNumSpecials && all[0] == "<pad>" && all[1] == "<bos>" && all[2] == "<eos>" &&
                all[3] == "<unk>",
            ErrorKind::InvalidArtifact, "vocabulary does not start with the special tokens");
    return Vocabulary(std::vector<std::string>(all.begin() + kNumSpecials, all.end()));
  }

 private:
  static bool is_special_text(const std::string& t) {
    return t == "<pad>" || t == "<bos>" || t == "<eos>" || t == "<unk>";
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace t2t
