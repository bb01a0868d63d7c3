#pragma once

// Sentence embedders. The hashed n-gram embedder is always available; a
// command-backed embedder can front an external sentence encoder.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "t2t/error.hpp"
#include "t2t/hash.hpp"
#include "t2t/text.hpp"

namespace t2t {

class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;
  virtual std::vector<double> embed(const std::string& text) const = 0;
  virtual int dim() const = 0;
  /// Recorded in dataset records and checkpoints; must match across a run.
  virtual std::string id() const = 0;
};

/// L2-normalized bag of hashed unigrams and bigrams.
class HashedNgramEmbedder final : public SentenceEmbedder {
 public:
  explicit HashedNgramEmbedder(int dim = 384, std::uint64_t seed = 0x5EED) : dim_(dim), seed_(seed) {
    require(dim >= 1, ErrorKind::InvalidConfig, "embedding dimension must be >= 1");
  }

  std::vector<double> embed(const std::string& text) const override {
    const auto tokens = tokenize(text);
    require(!tokens.empty(), ErrorKind::EmptyText, "cannot embed empty text");
    std::vector<double> v(dim_, 0.0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      v[bucket("1:" + tokens[i])] += 1.0;
      if (i + 1 < tokens.size()) v[bucket("2:" + tokens[i] + " " + tokens[i + 1])] += 1.0;
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
  }

  int dim() const override { return dim_; }
  std::string id() const override { return "hashed-ngram-v1:" + std::to_string(dim_) + ":" + std::to_string(seed_); }

 private:
  std::size_t bucket(const std::string& gram) const { return fnv1a64(gram, seed_) % static_cast<std::uint64_t>(dim_); }

  int dim_;
  std::uint64_t seed_;
};

/// Runs `<program>` with the text on stdin; expects a JSON array of numbers
/// on stdout. The vector is L2-normalized.
class CommandEmbedder final : public SentenceEmbedder {
 public:
  CommandEmbedder(std::string program, int dim) : program_(std::move(program)), dim_(dim) {}

  std::vector<double> embed(const std::string& text) const override {
    require(!tokenize(text).empty(), ErrorKind::EmptyText, "cannot embed empty text");
    char tmpl[] = "/tmp/t2t-embed-XXXXXX";
    const int fd = mkstemp(tmpl);
    require(fd >= 0, ErrorKind::ProviderError, "cannot create temporary file");
    {
      FILE* f = fdopen(fd, "w");
      std::fwrite(text.data(), 1, text.size(), f);
      std::fclose(f);
    }
    const std::string cmd = program_ + " < '" + std::string(tmpl) + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
      std::remove(tmpl);
      fail(ErrorKind::ProviderError, "cannot run embedder command: " + program_);
    }
    std::string out;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
    const int status = pclose(pipe);
    std::remove(tmpl);
    require(status == 0, ErrorKind::ProviderError, "embedder command failed: " + program_);
    std::vector<double> v;
    try {
      v = nlohmann::json::parse(out).get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::ProviderError, std::string("embedder output is not a JSON number array: ") + e.what());
    }
    require(static_cast<int>(v.size()) == dim_, ErrorKind::ShapeMismatch,
            "embedder returned " + std::to_string(v.size()) + " values, expected " + std::to_string(dim_));
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    require(norm > 0, ErrorKind::ProviderError, "embedder returned a zero vector");
    for (double& x : v) x /= norm;
    return v;
  }

  int dim() const override { return dim_; }
  std::string id() const override { return "command:" + program_ + ":" + std::to_string(dim_); }

 private:
  std::string program_;
  int dim_;
};

/// "hashed" or "command:<program>".
inline std::unique_ptr<SentenceEmbedder> make_embedder(const std::string& spec, int dim) {
  if (spec == "hashed") return std::make_unique<HashedNgramEmbedder>(dim);
  if (spec.rfind("command:", 0) == 0) return std::make_unique<CommandEmbedder>(spec.substr(8), dim);
  fail(ErrorKind::InvalidConfig, "unknown embedder: " + spec);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace t2t
