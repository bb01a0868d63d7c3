#pragma once

// Run configuration: every tunable of the encoder, decoder, losses, training
// loop and annotation workflow, loadable from a flat `key = value` file.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "t2t/error.hpp"

namespace t2t {

inline constexpr int kFeatureDim = 123;
inline constexpr int kMaxFlows = 50;
inline constexpr double kSegmentSecs = 15.0;
inline constexpr int kNumAppTypes = 5;

struct EncoderConfig {
  int input_dim = kFeatureDim;        // D
  int hidden_dim = 512;               // H
  int pattern_dim = 256;              // H'
  int embed_dim = 64;                 // L
  int num_app_types = kNumAppTypes;   // K
  int prototypes_per_type = 5;        // M
  int max_flows = kMaxFlows;          // S
  int transformer_layers = 2;
  int attention_heads = 4;
  int ffn_dim = 0;                    // 0 means 4 * hidden_dim
  double dropout = 0.1;
  bool use_dfm = true;
  bool use_fppl = true;

  int ffn_width() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      require(v >= 1, ErrorKind::InvalidConfig, std::string(name) + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(hidden_dim, "hidden_dim");
    positive(pattern_dim, "pattern_dim");
    positive(embed_dim, "embed_dim");
    positive(num_app_types, "num_app_types");
    positive(prototypes_per_type, "prototypes_per_type");
    positive(max_flows, "max_flows");
    positive(transformer_layers, "transformer_layers");
    positive(attention_heads, "attention_heads");
    require(hidden_dim % attention_heads == 0, ErrorKind::InvalidConfig,
            "hidden_dim must be divisible by attention_heads");
    require(ffn_dim >= 0, ErrorKind::InvalidConfig, "ffn_dim must be >= 0");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::InvalidConfig, "dropout must be in [0, 1)");
  }
};

struct DecoderConfig {
  int max_caption_len = 30;
  int min_token_freq = 2;
  int beam_width = 1;  // 1 = greedy

  void validate() const {
    require(max_caption_len >= 1, ErrorKind::InvalidConfig, "max_caption_len must be >= 1");
    require(min_token_freq >= 1, ErrorKind::InvalidConfig, "min_token_freq must be >= 1");
    require(beam_width >= 1, ErrorKind::InvalidConfig, "beam_width must be >= 1");
  }
};

struct LossWeights {
  double lambda_app = 1.0;
  double lambda_cont = 1.0;
  double lambda_cap = 1.0;
  double lambda_sent = 1.0;
  double tau = 0.1;

  void validate() const {
    require(lambda_app >= 0 && lambda_cont >= 0 && lambda_cap >= 0 && lambda_sent >= 0,
            ErrorKind::InvalidConfig, "loss weights must be non-negative");
    require(tau > 0, ErrorKind::InvalidConfig, "tau must be > 0");
  }
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 3e-4;
  double clip_norm = 5.0;
  std::uint64_t seed = 7;
  int val_interval = 1;
  int patience = 0;  // 0 disables early stopping
  double weight_decay = 0.0;

  void validate() const {
    require(epochs >= 1, ErrorKind::InvalidConfig, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::InvalidConfig, "batch_size must be >= 1");
    require(learning_rate > 0, ErrorKind::InvalidConfig, "learning_rate must be > 0");
    require(clip_norm > 0, ErrorKind::InvalidConfig, "clip_norm must be > 0");
    require(val_interval >= 1, ErrorKind::InvalidConfig, "val_interval must be >= 1");
    require(patience >= 0, ErrorKind::InvalidConfig, "patience must be >= 0");
    require(weight_decay >= 0, ErrorKind::InvalidConfig, "weight_decay must be >= 0");
  }
};

struct ExtractConfig {
  double segment_secs = kSegmentSecs;
  int max_flows = kMaxFlows;

  void validate() const {
    require(segment_secs > 0, ErrorKind::InvalidConfig, "segment_secs must be > 0");
    require(max_flows > 0, ErrorKind::InvalidConfig, "max_flows must be > 0");
  }
};

struct AnnotationConfig {
  std::string vlm_endpoint = "https://dashscope.aliyuncs.com/compatible-mode/v1/chat/completions";
  std::string vlm_model = "qwen-vl-max";
  double vlm_timeout_secs = 60.0;
  int parallelism = 4;
  int captions_per_clip = 20;
  std::string cache_dir = ".cache/annotations";
  std::string embedder = "hashed";  // "hashed" or "command:<program>"
  int sentence_dim = 384;

  void validate() const {
    require(vlm_timeout_secs > 0, ErrorKind::InvalidConfig, "vlm_timeout_secs must be > 0");
    require(parallelism >= 1, ErrorKind::InvalidConfig, "annotation_parallelism must be >= 1");
    require(captions_per_clip >= 1, ErrorKind::InvalidConfig, "captions_per_clip must be >= 1");
    require(sentence_dim >= 1, ErrorKind::InvalidConfig, "sentence_dim must be >= 1");
  }
};

struct RunConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  LossWeights loss;
  TrainConfig train;
  ExtractConfig extract;
  AnnotationConfig annotation;

  void validate() const {
    encoder.validate();
    decoder.validate();
    loss.validate();
    train.validate();
    extract.validate();
    annotation.validate();
  }

  /// Applies one `key = value` assignment. Unknown keys are rejected.
  void set(const std::string& key, const std::string& value);

  /// Every key with its current value, formatted so `set` reproduces it.
  std::map<std::string, std::string> to_map() const;

  static RunConfig from_file(const std::string& path);
  void apply_text(const std::string& text, const std::string& origin = "<text>");
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) fail(ErrorKind::InvalidConfig, key + ": not an integer: " + v);
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) fail(ErrorKind::InvalidConfig, key + ": not an unsigned integer: " + v);
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::InvalidConfig, key + ": not a number: " + v);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::InvalidConfig, key + ": not a boolean: " + v);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    auto add_int = [&](const std::string& k, auto proj) {
      f[k] = {[k, proj](RunConfig& c, const std::string& v) { proj(c) = parse_int(k, v); },
              [proj](const RunConfig& c) { return std::to_string(proj(const_cast<RunConfig&>(c))); }};
    };
    auto add_double = [&](const std::string& k, auto proj) {
      f[k] = {[k, proj](RunConfig& c, const std::string& v) { proj(c) = parse_double(k, v); },
              [proj](const RunConfig& c) { return format_double(proj(const_cast<RunConfig&>(c))); }};
    };
    auto add_bool = [&](const std::string& k, auto proj) {
      f[k] = {[k, proj](RunConfig& c, const std::string& v) { proj(c) = parse_bool(k, v); },
              [proj](const RunConfig& c) { return std::string(proj(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
    };
    auto add_string = [&](const std::string& k, auto proj) {
      f[k] = {[proj](RunConfig& c, const std::string& v) { proj(c) = v; },
              [proj](const RunConfig& c) { return proj(const_cast<RunConfig&>(c)); }};
    };

    add_int("input_dim", [](RunConfig& c) -> int& { return c.encoder.input_dim; });
    add_int("hidden_dim", [](RunConfig& c) -> int& { return c.encoder.hidden_dim; });
    add_int("pattern_dim", [](RunConfig& c) -> int& { return c.encoder.pattern_dim; });
    add_int("embed_dim", [](RunConfig& c) -> int& { return c.encoder.embed_dim; });
    add_int("num_app_types", [](RunConfig& c) -> int& { return c.encoder.num_app_types; });
    add_int("prototypes_per_type", [](RunConfig& c) -> int& { return c.encoder.prototypes_per_type; });
    add_int("max_flows", [](RunConfig& c) -> int& { return c.encoder.max_flows; });
    add_int("transformer_layers", [](RunConfig& c) -> int& { return c.encoder.transformer_layers; });
    add_int("attention_heads", [](RunConfig& c) -> int& { return c.encoder.attention_heads; });
    add_int("ffn_dim", [](RunConfig& c) -> int& { return c.encoder.ffn_dim; });
    add_double("dropout", [](RunConfig& c) -> double& { return c.encoder.dropout; });
    add_bool("use_dfm", [](RunConfig& c) -> bool& { return c.encoder.use_dfm; });
    add_bool("use_fppl", [](RunConfig& c) -> bool& { return c.encoder.use_fppl; });

    add_int("max_caption_len", [](RunConfig& c) -> int& { return c.decoder.max_caption_len; });
    add_int("min_token_freq", [](RunConfig& c) -> int& { return c.decoder.min_token_freq; });
    add_int("beam_width", [](RunConfig& c) -> int& { return c.decoder.beam_width; });

    add_double("lambda_app", [](RunConfig& c) -> double& { return c.loss.lambda_app; });
    add_double("lambda_cont", [](RunConfig& c) -> double& { return c.loss.lambda_cont; });
    add_double("lambda_cap", [](RunConfig& c) -> double& { return c.loss.lambda_cap; });
    add_double("lambda_sent", [](RunConfig& c) -> double& { return c.loss.lambda_sent; });
    add_double("tau", [](RunConfig& c) -> double& { return c.loss.tau; });

    add_int("epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
    add_int("batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
    add_double("learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; });
    add_double("clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; });
    f["seed"] = {[](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }};
    add_int("val_interval", [](RunConfig& c) -> int& { return c.train.val_interval; });
    add_int("patience", [](RunConfig& c) -> int& { return c.train.patience; });
    add_double("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });

    add_double("segment_secs", [](RunConfig& c) -> double& { return c.extract.segment_secs; });
    add_int("segment_max_flows", [](RunConfig& c) -> int& { return c.extract.max_flows; });

    add_string("vlm_endpoint", [](RunConfig& c) -> std::string& { return c.annotation.vlm_endpoint; });
    add_string("vlm_model", [](RunConfig& c) -> std::string& { return c.annotation.vlm_model; });
    add_double("vlm_timeout_secs", [](RunConfig& c) -> double& { return c.annotation.vlm_timeout_secs; });
    add_int("annotation_parallelism", [](RunConfig& c) -> int& { return c.annotation.parallelism; });
    add_int("captions_per_clip", [](RunConfig& c) -> int& { return c.annotation.captions_per_clip; });
    add_string("cache_dir", [](RunConfig& c) -> std::string& { return c.annotation.cache_dir; });
    add_string("embedder", [](RunConfig& c) -> std::string& { return c.annotation.embedder; });
    add_int("sentence_dim", [](RunConfig& c) -> int& { return c.annotation.sentence_dim; });
    return f;
  }();
  return table;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = detail::fields();
  auto it = table.find(key);
  if (it == table.end()) fail(ErrorKind::InvalidConfig, "unknown configuration key: " + key);
  it->second.set(*this, value);
}

inline std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::fields()) out[k] = f.get(*this);
  return out;
}

inline void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidConfig, origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InvalidConfig, "cannot open configuration file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig cfg;
  cfg.apply_text(buf.str(), path);
  cfg.validate();
  return cfg;
}

}  // namespace t2t
