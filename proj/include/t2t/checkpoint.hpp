#pragma once

// Checkpoint directory: manifest.json, vocab.json and one raw little-endian
// float32 row-major blob per parameter under weights/.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "t2t/hash.hpp"
#include "t2t/model.hpp"

namespace t2t {

inline constexpr const char* kCheckpointFormat = "t2t-checkpoint-v1";

namespace detail {

inline void write_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), 4);
}

inline float read_f32_le(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::MissingArtifact, "cannot open " + p.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace detail

/// Writes the checkpoint. `extra` is merged into the manifest (epoch,
/// metric history, ...).
template <class T>
void save_checkpoint(T2TModel<T>& model, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "weights");
  const std::string vocab_text = model.vocab.to_json().dump();
  {
    std::ofstream v(dir / "vocab.json", std::ios::binary);
    v << vocab_text;
  }
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = model.config.to_map();
  manifest["vocab_sha256"] = sha256_hex(vocab_text);
  manifest["vocab_size"] = model.vocab.size();
  manifest["embedder_id"] = model.embedder_id;
  manifest["sentence_dim"] = model.sentence_dim;
  manifest["normalization"] = {{"mean", model.normalizer.mean}, {"std", model.normalizer.stddev}};
  nlohmann::json tensors = nlohmann::json::array();
  for (auto* p : model.parameters()) {
    const std::string file = "weights/" + p->name + ".bin";
    std::ofstream out(dir / file, std::ios::binary);
    if (!out) fail(ErrorKind::InvalidArtifact, "cannot write " + (dir / file).string());
    for (ag::Index i = 0; i < p->value.size(); ++i) detail::write_f32_le(out, static_cast<float>(p->value.data()[i]));
    tensors.push_back({{"name", p->name},
                       {"shape", {p->value.rows(), p->value.cols()}},
                       {"bytes", p->value.size() * 4},
                       {"file", file},
                       {"trainable", p->trainable}});
  }
  manifest["tensors"] = tensors;
  for (auto it = extra.begin(); extra.is_object() && it != extra.end(); ++it) manifest[it.key()] = it.value();
  std::ofstream m(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  try {
    return nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArtifact, std::string("bad manifest: ") + e.what());
  }
}

template <class T>
T2TModel<T> load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  require(manifest.value("format", "") == kCheckpointFormat, ErrorKind::InvalidArtifact,
          "unsupported checkpoint format");
  RunConfig cfg;
  for (auto& [k, v] : manifest.at("config").items()) cfg.set(k, v.template get<std::string>());
  cfg.validate();
  const std::string vocab_text = detail::read_file(dir / "vocab.json");
  require(sha256_hex(vocab_text) == manifest.at("vocab_sha256").get<std::string>(), ErrorKind::InvalidArtifact,
          "vocabulary hash does not match manifest");
  Vocabulary vocab = Vocabulary::from_json(nlohmann::json::parse(vocab_text));
  FeatureNormalizer norm;
  norm.mean = manifest.at("normalization").at("mean").get<std::vector<double>>();
  norm.stddev = manifest.at("normalization").at("std").get<std::vector<double>>();
  const int sent_dim = manifest.at("sentence_dim").get<int>();
  Matrix<T> type_rows = Matrix<T>::Zero(cfg.encoder.num_app_types, cfg.encoder.embed_dim);
  T2TModel<T> model(cfg, std::move(vocab), std::move(norm), type_rows, manifest.at("embedder_id").get<std::string>(),
                    sent_dim, 0);
  std::map<std::string, nlohmann::json> entries;
  for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  for (auto* p : model.parameters()) {
    auto it = entries.find(p->name);
    require(it != entries.end(), ErrorKind::InvalidArtifact, "checkpoint lacks tensor " + p->name);
    const auto shape = it->second.at("shape").template get<std::vector<ag::Index>>();
    require(shape.size() == 2 && shape[0] == p->value.rows() && shape[1] == p->value.cols(),
            ErrorKind::ShapeMismatch, "tensor " + p->name + " has an unexpected shape");
    const std::string blob = detail::read_file(dir / it->second.at("file").template get<std::string>());
    require(blob.size() == static_cast<std::size_t>(p->value.size()) * 4 &&
                it->second.at("bytes").template get<std::size_t>() == blob.size(),
            ErrorKind::InvalidArtifact, "tensor " + p->name + " has the wrong byte length");
    for (ag::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = static_cast<T>(detail::read_f32_le(blob.data() + 4 * i));
    }
    entries.erase(it);
  }
  require(entries.empty(), ErrorKind::InvalidArtifact, "checkpoint has unknown tensors");
  return model;
}

}  // namespace t2t
