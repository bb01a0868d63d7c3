#pragma once

// HTTPS provider for an OpenAI-compatible chat-completions endpoint that
// accepts video input (e.g. a hosted Qwen-VL model). The API key is read
// from T2T_VLM_API_KEY.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif

#include <openssl/evp.h>

#include <cstdlib>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "t2t/annotation.hpp"

namespace t2t {

inline std::string base64_encode(std::string_view data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

/// Splits a model reply into caption lines, dropping list markers.
inline std::vector<std::string> parse_caption_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::size_t i = 0;
    while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) || line[i] == '-' || line[i] == '*'))
      ++i;
    std::size_t j = i;
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i && j < line.size() && (line[j] == '.' || line[j] == ')')) i = j + 1;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::string s = line.substr(i);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    if (!s.empty()) out.push_back(s);
  }
  return out;
}

class VlmProvider final : public CaptionProvider {
 public:
  VlmProvider(std::string endpoint, std::string model, double timeout_secs)
      : endpoint_(std::move(endpoint)), model_(std::move(model)), timeout_(timeout_secs) {
    const char* key = std::getenv("T2T_VLM_API_KEY");
    require(key != nullptr && *key != '\0', ErrorKind::ProviderAuthError,
            "T2T_VLM_API_KEY is not set; the vlm provider needs an API key");
    key_ = key;
    const auto scheme_end = endpoint_.find("://");
    require(scheme_end != std::string::npos, ErrorKind::InvalidConfig, "vlm_endpoint must be an absolute URL");
    const auto path_start = endpoint_.find('/', scheme_end + 3);
    base_ = endpoint_.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : endpoint_.substr(path_start);
  }

  std::vector<std::string> request(const ClipInfo& clip, const std::string& prompt, int n) override {
    require(!clip.media.empty(), ErrorKind::MissingArtifact, "clip " + clip.id + " has no media file");
    const std::string video = base64_encode(read_binary(clip.media));
    nlohmann::json body = {
        {"model", model_},
        {"messages",
         {{{"role", "user"},
           {"content",
            {{{"type", "video_url"}, {"video_url", {{"url", "data:video/mp4;base64," + video}}}},
             {{"type", "text"}, {"text", prompt}}}}}}}};
    httplib::Client cli(base_);
    const auto secs = static_cast<time_t>(timeout_);
    cli.set_connection_timeout(secs, 0);
    cli.set_read_timeout(secs, 0);
    cli.set_write_timeout(secs, 0);
    cli.set_bearer_token_auth(key_);
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read || err == httplib::Error::Write) {
        fail(ErrorKind::ProviderTimeout, "vlm request timed out: " + httplib::to_string(err));
      }
      fail(ErrorKind::ProviderError, "vlm request failed: " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403) fail(ErrorKind::ProviderAuthError, "vlm endpoint rejected the API key");
    if (res->status == 408 || res->status == 429 || res->status >= 500) {
      fail(ErrorKind::ProviderTimeout, "vlm endpoint returned status " + std::to_string(res->status));
    }
    require(res->status == 200, ErrorKind::ProviderError, "vlm endpoint returned status " + std::to_string(res->status));
    std::string text;
    try {
      text = nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::ProviderError, std::string("unexpected vlm response: ") + e.what());
    }
    auto lines = parse_caption_lines(text);
    if (static_cast<int>(lines.size()) > n) lines.resize(static_cast<std::size_t>(n));
    return lines;
  }

  CaptionSource source() const override { return CaptionSource::vlm; }
  std::string model_id() const override { return "vlm:" + model_; }

 private:
  std::string endpoint_, model_, key_, base_, path_;
  double timeout_;
};

}  // namespace t2t
