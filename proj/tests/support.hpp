#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "t2t/t2t.hpp"

#define EXPECT_T2T_ERROR(statement, expected_kind)                                 \
  do {                                                                               \
    try {                                                                            \
      statement;                                                                     \
      ADD_FAILURE() << "no error thrown, expected " << ::t2t::to_string(expected_kind); \
    } catch (const ::t2t::Error& t2t_err_) {                                         \
      EXPECT_EQ(t2t_err_.kind(), expected_kind) << t2t_err_.what();                  \
    }                                                                                \
  } while (0)

namespace t2t::testing {

using Mat = ag::Matrix<double>;

/// Minimal classic-pcap writer (little-endian, microseconds).
class PcapWriter {
 public:
  explicit PcapWriter(std::uint32_t linktype = 1) {
    put32(0xA1B2C3D4);
    put16(2), put16(4);
    put32(0), put32(0);
    put32(65535);
    put32(linktype);
  }

  void frame(double ts, const std::vector<std::uint8_t>& bytes, std::uint32_t orig_len = 0) {
    const auto sec = static_cast<std::uint32_t>(ts);
    const auto usec = static_cast<std::uint32_t>(std::llround((ts - sec) * 1e6));
    put32(sec), put32(usec);
    put32(static_cast<std::uint32_t>(bytes.size()));
    put32(orig_len ? orig_len : static_cast<std::uint32_t>(bytes.size()));
    data_.insert(data_.end(), bytes.begin(), bytes.end());
  }

  const std::vector<std::uint8_t>& bytes() const { return data_; }

  void save(const std::filesystem::path& p) const {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size()));
  }

 private:
  void put16(std::uint16_t v) {
    data_.push_back(v & 0xFF), data_.push_back(v >> 8);
  }
  void put32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) data_.push_back((v >> (8 * i)) & 0xFF);
  }
  std::vector<std::uint8_t> data_;
};

/// Ethernet + IPv4 + TCP/UDP frame whose IP total length is `ip_len`.
inline std::vector<std::uint8_t> ipv4_frame(std::array<std::uint8_t, 4> src, std::array<std::uint8_t, 4> dst,
                                            std::uint16_t sport, std::uint16_t dport, bool tcp,
                                            std::uint8_t flags = 0, std::uint16_t payload = 0) {
  std::vector<std::uint8_t> f(12, 0);
  f.push_back(0x08), f.push_back(0x00);
  const std::uint16_t l4 = tcp ? 20 : 8;
  const std::uint16_t total = 20 + l4 + payload;
  const std::uint8_t ip[20] = {0x45, 0, std::uint8_t(total >> 8), std::uint8_t(total & 0xFF), 0, 0, 0x40, 0, 64,
                               std::uint8_t(tcp ? 6 : 17), 0, 0, src[0], src[1], src[2], src[3],
                               dst[0], dst[1], dst[2], dst[3]};
  f.insert(f.end(), ip, ip + 20);
  f.push_back(sport >> 8), f.push_back(sport & 0xFF);
  f.push_back(dport >> 8), f.push_back(dport & 0xFF);
  if (tcp) {
    for (int i = 0; i < 8; ++i) f.push_back(0);
    f.push_back(0x50), f.push_back(flags);
    for (int i = 0; i < 6; ++i) f.push_back(0);
  } else {
    const std::uint16_t ulen = 8 + payload;
    f.push_back(ulen >> 8), f.push_back(ulen & 0xFF), f.push_back(0), f.push_back(0);
  }
  f.resize(f.size() + payload, 0);
  return f;
}

inline std::vector<std::uint8_t> arp_frame() {
  std::vector<std::uint8_t> f(12, 0xFF);
  f.push_back(0x08), f.push_back(0x06);
  f.resize(42, 0);
  return f;
}

inline PacketRecord packet(double ts, std::string src, std::uint16_t sport, std::string dst, std::uint16_t dport,
                           std::uint32_t len, Protocol proto = Protocol::TCP, std::uint8_t flags = 0) {
  PacketRecord p;
  p.timestamp = ts, p.src_addr = std::move(src), p.dst_addr = std::move(dst);
  p.src_port = sport, p.dst_port = dport, p.protocol = proto, p.length = len, p.tcp_flags = flags;
  return p;
}

inline ag::Matrix<double> random_matrix(ag::Index r, ag::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ag::Matrix<double> m(r, c);
  for (ag::Index i = 0; i < r; ++i)
    for (ag::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

/// Largest relative error between the analytic gradient of `p` (after one
/// backward of `loss`) and a central difference with step `h`. Entries are
/// sampled when the parameter is large.
inline double gradient_error(Parameter<double>& p, const std::function<double()>& loss,
                             const std::function<void()>& analytic, std::mt19937_64& rng, int max_entries = 24,
                             double h = 1e-4) {
  p.zero_grad();
  analytic();
  const ag::Matrix<double> g = p.grad;
  std::vector<ag::Index> idx(static_cast<std::size_t>(p.value.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<ag::Index>(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (static_cast<int>(idx.size()) > max_entries) idx.resize(static_cast<std::size_t>(max_entries));
  double worst = 0.0;
  for (auto k : idx) {
    double& v = p.value.data()[k];
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic_v = g.data()[k];
    const double err = std::abs(numeric - analytic_v) / std::max(1e-6, std::abs(numeric) + std::abs(analytic_v));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Small double-precision configuration suitable for gradient checks.
inline RunConfig tiny_config() {
  RunConfig cfg;
  cfg.encoder.input_dim = 6;
  cfg.encoder.hidden_dim = 8;
  cfg.encoder.pattern_dim = 4;
  cfg.encoder.embed_dim = 4;
  cfg.encoder.prototypes_per_type = 3;
  cfg.encoder.max_flows = 5;
  cfg.encoder.transformer_layers = 1;
  cfg.encoder.attention_heads = 2;
  cfg.encoder.dropout = 0.0;
  cfg.decoder.max_caption_len = 6;
  return cfg;
}

inline FeatureEncoder<double> make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Mat type_rows = random_matrix(cfg.num_app_types, cfg.embed_dim, rng);
  return FeatureEncoder<double>(cfg, type_rows, rng);
}

inline std::vector<bool> prefix_mask(int rows, int valid) {
  std::vector<bool> m(static_cast<std::size_t>(rows), false);
  for (int i = 0; i < valid; ++i) m[static_cast<std::size_t>(i)] = true;
  return m;
}

}  // namespace t2t::testing
