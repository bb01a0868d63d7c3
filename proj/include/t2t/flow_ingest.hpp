#pragma once

// PCAP parsing, bidirectional flow assembly, time segmentation and the
// 123-value per-flow feature schema (documented in FEATURES.md).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "t2t/config.hpp"
#include "t2t/error.hpp"

namespace t2t {

enum class Protocol : std::uint8_t { TCP = 6, UDP = 17, OTHER = 0 };

namespace tcp_flag {
inline constexpr std::uint8_t FIN = 0x01;
inline constexpr std::uint8_t SYN = 0x02;
inline constexpr std::uint8_t RST = 0x04;
inline constexpr std::uint8_t PSH = 0x08;
inline constexpr std::uint8_t ACK = 0x10;
inline constexpr std::uint8_t URG = 0x20;
}  // namespace tcp_flag

struct PacketRecord {
  double timestamp = 0.0;
  std::string src_addr;
  std::string dst_addr;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  Protocol protocol = Protocol::OTHER;
  std::uint32_t length = 0;
  std::uint8_t tcp_flags = 0;

  bool operator==(const PacketRecord&) const = default;
};

/// 5-tuple with the lexicographically smaller (addr, port) endpoint first.
struct FlowKey {
  std::string addr_a;
  std::uint16_t port_a = 0;
  std::string addr_b;
  std::uint16_t port_b = 0;
  Protocol protocol = Protocol::OTHER;

  static FlowKey from_packet(const PacketRecord& p) {
    FlowKey k;
    k.protocol = p.protocol;
    if (std::tie(p.src_addr, p.src_port) <= std::tie(p.dst_addr, p.dst_port)) {
      k.addr_a = p.src_addr, k.port_a = p.src_port, k.addr_b = p.dst_addr, k.port_b = p.dst_port;
    } else {
      k.addr_a = p.dst_addr, k.port_a = p.dst_port, k.addr_b = p.src_addr, k.port_b = p.src_port;
    }
    return k;
  }

  auto tie() const { return std::tie(addr_a, port_a, addr_b, port_b, protocol); }
  bool operator<(const FlowKey& o) const { return tie() < o.tie(); }
  bool operator==(const FlowKey& o) const { return tie() == o.tie(); }
};

struct Flow {
  FlowKey key;
  double start_time = 0.0;
  std::string initiator_addr;
  std::uint16_t initiator_port = 0;
  std::uint16_t responder_port = 0;
  std::vector<PacketRecord> packets_up;    // initiator -> responder
  std::vector<PacketRecord> packets_down;  // responder -> initiator

  std::size_t packet_count() const { return packets_up.size() + packets_down.size(); }
};

/// The model input T: S rows of D features plus a validity mask.
struct FlowFeatureSequence {
  std::vector<std::vector<double>> features;  // S x D
  std::vector<bool> mask;                     // S
  double segment_start = 0.0;
  std::string segment_id;

  std::size_t rows() const { return features.size(); }
  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
  bool operator==(const FlowFeatureSequence&) const = default;
};

// ---------------------------------------------------------------------------
// Feature schema

namespace features {

inline constexpr int kLengthStats = 17;
inline constexpr int kIatStats = 9;
inline constexpr double kBurstGap = 0.1;
inline constexpr int kFirstSizes = 10;

// Column offsets.
inline constexpr int kProtocol = 0;          // 3: tcp, udp, other
inline constexpr int kPortClass = 3;         // 2: responder, initiator
inline constexpr int kDuration = 5;
inline constexpr int kStartOffset = 6;
inline constexpr int kLength = 7;            // 3 x 17: up, down, both
inline constexpr int kIat = 58;              // 3 x 9
inline constexpr int kVolume = 85;           // 3 x 4: packets, bytes, pkt rate, byte rate
inline constexpr int kRatio = 97;            // 2: packet ratio, byte ratio (up / down)
inline constexpr int kBurst = 99;            // 2 x 4: count, mean bytes, max bytes, mean duration
inline constexpr int kFlags = 107;           // 6: SYN FIN RST PSH ACK URG
inline constexpr int kFirstSigned = 113;     // 10
inline constexpr int kDim = 123;

static_assert(kFirstSigned + kFirstSizes == kDim);
static_assert(kDim == kFeatureDim);

inline std::vector<std::string> names() {
  std::vector<std::string> out;
  out.reserve(kDim);
  for (const char* p : {"proto_tcp", "proto_udp", "proto_other"}) out.emplace_back(p);
  out.emplace_back("responder_port_class");
  out.emplace_back("initiator_port_class");
  out.emplace_back("duration");
  out.emplace_back("start_offset");
  const char* dirs[] = {"up", "down", "both"};
  const char* len_stats[] = {"min", "max", "mean", "std", "var", "mad", "sum", "p10", "p20", "p30",
                             "p40", "p50", "p60", "p70", "p80", "p90", "p100"};
  for (const char* d : dirs) {
    for (const char* s : len_stats) out.push_back(std::string("len_") + d + "_" + s);
  }
  const char* iat_stats[] = {"min", "max", "mean", "std", "var", "median", "p25", "p75", "sum"};
  for (const char* d : dirs) {
    for (const char* s : iat_stats) out.push_back(std::string("iat_") + d + "_" + s);
  }
  for (const char* d : dirs) {
    for (const char* s : {"packets", "bytes", "packet_rate", "byte_rate"}) out.push_back(std::string(d) + "_" + s);
  }
  out.emplace_back("ratio_packets_up_down");
  out.emplace_back("ratio_bytes_up_down");
  for (const char* d : {"up", "down"}) {
    for (const char* s : {"count", "mean_bytes", "max_bytes", "mean_duration"}) {
      out.push_back(std::string("burst_") + d + "_" + s);
    }
  }
  for (const char* f : {"syn", "fin", "rst", "psh", "ack", "urg"}) out.push_back(std::string("flag_") + f);
  for (int i = 0; i < kFirstSizes; ++i) out.push_back("signed_size_" + std::to_string(i + 1));
  return out;
}

/// Linear-interpolated quantile of sorted data (position q * (n - 1)).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

/// min, max, mean, population std, variance, median-abs-deviation, sum, p10..p100.
inline std::array<double, kLengthStats> length_stats(std::vector<double> v) {
  std::array<double, kLengthStats> out{};
  if (v.empty()) return out;
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  const double mean = sum / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double median = quantile_sorted(v, 0.5);
  std::vector<double> dev;
  dev.reserve(v.size());
  for (double x : v) dev.push_back(std::abs(x - median));
  std::sort(dev.begin(), dev.end());
  out[0] = v.front();
  out[1] = v.back();
  out[2] = mean;
  out[3] = std::sqrt(var);
  out[4] = var;
  out[5] = quantile_sorted(dev, 0.5);
  out[6] = sum;
  for (int d = 1; d <= 10; ++d) out[6 + d] = quantile_sorted(v, d / 10.0);
  return out;
}

/// min, max, mean, population std, variance, median, p25, p75, sum.
inline std::array<double, kIatStats> iat_stats(std::vector<double> v) {
  std::array<double, kIatStats> out{};
  if (v.empty()) return out;
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  const double mean = sum / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  out = {v.front(), v.back(), mean, std::sqrt(var), var, quantile_sorted(v, 0.5), quantile_sorted(v, 0.25),
         quantile_sorted(v, 0.75), sum};
  return out;
}

/// 0 well-known (< 1024), 1 registered (< 49152), 2 dynamic.
inline double port_class(std::uint16_t port) {
  if (port < 1024) return 0.0;
  if (port < 49152) return 1.0;
  return 2.0;
}

}  // namespace features

/// Computes the 123-value feature vector from the flow's packets that fall
/// inside [window_start, window_end).
inline std::vector<double> featurize_flow(const Flow& flow, double window_start, double window_end) {
  using namespace features;
  struct Item {
    double ts;
    double len;
    bool up;
    std::uint8_t flags;
  };
  std::vector<Item> items;
  items.reserve(flow.packet_count());
  for (const auto& p : flow.packets_up) {
    if (p.timestamp >= window_start && p.timestamp < window_end) items.push_back({p.timestamp, double(p.length), true, p.tcp_flags});
  }
  for (const auto& p : flow.packets_down) {
    if (p.timestamp >= window_start && p.timestamp < window_end) items.push_back({p.timestamp, double(p.length), false, p.tcp_flags});
  }
  require(!items.empty(), ErrorKind::EmptyFlowInWindow, "flow has no packets inside the window");
  // Stable: equal timestamps keep up-before-down, then arrival order.
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.ts < b.ts; });

  std::vector<double> out(kDim, 0.0);
  switch (flow.key.protocol) {
    case Protocol::TCP: out[kProtocol + 0] = 1.0; break;
    case Protocol::UDP: out[kProtocol + 1] = 1.0; break;
    default: out[kProtocol + 2] = 1.0; break;
  }
  out[kPortClass + 0] = port_class(flow.responder_port);
  out[kPortClass + 1] = port_class(flow.initiator_port);
  const double first = items.front().ts;
  const double duration = items.back().ts - first;
  out[kDuration] = duration;
  out[kStartOffset] = first - window_start;

  std::vector<double> len[3], iat[3];
  double last_ts[3] = {0, 0, 0};
  bool seen[3] = {false, false, false};
  for (const auto& it : items) {
    const int dir = it.up ? 0 : 1;
    for (int d : {dir, 2}) {
      len[d].push_back(it.len);
      if (seen[d]) iat[d].push_back(it.ts - last_ts[d]);
      last_ts[d] = it.ts;
      seen[d] = true;
    }
  }
  for (int d = 0; d < 3; ++d) {
    const auto ls = length_stats(len[d]);
    std::copy(ls.begin(), ls.end(), out.begin() + kLength + d * kLengthStats);
    const auto is = iat_stats(iat[d]);
    std::copy(is.begin(), is.end(), out.begin() + kIat + d * kIatStats);
    const double packets = static_cast<double>(len[d].size());
    const double bytes = std::accumulate(len[d].begin(), len[d].end(), 0.0);
    out[kVolume + d * 4 + 0] = packets;
    out[kVolume + d * 4 + 1] = bytes;
    out[kVolume + d * 4 + 2] = safe_ratio(packets, duration);
    out[kVolume + d * 4 + 3] = safe_ratio(bytes, duration);
  }
  out[kRatio + 0] = safe_ratio(out[kVolume + 0], out[kVolume + 4]);
  out[kRatio + 1] = safe_ratio(out[kVolume + 1], out[kVolume + 5]);

  // Bursts: maximal runs (>= 2 packets) of consecutive same-direction packets
  // whose successive gaps are below kBurstGap.
  struct BurstAcc {
    double count = 0, bytes_total = 0, bytes_max = 0, duration_total = 0;
  } bursts[2];
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i + 1;
    double bytes = items[i].len;
    while (j < items.size() && items[j].up == items[i].up && items[j].ts - items[j - 1].ts < kBurstGap) {
      bytes += items[j].len;
      ++j;
    }
    if (j - i >= 2) {
      auto& b = bursts[items[i].up ? 0 : 1];
      b.count += 1;
      b.bytes_total += bytes;
      b.bytes_max = std::max(b.bytes_max, bytes);
      b.duration_total += items[j - 1].ts - items[i].ts;
    }
    i = j;
  }
  for (int d = 0; d < 2; ++d) {
    out[kBurst + d * 4 + 0] = bursts[d].count;
    out[kBurst + d * 4 + 1] = safe_ratio(bursts[d].bytes_total, bursts[d].count);
    out[kBurst + d * 4 + 2] = bursts[d].bytes_max;
    out[kBurst + d * 4 + 3] = safe_ratio(bursts[d].duration_total, bursts[d].count);
  }

  const std::uint8_t flag_bits[] = {tcp_flag::SYN, tcp_flag::FIN, tcp_flag::RST,
                                    tcp_flag::PSH, tcp_flag::ACK, tcp_flag::URG};
  for (const auto& it : items) {
    for (int f = 0; f < 6; ++f) {
      if (it.flags & flag_bits[f]) out[kFlags + f] += 1.0;
    }
  }
  for (int k = 0; k < kFirstSizes && k < static_cast<int>(items.size()); ++k) {
    out[kFirstSigned + k] = items[k].up ? items[k].len : -items[k].len;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCAP

struct PcapParseResult {
  std::vector<PacketRecord> packets;
  std::size_t frames = 0;
  std::size_t truncated = 0;      // record or headers cut short
  std::size_t non_ip = 0;         // ARP, unsupported link payloads, ...
  std::size_t non_transport = 0;  // IP without TCP/UDP, non-first fragments
  std::uint32_t linktype = 0;
};

namespace detail {

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, bool swap) : data_(data), swap_(swap) {}

  std::uint32_t u32(std::size_t off) const {
    std::uint32_t v;
    std::memcpy(&v, data_.data() + off, 4);
    return swap_ ? __builtin_bswap32(v) : v;
  }
  std::uint16_t u16(std::size_t off) const {
    std::uint16_t v;
    std::memcpy(&v, data_.data() + off, 2);
    return swap_ ? __builtin_bswap16(v) : v;
  }

 private:
  std::span<const std::uint8_t> data_;
  bool swap_;
};

inline std::uint16_t be16(const std::uint8_t* p) { return static_cast<std::uint16_t>((p[0] << 8) | p[1]); }

inline std::string ipv4_string(const std::uint8_t* p) {
  return std::to_string(p[0]) + "." + std::to_string(p[1]) + "." + std::to_string(p[2]) + "." + std::to_string(p[3]);
}

inline std::string ipv6_string(const std::uint8_t* p) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (int i = 0; i < 16; i += 2) {
    if (i) s.push_back(':');
    const unsigned v = (p[i] << 8) | p[i + 1];
    bool started = false;
    for (int shift = 12; shift >= 0; shift -= 4) {
      const unsigned nib = (v >> shift) & 0xF;
      if (nib || started || shift == 0) {
        s.push_back(hex[nib]);
        started = true;
      }
    }
  }
  return s;
}

enum class Decode { Ok, NonIp, NonTransport, Truncated };

inline Decode decode_transport(const std::uint8_t* p, std::size_t n, std::uint8_t proto, PacketRecord& rec) {
  if (proto == 6) {
    if (n < 14) return Decode::Truncated;
    rec.protocol = Protocol::TCP;
    rec.src_port = be16(p);
    rec.dst_port = be16(p + 2);
    rec.tcp_flags = p[13];
    return Decode::Ok;
  }
  if (proto == 17) {
    if (n < 8) return Decode::Truncated;
    rec.protocol = Protocol::UDP;
    rec.src_port = be16(p);
    rec.dst_port = be16(p + 2);
    rec.tcp_flags = 0;
    return Decode::Ok;
  }
  return Decode::NonTransport;
}

inline Decode decode_ip(const std::uint8_t* p, std::size_t n, PacketRecord& rec) {
  if (n < 1) return Decode::Truncated;
  const int version = p[0] >> 4;
  if (version == 4) {
    if (n < 20) return Decode::Truncated;
    const std::size_t ihl = static_cast<std::size_t>(p[0] & 0x0F) * 4;
    if (ihl < 20 || n < ihl) return Decode::Truncated;
    const std::uint16_t frag = be16(p + 6);
    if ((frag & 0x1FFF) != 0) return Decode::NonTransport;
    rec.src_addr = ipv4_string(p + 12);
    rec.dst_addr = ipv4_string(p + 16);
    return decode_transport(p + ihl, n - ihl, p[9], rec);
  }
  if (version == 6) {
    if (n < 40) return Decode::Truncated;
    rec.src_addr = ipv6_string(p + 8);
    rec.dst_addr = ipv6_string(p + 24);
    std::uint8_t next = p[6];
    std::size_t off = 40;
    for (int hops = 0; hops < 8; ++hops) {
      if (next == 0 || next == 43 || next == 60) {
        if (n < off + 2) return Decode::Truncated;
        const std::uint8_t following = p[off];
        off += (static_cast<std::size_t>(p[off + 1]) + 1) * 8;
        next = following;
      } else if (next == 44) {
        return Decode::NonTransport;
      } else {
        break;
      }
    }
    if (n < off) return Decode::Truncated;
    return decode_transport(p + off, n - off, next, rec);
  }
  return Decode::NonIp;
}

inline Decode decode_frame(std::uint32_t linktype, const std::uint8_t* p, std::size_t n, PacketRecord& rec) {
  switch (linktype) {
    case 1: {  // Ethernet
      if (n < 14) return Decode::Truncated;
      std::size_t off = 12;
      std::uint16_t ethertype = be16(p + off);
      while (ethertype == 0x8100 || ethertype == 0x88A8) {
        off += 4;
        if (n < off + 2) return Decode::Truncated;
        ethertype = be16(p + off);
      }
      off += 2;
      if (ethertype != 0x0800 && ethertype != 0x86DD) return Decode::NonIp;
      return decode_ip(p + off, n - off, rec);
    }
    case 101:
    case 12:
    case 14:
      return decode_ip(p, n, rec);
    case 113: {  // Linux cooked capture
      if (n < 16) return Decode::Truncated;
      const std::uint16_t proto = be16(p + 14);
      if (proto != 0x0800 && proto != 0x86DD) return Decode::NonIp;
      return decode_ip(p + 16, n - 16, rec);
    }
    case 0: {  // BSD loopback, host-order family
      if (n < 4) return Decode::Truncated;
      return decode_ip(p + 4, n - 4, rec);
    }
    default:
      return Decode::NonIp;
  }
}

}  // namespace detail

inline PcapParseResult parse_pcap_bytes(std::span<const std::uint8_t> data) {
  require(data.size() >= 24, ErrorKind::MalformedPcap, "file shorter than the pcap global header");
  std::uint32_t magic;
  std::memcpy(&magic, data.data(), 4);
  bool swap = false;
  bool nanos = false;
  switch (magic) {
    case 0xA1B2C3D4: break;
    case 0xA1B23C4D: nanos = true; break;
    case 0xD4C3B2A1: swap = true; break;
    case 0x4D3CB2A1: swap = true, nanos = true; break;
    default: fail(ErrorKind::MalformedPcap, "bad pcap magic number");
  }
  detail::ByteReader hdr(data, swap);
  PcapParseResult result;
  result.linktype = hdr.u32(20) & 0x0FFFFFFF;
  const double frac_scale = nanos ? 1e-9 : 1e-6;

  std::size_t off = 24;
  while (off < data.size()) {
    if (data.size() - off < 16) {
      ++result.truncated;
      break;
    }
    const std::uint32_t ts_sec = hdr.u32(off);
    const std::uint32_t ts_frac = hdr.u32(off + 4);
    const std::uint32_t incl = hdr.u32(off + 8);
    const std::uint32_t orig = hdr.u32(off + 12);
    off += 16;
    if (data.size() - off < incl) {
      ++result.truncated;
      break;
    }
    ++result.frames;
    PacketRecord rec;
    rec.timestamp = static_cast<double>(ts_sec) + static_cast<double>(ts_frac) * frac_scale;
    rec.length = orig;
    switch (detail::decode_frame(result.linktype, data.data() + off, incl, rec)) {
      case detail::Decode::Ok: result.packets.push_back(std::move(rec)); break;
      case detail::Decode::NonIp: ++result.non_ip; break;
      case detail::Decode::NonTransport: ++result.non_transport; break;
      case detail::Decode::Truncated: ++result.truncated; break;
    }
    off += incl;
  }
  std::stable_sort(result.packets.begin(), result.packets.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.timestamp < b.timestamp; });
  return result;
}

inline PcapParseResult parse_pcap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MalformedPcap, "cannot open pcap file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_pcap_bytes(bytes);
}

// ---------------------------------------------------------------------------
// Flows and segments

/// Groups timestamp-sorted packets by normalized 5-tuple. The sender of a
/// flow's first packet is its initiator. Result is ordered by start_time,
/// ties by first appearance.
inline std::vector<Flow> assemble_flows(std::span<const PacketRecord> packets) {
  std::vector<Flow> flows;
  std::map<FlowKey, std::size_t> index;
  for (const auto& p : packets) {
    FlowKey key = FlowKey::from_packet(p);
    auto it = index.find(key);
    if (it == index.end()) {
      Flow f;
      f.key = key;
      f.start_time = p.timestamp;
      f.initiator_addr = p.src_addr;
      f.initiator_port = p.src_port;
      f.responder_port = p.dst_port;
      flows.push_back(std::move(f));
      it = index.emplace(std::move(key), flows.size() - 1).first;
    }
    Flow& f = flows[it->second];
    const bool up = p.src_addr == f.initiator_addr && p.src_port == f.initiator_port;
    (up ? f.packets_up : f.packets_down).push_back(p);
    f.start_time = std::min(f.start_time, p.timestamp);
  }
  std::stable_sort(flows.begin(), flows.end(), [](const Flow& a, const Flow& b) { return a.start_time < b.start_time; });
  return flows;
}

inline std::string segment_name(const std::string& prefix, std::size_t window) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", window);
  return (prefix.empty() ? std::string("segment") : prefix) + "_" + buf;
}

/// Cuts the capture into non-overlapping windows aligned to the earliest
/// flow start. Each flow lands in the window holding its start_time and is
/// featurized only over that window. Empty windows are dropped.
inline std::vector<FlowFeatureSequence> segment_flows(std::span<const Flow> flows, double segment_secs,
                                                      int max_flows, const std::string& id_prefix = "segment",
                                                      int feature_dim = kFeatureDim) {
  require(segment_secs > 0, ErrorKind::InvalidConfig, "segment_secs must be > 0");
  require(max_flows > 0, ErrorKind::InvalidConfig, "max_flows must be > 0");
  std::vector<FlowFeatureSequence> out;
  if (flows.empty()) return out;
  double t0 = flows.front().start_time;
  for (const auto& f : flows) t0 = std::min(t0, f.start_time);

  std::map<std::size_t, std::vector<const Flow*>> windows;
  for (const auto& f : flows) {
    const auto w = static_cast<std::size_t>(std::floor((f.start_time - t0) / segment_secs));
    windows[w].push_back(&f);
  }
  for (auto& [w, members] : windows) {
    std::stable_sort(members.begin(), members.end(),
                     [](const Flow* a, const Flow* b) { return a->start_time < b->start_time; });
    if (static_cast<int>(members.size()) > max_flows) members.resize(max_flows);
    FlowFeatureSequence seq;
    seq.segment_start = t0 + static_cast<double>(w) * segment_secs;
    seq.segment_id = segment_name(id_prefix, w);
    seq.features.assign(max_flows, std::vector<double>(feature_dim, 0.0));
    seq.mask.assign(max_flows, false);
    const double end = seq.segment_start + segment_secs;
    for (std::size_t r = 0; r < members.size(); ++r) {
      seq.features[r] = featurize_flow(*members[r], seq.segment_start, end);
      seq.mask[r] = true;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

/// Checks shape, mask consistency (padding rows all-zero) and, for raw
/// features, non-decreasing start offsets over valid rows.
inline void validate_sequence(const FlowFeatureSequence& seq, int rows, int dim, bool raw_features = true) {
  require(static_cast<int>(seq.features.size()) == rows, ErrorKind::ShapeMismatch,
          "sequence has " + std::to_string(seq.features.size()) + " rows, expected " + std::to_string(rows));
  require(static_cast<int>(seq.mask.size()) == rows, ErrorKind::ShapeMismatch, "mask length mismatch");
  double last_offset = -1e300;
  for (int r = 0; r < rows; ++r) {
    const auto& row = seq.features[r];
    require(static_cast<int>(row.size()) == dim, ErrorKind::ShapeMismatch,
            "feature dimension " + std::to_string(row.size()) + " does not match expected " + std::to_string(dim));
    for (double v : row) require(std::isfinite(v), ErrorKind::InvalidArtifact, "non-finite feature value");
    if (!seq.mask[r]) {
      for (double v : row) require(v == 0.0, ErrorKind::InvalidArtifact, "padding row is not all-zero");
    } else if (raw_features && dim == features::kDim) {
      const double off = row[features::kStartOffset];
      require(off >= last_offset, ErrorKind::InvalidArtifact, "valid rows are not ordered by start time");
      last_offset = off;
    }
  }
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json segment_to_json(const FlowFeatureSequence& seq) {
  nlohmann::json j;
  j["segment_id"] = seq.segment_id;
  j["segment_start"] = seq.segment_start;
  j["mask"] = seq.mask;
  j["features"] = seq.features;
  return j;
}

inline FlowFeatureSequence segment_from_json(const nlohmann::json& j) {
  FlowFeatureSequence seq;
  try {
    seq.segment_id = j.at("segment_id").get<std::string>();
    seq.segment_start = j.at("segment_start").get<double>();
    seq.mask = j.at("mask").get<std::vector<bool>>();
    seq.features = j.at("features").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArtifact, std::string("bad segment record: ") + e.what());
  }
  return seq;
}

inline void write_segments_jsonl(std::ostream& os, std::span<const FlowFeatureSequence> segments) {
  for (const auto& s : segments) os << segment_to_json(s).dump() << '\n';
}

inline std::vector<FlowFeatureSequence> read_segments_jsonl(std::istream& is) {
  std::vector<FlowFeatureSequence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InvalidArtifact, std::string("bad JSONL line: ") + e.what());
    }
    out.push_back(segment_from_json(j));
  }
  return out;
}

}  // namespace t2t
