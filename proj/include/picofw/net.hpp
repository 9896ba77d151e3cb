#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace picofw {

// Raised for malformed text input. column() is the 0-based offset of the
// offending token within the parsed line, or npos when unknown.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what,
                      std::size_t column = std::string::npos)
      : std::runtime_error(what), column_(column) {}
  std::size_t column() const { return column_; }

 private:
  std::size_t column_;
};

struct IpAddr4 {
  std::array<std::uint8_t, 4> octets{};

  static constexpr IpAddr4 from_u32(std::uint32_t v) {
    return IpAddr4{{static_cast<std::uint8_t>(v >> 24),
                    static_cast<std::uint8_t>(v >> 16),
                    static_cast<std::uint8_t>(v >> 8),
                    static_cast<std::uint8_t>(v)}};
  }
  constexpr std::uint32_t to_u32() const {
    return (std::uint32_t{octets[0]} << 24) | (std::uint32_t{octets[1]} << 16) |
           (std::uint32_t{octets[2]} << 8) | std::uint32_t{octets[3]};
  }

  friend constexpr auto operator<=>(const IpAddr4&, const IpAddr4&) = default;
};

IpAddr4 parse_ip(std::string_view text);
std::string to_string(const IpAddr4& addr);

// Stored form always has the host bits cleared; construct through make().
class CidrBlock {
 public:
  CidrBlock() = default;
  static CidrBlock make(IpAddr4 base, int prefix_len);

  IpAddr4 base() const { return base_; }
  int prefix_len() const { return prefix_len_; }
  std::uint32_t mask() const { return mask_for(prefix_len_); }

  static constexpr std::uint32_t mask_for(int prefix_len) {
    return prefix_len == 0 ? 0u : ~std::uint32_t{0} << (32 - prefix_len);
  }

  friend bool operator==(const CidrBlock&, const CidrBlock&) = default;

 private:
  IpAddr4 base_{};
  int prefix_len_ = 0;
};

CidrBlock parse_cidr(std::string_view text);
std::string render_cidr(const CidrBlock& block);

inline bool cidr_contains(const CidrBlock& block, const IpAddr4& addr) {
  return (addr.to_u32() & block.mask()) == block.base().to_u32();
}

enum class Proto : std::uint8_t { Tcp, Udp, Icmp };

std::string_view to_string(Proto proto);
std::optional<Proto> proto_from_string(std::string_view text);

enum TcpFlag : std::uint8_t {
  kSyn = 1 << 0,
  kAck = 1 << 1,
  kFin = 1 << 2,
  kRst = 1 << 3,
};

struct TcpFlags {
  std::uint8_t bits = 0;

  constexpr bool has(TcpFlag f) const { return (bits & f) != 0; }
  constexpr bool empty() const { return bits == 0; }
  friend constexpr bool operator==(TcpFlags, TcpFlags) = default;
};

constexpr TcpFlags flags(std::uint8_t bits) { return TcpFlags{bits}; }
std::string to_string(TcpFlags f);

struct Packet {
  Proto proto = Proto::Tcp;
  IpAddr4 src;
  IpAddr4 dst;
  std::uint16_t sport = 0;
  std::uint16_t dport = 0;
  TcpFlags tcp_flags;
  std::uint32_t size_bytes = 40;
  std::optional<std::string> in_iface;
  std::optional<std::string> out_iface;
  bool dst_is_local = false;

  friend bool operator==(const Packet&, const Packet&) = default;
};

// Header floor per protocol: 40 for TCP, 28 for UDP and ICMP.
std::uint32_t min_packet_size(Proto proto);

// Throws std::invalid_argument when a Packet invariant does not hold.
void check_packet(const Packet& p);

// Swaps source and destination endpoints; flags and interfaces are kept.
Packet reverse(const Packet& p);

// One-line human summary, e.g. "tcp 1.1.1.1:5000 > 2.2.2.2:80 [S] 1500B".
std::string summarize(const Packet& p);

struct Endpoint {
  IpAddr4 addr;
  std::uint16_t port = 0;
  friend constexpr auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

std::string to_string(const Endpoint& ep);

// Direction-independent flow identity: lo <= hi always.
struct FlowKey {
  Proto proto = Proto::Tcp;
  Endpoint lo;
  Endpoint hi;
  friend constexpr auto operator<=>(const FlowKey&, const FlowKey&) = default;
};

FlowKey flow_key(const Packet& p);
FlowKey make_flow_key(Proto proto, Endpoint a, Endpoint b);

struct FlowKeyHash {
  std::size_t operator()(const FlowKey& k) const noexcept;
};

enum class LinkKind : std::uint8_t {
  ZigBee,
  Satellite,
  WirelessMesh,
  LongDistanceWiFi,
  WiMAX,
};

struct LinkPreset {
  LinkKind kind;
  std::string_view name;
  double net_bandwidth_mbps;
};

// Net bandwidths of the alternative access networks, slowest first.
inline constexpr std::array<LinkPreset, 5> kLinkPresets{{
    {LinkKind::ZigBee, "ZigBee", 0.060},
    {LinkKind::Satellite, "Satellite", 1.0},
    {LinkKind::WirelessMesh, "WirelessMesh", 2.5},
    {LinkKind::LongDistanceWiFi, "LongDistanceWiFi", 5.0},
    {LinkKind::WiMAX, "WiMAX", 6.0},
}};

}  // namespace picofw
