#include "picofw/net.hpp"

#include <charconv>
#include <stdexcept>

namespace picofw {

namespace {

std::optional<std::uint8_t> parse_octet(std::string_view tok) {
  if (tok.empty() || tok.size() > 3) return std::nullopt;
  if (tok.size() > 1 && tok[0] == '0') return std::nullopt;  // no octal-looking forms
  unsigned v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || v > 255)
    return std::nullopt;
  return static_cast<std::uint8_t>(v);
}

}  // namespace

IpAddr4 parse_ip(std::string_view text) {
  IpAddr4 addr;
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    std::size_t end = i < 3 ? text.find('.', pos) : text.size();
    if (end == std::string_view::npos)
      throw ParseError("malformed address '" + std::string(text) + "'", 0);
    std::string_view tok = text.substr(pos, end - pos);
    auto octet = parse_octet(tok);
    if (!octet)
      throw ParseError("malformed octet '" + std::string(tok) + "' in '" +
                           std::string(text) + "'",
                       pos);
    addr.octets[i] = *octet;
    pos = end + 1;
  }
  return addr;
}

std::string to_string(const IpAddr4& addr) {
  std::string out;
  out.reserve(15);
  for (int i = 0; i < 4; ++i) {
    if (i) out += '.';
    out += std::to_string(addr.octets[i]);
  }
  return out;
}

CidrBlock CidrBlock::make(IpAddr4 base, int prefix_len) {
  if (prefix_len < 0 || prefix_len > 32)
    throw std::invalid_argument("prefix length out of range: " +
                                std::to_string(prefix_len));
  CidrBlock b;
  b.prefix_len_ = prefix_len;
  b.base_ = IpAddr4::from_u32(base.to_u32() & mask_for(prefix_len));
  return b;
}

CidrBlock parse_cidr(std::string_view text) {
  auto slash = text.find('/');
  IpAddr4 base = parse_ip(text.substr(0, slash));
  if (slash == std::string_view::npos) return CidrBlock::make(base, 32);

  std::string_view len_tok = text.substr(slash + 1);
  int len = -1;
  auto [ptr, ec] =
      std::from_chars(len_tok.data(), len_tok.data() + len_tok.size(), len);
  if (len_tok.empty() || ec != std::errc{} ||
      ptr != len_tok.data() + len_tok.size() || len < 0 || len > 32)
    throw ParseError("prefix length '" + std::string(len_tok) +
                         "' out of range in '" + std::string(text) + "'",
                     slash + 1);
  return CidrBlock::make(base, len);
}

std::string render_cidr(const CidrBlock& block) {
  return to_string(block.base()) + "/" + std::to_string(block.prefix_len());
}

std::string_view to_string(Proto proto) {
  switch (proto) {
    case Proto::Tcp: return "tcp";
    case Proto::Udp: return "udp";
    case Proto::Icmp: return "icmp";
  }
  return "?";
}

std::optional<Proto> proto_from_string(std::string_view text) {
  if (text == "tcp") return Proto::Tcp;
  if (text == "udp") return Proto::Udp;
  if (text == "icmp") return Proto::Icmp;
  return std::nullopt;
}

std::string to_string(TcpFlags f) {
  std::string s;
  if (f.has(kSyn)) s += 'S';
  if (f.has(kAck)) s += 'A';
  if (f.has(kFin)) s += 'F';
  if (f.has(kRst)) s += 'R';
  return s;
}

std::uint32_t min_packet_size(Proto proto) {
  return proto == Proto::Tcp ? 40 : 28;
}

void check_packet(const Packet& p) {
  if (p.proto != Proto::Tcp && !p.tcp_flags.empty())
    throw std::invalid_argument("non-TCP packet carries TCP flags");
  if (p.size_bytes < min_packet_size(p.proto))
    throw std::invalid_argument("packet size " + std::to_string(p.size_bytes) +
                                " below header floor");
  if (p.proto == Proto::Icmp && (p.sport != 0 || p.dport != 0))
    throw std::invalid_argument("ICMP packet with nonzero ports");
}

Packet reverse(const Packet& p) {
  Packet r = p;
  std::swap(r.src, r.dst);
  std::swap(r.sport, r.dport);
  return r;
}

std::string to_string(const Endpoint& ep) {
  return to_string(ep.addr) + ":" + std::to_string(ep.port);
}

std::string summarize(const Packet& p) {
  std::string s(to_string(p.proto));
  s += ' ';
  if (p.proto == Proto::Icmp) {
    s += to_string(p.src) + " > " + to_string(p.dst);
  } else {
    s += to_string(Endpoint{p.src, p.sport}) + " > " +
         to_string(Endpoint{p.dst, p.dport});
  }
  if (!p.tcp_flags.empty()) s += " [" + to_string(p.tcp_flags) + "]";
  s += " " + std::to_string(p.size_bytes) + "B";
  return s;
}

FlowKey make_flow_key(Proto proto, Endpoint a, Endpoint b) {
  if (b < a) std::swap(a, b);
  return FlowKey{proto, a, b};
}

FlowKey flow_key(const Packet& p) {
  return make_flow_key(p.proto, Endpoint{p.src, p.sport},
                       Endpoint{p.dst, p.dport});
}

std::size_t FlowKeyHash::operator()(const FlowKey& k) const noexcept {
  std::uint64_t a = (std::uint64_t{k.lo.addr.to_u32()} << 16) | k.lo.port;
  std::uint64_t b = (std::uint64_t{k.hi.addr.to_u32()} << 16) | k.hi.port;
  std::uint64_t h = a * 0x9E3779B97F4A7C15ull;
  h ^= b + 0x7F4A7C159E3779B9ull + (h << 6) + (h >> 2);
  h ^= static_cast<std::uint64_t>(k.proto) * 0xC2B2AE3D27D4EB4Full;
  return static_cast<std::size_t>(h ^ (h >> 31));
}

}  // namespace picofw
