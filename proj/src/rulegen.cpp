#include <random>

#include "picofw/ruleset.hpp"

namespace picofw {

namespace {

// Draws are built from raw engine output so the sequence is identical across
// standard library implementations (the distributions are not).
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }
  // Uniform in [lo, hi]; modulo bias is irrelevant at these ranges.
  std::uint64_t range(std::uint64_t lo, std::uint64_t hi) {
    return lo + gen_() % (hi - lo + 1);
  }
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }

 private:
  std::mt19937_64 gen_;
};

CidrBlock random_block(Draw& d, int min_len) {
  int len = static_cast<int>(d.range(static_cast<std::uint64_t>(min_len), 32));
  return CidrBlock::make(IpAddr4::from_u32(static_cast<std::uint32_t>(d.bits())),
                         len);
}

PortRange random_ports(Draw& d) {
  auto lo = static_cast<std::uint16_t>(d.range(1, 65535));
  if (d.chance(0.5)) return {lo, lo};
  auto hi = static_cast<std::uint16_t>(d.range(lo, 65535));
  return {lo, hi};
}

Rule non_matching_rule(Draw& d, const FlowKey& flow) {
  Rule r;
  CidrBlock src;
  do {
    src = random_block(d, 8);
  } while (cidr_contains(src, flow.lo.addr) || cidr_contains(src, flow.hi.addr));
  r.match.src = src;
  switch (d.range(0, 2)) {
    case 0: r.match.proto = Proto::Tcp; break;
    case 1: r.match.proto = Proto::Udp; break;
    default: break;
  }
  if (d.chance(0.5)) r.match.dst = random_block(d, 8);
  if (r.match.proto && d.chance(0.6)) r.match.dport = random_ports(d);
  r.target = Target::of(TargetKind::Accept);
  return r;
}

Rule matchable_rule(Draw& d, const FlowKey& flow) {
  Rule r;
  bool from_lo = d.chance(0.5);
  const Endpoint& from = from_lo ? flow.lo : flow.hi;
  const Endpoint& to = from_lo ? flow.hi : flow.lo;
  int len = static_cast<int>(d.range(8, 32));
  r.match.src = CidrBlock::make(from.addr, len);
  if (d.chance(0.5)) {
    r.match.proto = flow.proto;
    bool ported = flow.proto == Proto::Tcp || flow.proto == Proto::Udp;
    if (ported && d.chance(0.5)) r.match.dport = PortRange{to.port, to.port};
  }
  r.target = Target::of(TargetKind::Accept);
  return r;
}

}  // namespace

std::vector<Rule> generate_random_rules(const RuleGenSpec& spec,
                                        const FlowKey& flow) {
  Draw d(spec.seed);
  std::vector<Rule> rules;
  rules.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rule r = d.chance(spec.matchable_fraction) ? matchable_rule(d, flow)
                                               : non_matching_rule(d, flow);
    r.raw_text = render_rule(spec.chain, r);
    rules.push_back(std::move(r));
  }
  return rules;
}

}  // namespace picofw
