#include "picofw/conntrack.hpp"

#include <limits>

namespace picofw {

namespace {

bool is_syn(const Packet& p) {
  return p.tcp_flags.has(kSyn) && !p.tcp_flags.has(kAck);
}
bool is_syn_ack(const Packet& p) {
  return p.tcp_flags.has(kSyn) && p.tcp_flags.has(kAck);
}

}  // namespace

std::string_view to_string(TcpState s) {
  switch (s) {
    case TcpState::SynSent: return "SYN_SENT";
    case TcpState::Established: return "ESTABLISHED";
    case TcpState::Closing: return "CLOSING";
    case TcpState::Closed: return "CLOSED";
  }
  return "?";
}

Tuple tuple_of(const Packet& p) {
  return Tuple{{p.src, p.sport}, {p.dst, p.dport}};
}

FlowKey flow_key(Proto proto, const Tuple& t) {
  return make_flow_key(proto, t.src, t.dst);
}

ConnTable::ConnTable(std::size_t capacity, ConntrackTimeouts t)
    : capacity_(capacity == 0 ? 1 : capacity), timeouts_(t) {}

std::optional<ConnTable::Hit> ConnTable::find(const Packet& p) const {
  FlowKey key = flow_key(p);
  const ConnEntry* e = nullptr;
  if (auto it = entries_.find(key); it != entries_.end()) {
    e = &it->second;
  } else if (auto r = reply_index_.find(key); r != reply_index_.end()) {
    e = &entries_.at(r->second);
  } else {
    return std::nullopt;
  }
  Tuple t = tuple_of(p);
  return Hit{e, t == e->origin ? Direction::Original : Direction::Reply};
}

ConnState ConnTable::classify(const Packet& p) const {
  auto hit = find(p);
  if (!hit) {
    if (p.proto != Proto::Tcp) return ConnState::New;
    return is_syn(p) ? ConnState::New : ConnState::Invalid;
  }
  if (p.proto != Proto::Tcp) return ConnState::Established;
  switch (hit->entry->state) {
    case TcpState::Established:
    case TcpState::Closing:
      return ConnState::Established;
    case TcpState::SynSent:
      if (hit->dir == Direction::Reply && is_syn_ack(p))
        return ConnState::Established;
      if (hit->dir == Direction::Original && is_syn(p)) return ConnState::New;
      return ConnState::Invalid;
    case TcpState::Closed:
      return is_syn(p) ? ConnState::New : ConnState::Invalid;
  }
  return ConnState::Invalid;
}

bool ConnTable::update(const Packet& p, const std::optional<NatBinding>& nat,
                       Seconds now) {
  auto hit = find(p);
  if (!hit) {
    if (p.proto == Proto::Tcp && !is_syn(p)) {
      if (nat && nat->pooled) release_port(p.proto, *nat->pooled);
      return false;
    }
    create(p, p.proto == Proto::Tcp ? TcpState::SynSent : TcpState::Established,
           nat, now);
    return true;
  }

  ConnEntry& e = entries_.at(hit->entry->key);
  if (p.proto == Proto::Tcp) {
    const TcpFlags f = p.tcp_flags;
    if (f.has(kRst)) {
      e.state = TcpState::Closed;
    } else if (f.has(kFin)) {
      if (e.state != TcpState::Closed) e.state = TcpState::Closing;
    } else if (is_syn(p) && e.state == TcpState::Closed) {
      FlowKey old = e.key;
      erase(old);
      create(p, TcpState::SynSent, nat, now);
      return true;
    } else if (is_syn_ack(p) && hit->dir == Direction::Reply &&
               e.state == TcpState::SynSent) {
      e.state = TcpState::Established;
    }
  }
  e.last_seen = now;
  // An existing entry keeps its binding for life.
  if (nat && nat->pooled) release_port(p.proto, *nat->pooled);
  return true;
}

void ConnTable::create(const Packet& p, TcpState state,
                       const std::optional<NatBinding>& nat, Seconds now) {
  if (entries_.size() >= capacity_) evict_one();
  ConnEntry e;
  e.key = flow_key(p);
  e.origin = tuple_of(p);
  e.state = state;
  e.created = now;
  e.last_seen = now;
  if (nat) {
    e.nat_rewrite = nat->rewrite;
    e.pooled = nat->pooled;
    FlowKey translated = flow_key(p.proto, nat->rewrite.translated);
    if (translated != e.key) reply_index_[translated] = e.key;
  }
  entries_[e.key] = e;
}

void ConnTable::erase(const FlowKey& key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) return;
  const ConnEntry& e = it->second;
  if (e.nat_rewrite) {
    FlowKey translated = flow_key(key.proto, e.nat_rewrite->translated);
    auto r = reply_index_.find(translated);
    if (r != reply_index_.end() && r->second == key) reply_index_.erase(r);
  }
  if (e.pooled) release_port(key.proto, *e.pooled);
  entries_.erase(it);
}

void ConnTable::evict_one() {
  const ConnEntry* victim = nullptr;
  Seconds earliest{std::numeric_limits<double>::infinity()};
  for (const auto& [_, e] : entries_) {
    Seconds expiry = e.last_seen + timeout_for(e);
    if (expiry < earliest || (expiry == earliest && victim && e.key < victim->key)) {
      earliest = expiry;
      victim = &e;
    }
  }
  if (victim) {
    erase(victim->key);
    ++evictions_;
  }
}

std::size_t ConnTable::expire(Seconds now) {
  std::vector<FlowKey> stale;
  for (const auto& [key, e] : entries_)
    if (now - e.last_seen > timeout_for(e)) stale.push_back(key);
  for (const auto& k : stale) erase(k);
  return stale.size();
}

Seconds ConnTable::timeout_for(const ConnEntry& e) const {
  if (e.key.proto != Proto::Tcp) return timeouts_.datagram;
  switch (e.state) {
    case TcpState::Established: return timeouts_.established;
    case TcpState::SynSent: return timeouts_.syn_sent;
    case TcpState::Closing:
    case TcpState::Closed: return timeouts_.closing;
  }
  return timeouts_.closing;
}

bool ConnTable::flow_in_use(const FlowKey& key) const {
  return entries_.contains(key) || reply_index_.contains(key);
}

std::optional<std::uint16_t> ConnTable::reserve_port(Proto proto, IpAddr4 addr,
                                                     std::uint16_t preferred,
                                                     std::uint16_t lo,
                                                     std::uint16_t hi) {
  auto key = [&](std::uint16_t port) {
    return std::make_tuple(proto, addr.to_u32(), port);
  };
  if (pool_.insert(key(preferred)).second) return preferred;
  for (std::uint32_t port = lo; port <= hi; ++port) {
    if (pool_.insert(key(static_cast<std::uint16_t>(port))).second)
      return static_cast<std::uint16_t>(port);
  }
  return std::nullopt;
}

void ConnTable::release_port(Proto proto, const Endpoint& ep) {
  pool_.erase(std::make_tuple(proto, ep.addr.to_u32(), ep.port));
}

bool ConnTable::port_reserved(Proto proto, const Endpoint& ep) const {
  return pool_.contains(std::make_tuple(proto, ep.addr.to_u32(), ep.port));
}

void ConnTable::clear() {
  entries_.clear();
  reply_index_.clear();
  pool_.clear();
}

}  // namespace picofw
