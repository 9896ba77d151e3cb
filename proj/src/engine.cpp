#include "picofw/engine.hpp"

#include <algorithm>

namespace picofw {

std::string_view to_string(VerdictKind k) {
  switch (k) {
    case VerdictKind::Accept: return "ACCEPT";
    case VerdictKind::Drop: return "DROP";
    case VerdictKind::Reject: return "REJECT";
    case VerdictKind::Continue: return "CONTINUE";
  }
  return "?";
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::DeliveredLocal: return "DELIVERED_LOCAL";
    case Outcome::Forwarded: return "FORWARDED";
    case Outcome::Dropped: return "DROPPED";
    case Outcome::Rejected: return "REJECTED";
  }
  return "?";
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::Log: return "LOG";
    case EventKind::RejectNotify: return "REJECT_NOTIFY";
    case EventKind::NatApplied: return "NAT_APPLIED";
    case EventKind::NatFailure: return "NAT_FAILURE";
  }
  return "?";
}

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<Seconds>(
        std::chrono::system_clock::now().time_since_epoch());
  };
}

bool match_rule(const Rule& r, const Packet& p, ConnState state) {
  const MatchSpec& m = r.match;
  if (m.src && !cidr_contains(*m.src, p.src)) return false;
  if (m.dst && !cidr_contains(*m.dst, p.dst)) return false;
  if (m.proto && *m.proto != p.proto) return false;
  if (m.sport && !m.sport->contains(p.sport)) return false;
  if (m.dport && !m.dport->contains(p.dport)) return false;
  if (m.in_iface && p.in_iface != m.in_iface) return false;
  if (m.out_iface && p.out_iface != m.out_iface) return false;
  if (m.conn_states && !m.conn_states->has(state)) return false;
  return true;
}

struct Engine::Walk {
  const Ruleset& rs;
  Table table;
  Packet packet;
  ConnState state;
  const TraceFn& trace;
  std::size_t traversed = 0;
  std::vector<Event> events;
  std::optional<NatBinding> nat;
};

Engine::Engine(Ruleset rs, EngineConfig cfg, Clock clock)
    : cfg_(cfg),
      clock_(std::move(clock)),
      started_(clock_()),
      conns_(cfg.conn_capacity, cfg.timeouts) {
  validate_ruleset(rs);
  ruleset_ = std::make_shared<const Ruleset>(std::move(rs));
  reset_counters();
}

void Engine::reset_counters() {
  counters_.clear();
  for (Table t : {Table::Filter, Table::Nat})
    for (const auto& [name, chain] : ruleset_->chains(t))
      counters_[name].rules.assign(chain.rules.size(), {0, 0});
}

Verdict Engine::walk_chain(Walk& w, const Chain& chain) {
  ChainCounters& ctr = counters_[chain.name];
  for (std::size_t i = 0; i < chain.rules.size(); ++i) {
    const Rule& r = chain.rules[i];
    ++w.traversed;
    bool matched = match_rule(r, w.packet, w.state);
    if (w.trace) w.trace({w.table, chain.name, i, matched, &r});
    if (!matched) continue;

    ctr.rules[i].first += 1;
    ctr.rules[i].second += w.packet.size_bytes;
    RuleRef ref{chain.name, i};
    switch (r.target.kind) {
      case TargetKind::Accept:
        return {VerdictKind::Accept, ref};
      case TargetKind::Drop:
        return {VerdictKind::Drop, ref};
      case TargetKind::Reject:
        w.events.push_back({EventKind::RejectNotify,
                            "chain=" + chain.name + " rule=" + std::to_string(i) +
                                " notify " + to_string(w.packet.src)});
        return {VerdictKind::Reject, ref};
      case TargetKind::Log:
        w.events.push_back({EventKind::Log, "chain=" + chain.name +
                                                " rule=" + std::to_string(i) +
                                                " " + summarize(w.packet)});
        continue;
      case TargetKind::Return:
        return {VerdictKind::Continue, std::nullopt};
      case TargetKind::Jump: {
        const Chain* next = w.rs.find(w.table, *r.target.jump_chain);
        Verdict v = walk_chain(w, *next);
        if (v.kind != VerdictKind::Continue) return v;
        continue;
      }
      case TargetKind::Snat:
      case TargetKind::Masquerade:
      case TargetKind::Dnat: {
        auto res = r.target.kind == TargetKind::Dnat
                       ? dnat_locked(w.packet, r.target)
                       : snat_locked(w.packet, r.target, w.nat);
        if (!res) {
          w.events.push_back({EventKind::NatFailure,
                              "chain=" + chain.name + " rule=" +
                                  std::to_string(i) + " no free mapping for " +
                                  summarize(w.packet)});
          return {VerdictKind::Drop, ref};
        }
        w.packet = res->first;
        w.nat = res->second;
        const Tuple& t = w.nat->rewrite.translated;
        w.events.push_back({EventKind::NatApplied,
                            std::string(to_string(r.target.kind)) + " " +
                                to_string(t.src) + " > " + to_string(t.dst)});
        return {VerdictKind::Accept, ref};
      }
    }
  }
  return {VerdictKind::Continue, std::nullopt};
}

ChainResult Engine::run_chain(Table table, std::string_view name,
                              const Packet& p, ConnState state,
                              const TraceFn& trace,
                              const std::optional<NatBinding>& nat) {
  const Chain* chain = ruleset_->find(table, name);
  if (!chain)
    throw std::invalid_argument("no chain '" + std::string(name) + "' in " +
                                std::string(to_string(table)) + " table");
  Walk w{*ruleset_, table, p, state, trace, 0, {}, nat};
  Verdict v = walk_chain(w, *chain);
  if (v.kind == VerdictKind::Continue && chain->builtin()) {
    counters_[chain->name].policy_hits += 1;
    v = {*chain->policy == Policy::Accept ? VerdictKind::Accept : VerdictKind::Drop,
         std::nullopt};
  }
  return ChainResult{v, std::move(w.packet), w.traversed, std::move(w.events),
                     std::move(w.nat)};
}

ChainResult Engine::evaluate_chain(Table table, std::string_view chain,
                                   const Packet& p, ConnState state,
                                   const TraceFn& trace) {
  std::lock_guard lock(mu_);
  return run_chain(table, chain, p, state, trace, std::nullopt);
}

std::optional<std::pair<Packet, NatBinding>> Engine::snat_locked(
    const Packet& p, const Target& target,
    const std::optional<NatBinding>& prior) {
  IpAddr4 addr = target.kind == TargetKind::Masquerade ? cfg_.masquerade_addr
                                                       : target.nat_to->addr;
  NatBinding b;
  b.rewrite.original = prior ? prior->rewrite.original : tuple_of(p);
  Packet q = p;
  q.src = addr;
  if (p.proto != Proto::Icmp) {
    std::optional<std::uint16_t> port;
    if (target.nat_to && target.nat_to->port) {
      auto fixed = *target.nat_to->port;
      port = conns_.reserve_port(p.proto, addr, fixed, fixed, fixed);
    } else {
      port = conns_.reserve_port(p.proto, addr, p.sport, cfg_.nat_port_lo,
                                 cfg_.nat_port_hi);
    }
    if (!port) return std::nullopt;
    q.sport = *port;
    b.pooled = Endpoint{addr, *port};
  }
  b.rewrite.translated = tuple_of(q);
  return std::make_pair(q, b);
}

std::optional<std::pair<Packet, NatBinding>> Engine::dnat_locked(
    const Packet& p, const Target& target) {
  NatBinding b;
  b.rewrite.original = tuple_of(p);
  Packet q = p;
  q.dst = target.nat_to->addr;
  if (p.proto != Proto::Icmp && target.nat_to->port) q.dport = *target.nat_to->port;
  b.rewrite.translated = tuple_of(q);
  return std::make_pair(q, b);
}

std::optional<std::pair<Packet, NatBinding>> Engine::apply_snat(
    const Packet& p, const Target& target,
    const std::optional<NatBinding>& prior) {
  if (target.kind != TargetKind::Snat && target.kind != TargetKind::Masquerade)
    throw std::invalid_argument("apply_snat needs an SNAT or MASQUERADE target");
  std::lock_guard lock(mu_);
  return snat_locked(p, target, prior);
}

std::optional<std::pair<Packet, NatBinding>> Engine::apply_dnat(
    const Packet& p, const Target& target) {
  if (target.kind != TargetKind::Dnat)
    throw std::invalid_argument("apply_dnat needs a DNAT target");
  std::lock_guard lock(mu_);
  return dnat_locked(p, target);
}

Disposition Engine::process_packet(const Packet& p, const TraceFn& trace) {
  std::lock_guard lock(mu_);
  const Seconds now = clock_();

  Disposition d;
  d.conn_state = conns_.classify(p);
  auto hit = conns_.find(p);
  if (hit && d.conn_state == ConnState::New &&
      hit->entry->state == TcpState::Closed) {
    // A fresh SYN reuses a dead tuple; the old binding goes away.
    FlowKey dead = hit->entry->key;
    conns_.remove(dead);
    hit.reset();
  }
  const bool fresh = !hit && d.conn_state == ConnState::New;
  const NatRewrite* cached =
      hit && hit->entry->nat_rewrite ? &*hit->entry->nat_rewrite : nullptr;
  const Direction dir = hit ? hit->dir : Direction::Original;

  Packet q = p;
  if (cached) {
    if (dir == Direction::Original) {
      q.dst = cached->translated.dst.addr;
      q.dport = cached->translated.dst.port;
    } else {
      q.dst = cached->original.src.addr;
      q.dport = cached->original.src.port;
    }
  }

  std::optional<NatBinding> nat;
  // Runs one chain; returns true when the packet's fate is sealed.
  auto stage = [&](Table table, std::string_view chain) {
    ChainResult r = run_chain(table, chain, q, d.conn_state, trace, nat);
    d.rules_traversed += r.rules_traversed;
    std::move(r.events.begin(), r.events.end(), std::back_inserter(d.events));
    // A later chain that falls through to its policy keeps the earlier rule.
    if (r.verdict.matched_rule || !d.verdict.matched_rule ||
        r.verdict.kind != VerdictKind::Accept)
      d.verdict = r.verdict;
    q = std::move(r.packet);
    nat = std::move(r.nat);
    if (r.verdict.kind == VerdictKind::Drop) {
      d.outcome = Outcome::Dropped;
      return true;
    }
    if (r.verdict.kind == VerdictKind::Reject) {
      d.outcome = Outcome::Rejected;
      return true;
    }
    return false;
  };

  bool sealed = false;
  if (p.in_iface) {
    if (fresh) sealed = stage(Table::Nat, kPrerouting);
    if (!sealed && q.dst_is_local) {
      sealed = stage(Table::Filter, kInput);
      if (!sealed) {
        d.outcome = Outcome::DeliveredLocal;
        sealed = true;
      }
    } else if (!sealed) {
      sealed = stage(Table::Filter, kForward);
    }
  } else {
    sealed = stage(Table::Filter, kOutput);
  }
  if (!sealed) {
    if (fresh) {
      sealed = stage(Table::Nat, kPostrouting);
    } else if (cached && dir == Direction::Original) {
      q.src = cached->translated.src.addr;
      q.sport = cached->translated.src.port;
    } else if (cached) {
      q.src = cached->original.dst.addr;
      q.sport = cached->original.dst.port;
    }
    if (!sealed) d.outcome = Outcome::Forwarded;
  }

  if (d.accepted() && nat) {
    FlowKey translated = flow_key(p.proto, nat->rewrite.translated);
    if (translated != flow_key(p) && conns_.flow_in_use(translated)) {
      d.events.push_back({EventKind::NatFailure,
                          "translated flow already in use: " + summarize(q)});
      d.outcome = Outcome::Dropped;
    }
  }
  d.final_packet = q;
  if (d.accepted()) {
    d.nat = nat;
    conns_.update(p, nat, now);
  } else if (nat && nat->pooled) {
    conns_.release_port(p.proto, *nat->pooled);
  }
  return d;
}

ConnState Engine::conntrack_classify(const Packet& p) const {
  std::lock_guard lock(mu_);
  return conns_.classify(p);
}

void Engine::conntrack_update(const Packet& p, const Disposition& d) {
  std::lock_guard lock(mu_);
  if (!d.accepted()) return;
  conns_.update(p, d.nat, clock_());
}

std::size_t Engine::expire_connections(Seconds now) {
  std::lock_guard lock(mu_);
  return conns_.expire(now);
}

StatsSnapshot Engine::snapshot_counters() const {
  std::lock_guard lock(mu_);
  StatsSnapshot s;
  for (const auto& [name, ctr] : counters_) {
    for (std::size_t i = 0; i < ctr.rules.size(); ++i)
      s.rules.push_back({name, i, ctr.rules[i].first, ctr.rules[i].second});
    const Table t = ruleset_->table_of(name).value_or(Table::Filter);
    const Chain* c = ruleset_->find(t, name);
    if (c && c->builtin()) s.policy_hits[name] = ctr.policy_hits;
  }
  std::sort(s.rules.begin(), s.rules.end(), [](const auto& a, const auto& b) {
    return std::tie(a.chain, a.index) < std::tie(b.chain, b.index);
  });
  s.conn_count = conns_.size();
  s.evictions = conns_.evictions();
  const Seconds now = clock_();
  s.uptime_s = (now - started_).count();
  s.timestamp = now.count();
  return s;
}

void Engine::swap_ruleset(Ruleset rs) {
  validate_ruleset(rs);
  auto next = std::make_shared<const Ruleset>(std::move(rs));
  std::lock_guard lock(mu_);
  ruleset_ = std::move(next);
  reset_counters();
}

std::shared_ptr<const Ruleset> Engine::ruleset() const {
  std::lock_guard lock(mu_);
  return ruleset_;
}

std::optional<ConnEntry> Engine::connection(const Packet& p) const {
  std::lock_guard lock(mu_);
  auto hit = conns_.find(p);
  if (!hit) return std::nullopt;
  return *hit->entry;
}

std::size_t Engine::connection_count() const {
  std::lock_guard lock(mu_);
  return conns_.size();
}

void Engine::flush_connections() {
  std::lock_guard lock(mu_);
  conns_.clear();
}

}  // namespace picofw
