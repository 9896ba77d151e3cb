#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "picofw/ruleset.hpp"
#include "picofw/sync.hpp"
#include "support.hpp"

using namespace picofw;
using testing::ip;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result fw(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = fwctl::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct Scratch {
  fs::path dir;
  Scratch() {
    static int n = 0;
    dir = fs::temp_directory_path() /
          ("picofw_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string file(const std::string& name, const std::string& text) const {
    fs::path p = dir / name;
    std::ofstream(p, std::ios::binary) << text;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  Result r = fw({});
  CHECK(r.code == 1);
  CHECK_FALSE(r.err.empty());
  CHECK(fw({"frobnicate"}).code == 1);
  CHECK(fw({"energy", "--watts", "3.5"}).code == 1);
  CHECK(fw({"energy", "--watts", "3.5", "--tariff", "0.08", "--bogus"}).code == 1);
  CHECK(fw({"bench", "--mode", "magic"}).code == 1);
  CHECK(fw({"bench", "--platform", "toaster"}).code == 1);
  CHECK(fw({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit 2") {
  Scratch s;
  Result r = fw({"load", s.path("missing.fw")});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("fwctl: ", 0) == 0);
  CHECK(fw({"load", s.file("bad.fw", "-A INPUT -j ACCEPT\n")}).code == 2);
  CHECK(fw({"eval", "--packet", "tcp 1.1.1.1 > 2.2.2.2:80"}).code == 2);
  CHECK(fw({"energy", "--watts", "-1", "--tariff", "0.08"}).code == 2);
  CHECK(fw({"fleet", "--server", "127.0.0.1:1", "--group", "g"}).code == 2);
}

TEST_CASE("save, load and edit an image") {
  Scratch s;
  Result saved = fw({"save"});
  CHECK(saved.code == 0);
  CHECK(saved.out == serialize_ruleset(Ruleset::empty()));

  std::string img = s.path("fw.img");
  REQUIRE(fw({"save", "--out", img}).code == 0);
  Result loaded = fw({"load", img});
  CHECK(loaded.code == 0);
  CHECK(loaded.out ==
        "ok version=0 rules=0 sha256=" + to_hex(Ruleset::empty().checksum()) + "\n");

  CHECK(fw({"append", "--ruleset", img, "--rule", "-A INPUT -p tcp --dport 22 -j ACCEPT"}).out ==
        "ok version=1\n");
  CHECK(fw({"append", "--ruleset", img, "--new-chain", "LOGDROP", "--rule",
            "-A LOGDROP -j LOG"})
            .out == "ok version=2\n");
  CHECK(fw({"append", "--ruleset", img, "--rule", "-A INPUT -j LOGDROP"}).code == 0);
  CHECK(fw({"policy", "--ruleset", img, "--chain", "INPUT", "--target", "DROP"}).code == 0);

  Ruleset rs = parse_ruleset(slurp(img));
  CHECK(rs.version == 4);
  CHECK(*rs.find(Table::Filter, "INPUT")->policy == Policy::Drop);
  CHECK(rs.find(Table::Filter, "INPUT")->rules.size() == 2);
  CHECK(fw({"load", "--ruleset", img}).out.rfind("ok version=4 rules=3 ", 0) == 0);

  std::string copy = s.path("copy.img");
  CHECK(fw({"flush", "--ruleset", img, "--chain", "INPUT", "--out", copy}).code == 0);
  CHECK(parse_ruleset(slurp(copy)).find(Table::Filter, "INPUT")->rules.empty());
  CHECK(parse_ruleset(slurp(img)).version == 4);

  CHECK(fw({"append", "--ruleset", img}).code == 1);
  CHECK(fw({"policy", "--ruleset", img, "--chain", "INPUT", "--target", "MAYBE"}).code == 1);
  CHECK(fw({"append", "--ruleset", img, "--rule", "-A INPUT -j NOWHERE"}).code == 2);
  CHECK(fw({"append", "--ruleset", img, "--rule", "-A INPUT --dport 1 -j DROP"}).code == 2);
  CHECK(parse_ruleset(slurp(img)).version == 4);
}

TEST_CASE("eval and trace") {
  Scratch s;
  std::string empty = s.file("empty.img", serialize_ruleset(Ruleset::empty()));
  Result r = fw({"eval", "--ruleset", empty, "--packet", "tcp 1.1.1.1:5000 > 2.2.2.2:80 syn fwd"});
  CHECK(r.code == 0);
  CHECK(r.out == "FORWARDED rules_traversed=0\n");

  Ruleset rs = testing::with_rules({"-A INPUT -m state --state ESTABLISHED -j ACCEPT",
                                    "-A FORWARD -p tcp --dport 23 -j REJECT",
                                    "-A FORWARD -p tcp --dport 24 -j LOG"});
  rs = set_policy(std::move(rs), "INPUT", Policy::Drop);
  std::string img = s.file("rules.img", serialize_ruleset(rs));

  r = fw({"eval", "--ruleset", img, "--packet", "tcp 1.1.1.1:5000 > 2.2.2.2:23 syn"});
  CHECK(r.out.rfind("REJECTED rules_traversed=1\n  event REJECT_NOTIFY", 0) == 0);

  // A stateful sequence: out, reply, unsolicited.
  r = fw({"eval", "--ruleset", img,
          "--packet", "tcp 10.0.0.2:40000 > 9.9.9.9:443 syn out",
          "--packet", "tcp 9.9.9.9:443 > 10.0.0.2:40000 syn ack local",
          "--packet", "tcp 9.9.9.9:443 > 10.0.0.2:40001 syn local"});
  CHECK(r.out ==
        "FORWARDED rules_traversed=0\n"
        "DELIVERED_LOCAL rules_traversed=1\n"
        "DROPPED rules_traversed=1\n");

  r = fw({"trace", "--ruleset", img, "--packet", "tcp 1.1.1.1:5000 > 2.2.2.2:24 syn"});
  CHECK(r.code == 0);
  std::istringstream lines(r.out);
  std::vector<std::string> got;
  for (std::string l; std::getline(lines, l);) got.push_back(l);
  REQUIRE(got.size() == 5);
  CHECK(got[1] == "  filter FORWARD #0 skip  -p tcp --dport 23 -j REJECT");
  CHECK(got[2] == "  filter FORWARD #1 match -p tcp --dport 24 -j LOG");
  CHECK(got[3] == "FORWARDED rules_traversed=2");
  CHECK(got[4].rfind("  event LOG", 0) == 0);

  std::string nat = s.file("nat.img", serialize_ruleset(testing::with_rules(
                                          {"-A POSTROUTING -o eth1 -j MASQUERADE"})));
  r = fw({"eval", "--ruleset", nat, "--packet", "udp 192.168.0.2:5353 > 8.8.8.8:53"});
  CHECK(r.out.find("  rewritten ") != std::string::npos);
  CHECK(r.out.find("203.0.113.1") != std::string::npos);
}

TEST_CASE("packet literals") {
  Packet p = fwctl::parse_packet_literal("tcp 1.2.3.4:10 > 5.6.7.8:20 syn ack fwd");
  CHECK(p.proto == Proto::Tcp);
  CHECK(p.src == ip(1, 2, 3, 4));
  CHECK(p.dport == 20);
  CHECK(p.tcp_flags == flags(kSyn | kAck));
  CHECK(p.in_iface == "eth0");
  CHECK(p.out_iface == "eth1");
  CHECK_FALSE(p.dst_is_local);

  Packet local = fwctl::parse_packet_literal("udp 1.2.3.4:10 > 5.6.7.8:20 local");
  CHECK(local.dst_is_local);
  CHECK_FALSE(local.out_iface.has_value());
  Packet out = fwctl::parse_packet_literal("icmp 1.2.3.4 > 5.6.7.8 out");
  CHECK_FALSE(out.in_iface.has_value());
  CHECK(out.sport == 0);

  CHECK_THROWS_AS(fwctl::parse_packet_literal("tcp 1.2.3.4 > 5.6.7.8:1"), ParseError);
  CHECK_THROWS_AS(fwctl::parse_packet_literal("udp 1.2.3.4:1 > 5.6.7.8:1 syn"), ParseError);
  CHECK_THROWS_AS(fwctl::parse_packet_literal("tcp 1.2.3.4:1 5.6.7.8:1"), ParseError);
  CHECK_THROWS_AS(fwctl::parse_packet_literal("sctp 1.2.3.4:1 > 5.6.7.8:1"), ParseError);
  CHECK_THROWS_AS(fwctl::parse_packet_literal("tcp 1.2.3.4:1 > 5.6.7.8:1 out syn"), ParseError);
  CHECK_THROWS_AS(fwctl::parse_packet_literal("tcp 1.2.3.4:1 > 5.6.7.8:70000"), ParseError);
}

TEST_CASE("bench output") {
  Result r = fw({"bench", "--mode", "model", "--platform", "rpi", "--rules", "0,800", "--csv"});
  CHECK(r.code == 0);
  CHECK(r.out ==
        "n_rules,throughput_mbps,mode,platform\n"
        "0,58.000000,model,rpi\n"
        "800,20.000000,model,rpi\n");

  r = fw({"bench", "--platform", "cubieboard", "--rules", "800", "--csv", "--presets"});
  CHECK(r.out.find("800,30.000000,model,cubieboard\n") != std::string::npos);
  CHECK(r.out.find("preset,ZigBee,0.06\n") != std::string::npos);
  CHECK(r.out.find("preset,WiMAX,6\n") != std::string::npos);

  r = fw({"bench", "--rules", "0"});
  CHECK(r.out.find("58.000 Mbps") != std::string::npos);

  std::vector<std::string> native = {"bench", "--mode", "native", "--rules", "0,50,200",
                                     "--total-bytes", "20000", "--trials", "1",
                                     "--no-timing", "--seed", "9"};
  Result a = fw(native), b = fw(native);
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out.find("NA") != std::string::npos);
  native.back() = "10";
  CHECK(fw(native).out != a.out);

  native.push_back("--csv");
  Result c = fw(native);
  CHECK(c.out.rfind("n_rules,throughput_mbps,mode,platform\n0,NA,native,", 0) == 0);

  Scratch s;
  std::string cfg = s.file("bench.cfg", "total_bytes=20000\nrules=0,10\ntrials=1\npath=input\n");
  Result fromcfg = fw({"bench", "--mode", "native", "--config", cfg, "--no-timing"});
  CHECK(fromcfg.code == 0);
  CHECK(fromcfg.out.find("      10 rules  NA") != std::string::npos);
  CHECK(fw({"bench", "--config", s.path("none.cfg")}).code == 2);
}

TEST_CASE("energy output") {
  Result r = fw({"energy", "--watts", "3.5", "--tariff", "0.08"});
  CHECK(r.code == 0);
  CHECK(r.out.find("daily_wh 84\n") != std::string::npos);
  CHECK(r.out.find("daily_kwh 0.084\n") != std::string::npos);
  CHECK(r.out.find("annual $2.45\n") != std::string::npos);
  std::istringstream in(r.out);
  double daily = -1, annual = -1;
  for (std::string key; in >> key;) {
    if (key == "daily_cost") in >> daily;
    else if (key == "annual_cost") in >> annual;
    else in.ignore(1 << 10, '\n');
  }
  CHECK(daily == doctest::Approx(0.00672));
  CHECK(annual == doctest::Approx(2.4528));
}

TEST_CASE("publish and fleet against a live server") {
  Scratch s;
  PolicyServer server;
  SyncListener listener(server, {"127.0.0.1", 0});
  std::string at = "127.0.0.1:" + std::to_string(listener.port());
  std::string img = s.file("p.img", serialize_ruleset(testing::with_rules({"-A INPUT -j DROP"})));

  Result r = fw({"publish", "--server", at, "--group", "lab", "--ruleset", img});
  CHECK(r.code == 0);
  CHECK(r.out == "published version=1\n");
  CHECK(fw({"publish", "--server", at, "--group", "lab", "--ruleset", img}).out ==
        "published version=2\n");
  CHECK(fw({"publish", "--server", at, "--group", "lab", "--ruleset",
            s.file("junk.img", "junk")})
            .code == 2);

  Engine engine;
  Agent agent({"pi-1", "lab", "rpi", 0}, engine);
  agent.sync(tcp_exchange(parse_host_port(at)));

  r = fw({"fleet", "--server", at, "--group", "lab"});
  CHECK(r.code == 0);
  CHECK(r.out ==
        "group lab current_version=2 agents=1 version_skew=no total_packets=0 total_bytes=0\n"
        "  pi-1 platform=rpi applied_version=2 packets=0 bytes=0\n");
  r = fw({"fleet", "--server", at, "--group", "nobody"});
  CHECK(r.code == 2);
  CHECK(r.err.find("GROUP_NOT_FOUND") != std::string::npos);
}
