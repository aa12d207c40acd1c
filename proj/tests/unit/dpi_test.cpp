#include "antproxy/dpi.h"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "antproxy/error.h"
#include "support/naive_scan.h"

using namespace antproxy;
using namespace antproxy::dpi;
using antproxy::testing::contains;

namespace {

Datagram tcp_datagram(const std::string& payload) {
  Datagram d;
  d.ip.src = Ipv4Addr::from_octets(10, 0, 0, 1);
  d.ip.dst = Ipv4Addr::from_octets(10, 0, 0, 2);
  TcpHeader t;
  t.src_port = 40000;
  t.dst_port = 80;
  t.flags = tcp_flag::ACK | tcp_flag::PSH;
  d.transport = t;
  d.payload.assign(payload.begin(), payload.end());
  finalize_datagram(d);
  return d;
}

PolicyContext ctx(const std::string& app = "com.example") {
  PolicyContext c;
  c.app_id = app;
  c.scrub_seed = 42;
  c.now_us = 1'000'000;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  struct Dir {
    std::filesystem::path path =
        std::filesystem::temp_directory_path() / ("antproxy_dpi_" + std::to_string(::getpid()));
    ~Dir() {
      std::error_code ec;
      std::filesystem::remove_all(path, ec);
    }
  };
  static Dir dir;
  std::filesystem::create_directories(dir.path);
  auto p = dir.path / name;
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST(Ruleset, CompileErrors) {
  try {
    Ruleset::compile({{"a", "", "x"}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyPattern);
  }
  try {
    Ruleset::compile({{"a", "x", ""}, {"a", "y", ""}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DuplicatePatternId);
  }
  EXPECT_THROW(Ruleset::compile({{"big", std::string(1025, 'z'), ""}}), Error);
  EXPECT_NO_THROW(Ruleset::compile({{"max", std::string(1024, 'z'), ""}}));
}

TEST(Ruleset, FindsImeiInPayload) {
  auto rules = Ruleset::compile({{"imei", "356938035643809", "IMEI"}, {"mail", "alice@example.com", "Email"}});
  const std::string payload = "GET /track?device=356938035643809&v=2 HTTP/1.1\r\n";
  const auto m = rules->inspect(Datagram{tcp_datagram(payload)}.payload);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(rules->pattern(m[0].pattern).label, "IMEI");
  EXPECT_EQ(m[0].offset, payload.find("356938035643809"));
}

TEST(Ruleset, EmptyPayloadHasNoMatches) {
  auto rules = Ruleset::compile({{"imei", "356938035643809", "IMEI"}});
  EXPECT_TRUE(rules->inspect({}).empty());
}

TEST(ScrubReplacement, DeterministicPrintableExactLength) {
  const std::string a = scrub_replacement(9, 1234);
  EXPECT_EQ(a.size(), 9u);
  EXPECT_EQ(a, scrub_replacement(9, 1234));
  // recorded vector for seed 1234
  EXPECT_EQ(a, "2mMqbFV53");
  for (char c : a) EXPECT_TRUE(std::isprint(static_cast<unsigned char>(c)));
  EXPECT_EQ(scrub_replacement(1, 7).size(), 1u);
}

TEST(ScrubReplacement, DistinctSeedsRarelyCollide) {
  std::set<std::string> seen;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) seen.insert(scrub_replacement(12, seed));
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(ApplyPolicy, ScrubPreservesLengthAndChecksums) {
  auto rules = Ruleset::compile({{"secret", "SECRET123", "Token"}});
  PolicyTable policies;
  policies.set("com.example", "secret", Action::Scrub);
  Datagram d = tcp_datagram("id=SECRET123&x=1");
  const auto total = d.ip.total_length;
  const auto matches = rules->inspect(d.payload);
  const Verdict v = apply_policy(d, matches, *rules, policies, ctx());
  EXPECT_EQ(v.kind, VerdictKind::Forward);
  EXPECT_TRUE(v.modified);
  EXPECT_EQ(d.payload.size(), 16u);
  EXPECT_EQ(d.ip.total_length, total);
  EXPECT_FALSE(contains(d.payload, "SECRET123"));
  EXPECT_EQ(std::string(d.payload.begin(), d.payload.begin() + 3), "id=");
  EXPECT_EQ(std::string(d.payload.end() - 4, d.payload.end()), "&x=1");
  EXPECT_NO_THROW(parse_datagram(serialize_datagram(d)));
  EXPECT_EQ(parse_datagram(serialize_datagram(d)), d);
  ASSERT_EQ(v.events.size(), 1u);
  EXPECT_EQ(v.events[0].action, Action::Scrub);
  EXPECT_FALSE(v.events[0].needs_decision);
}

TEST(ApplyPolicy, BlockDrops) {
  auto rules = Ruleset::compile({{"secret", "SECRET123", "Token"}});
  PolicyTable policies;
  policies.set("com.example", "secret", Action::Block);
  Datagram d = tcp_datagram("id=SECRET123&x=1");
  const Verdict v = apply_policy(d, rules->inspect(d.payload), *rules, policies, ctx());
  EXPECT_EQ(v.kind, VerdictKind::Drop);
  ASSERT_EQ(v.events.size(), 1u);
  EXPECT_EQ(v.events[0].action, Action::Block);
}

TEST(ApplyPolicy, AllowForwardsUnchangedButLogs) {
  auto rules = Ruleset::compile({{"secret", "SECRET123", "Token"}});
  PolicyTable policies;
  policies.set("com.example", "secret", Action::Allow);
  Datagram d = tcp_datagram("id=SECRET123&x=1");
  const Datagram before = d;
  const Verdict v = apply_policy(d, rules->inspect(d.payload), *rules, policies, ctx());
  EXPECT_EQ(v.kind, VerdictKind::Forward);
  EXPECT_FALSE(v.modified);
  EXPECT_EQ(d, before);
  ASSERT_EQ(v.events.size(), 1u);
  EXPECT_EQ(v.events[0].action, Action::Allow);
}

TEST(ApplyPolicy, UnseenPairScrubsAndAsks) {
  auto rules = Ruleset::compile({{"secret", "SECRET123", "Token"}});
  PolicyTable policies;
  policies.set("other.app", "secret", Action::Allow);
  Datagram d = tcp_datagram("SECRET123");
  const Verdict v = apply_policy(d, rules->inspect(d.payload), *rules, policies, ctx());
  EXPECT_TRUE(v.modified);
  ASSERT_EQ(v.events.size(), 1u);
  EXPECT_TRUE(v.events[0].needs_decision);
  EXPECT_EQ(v.events[0].action, Action::Scrub);
}

TEST(ApplyPolicy, OneEventPerPatternGroup) {
  auto rules = Ruleset::compile({{"a", "xyz", ""}, {"b", "zz", ""}});
  PolicyTable policies;
  Datagram d = tcp_datagram("xyz..xyz..zzz");
  const Verdict v = apply_policy(d, rules->inspect(d.payload), *rules, policies, ctx());
  ASSERT_EQ(v.events.size(), 2u);
  EXPECT_EQ(v.events[0].offset, 0u);
}

TEST(ApplyPolicy, ScrubNeverLeavesSuppressedPatternProperty) {
  std::mt19937_64 rng(21);
  for (int iter = 0; iter < 500; ++iter) {
    std::vector<Pattern> pats;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) {
      std::string s(1 + rng() % 4, 'a');
      for (auto& c : s) c = static_cast<char>("aAb0"[rng() % 4]);
      pats.push_back({"p" + std::to_string(i), s, ""});
    }
    auto rules = Ruleset::compile(pats);
    PolicyTable policies;
    for (auto& p : pats) {
      if (rng() % 3 == 0) policies.set("app", p.id, Action::Allow);
    }
    std::string text(rng() % 200, 'a');
    for (auto& c : text) c = static_cast<char>("aAb0xy"[rng() % 6]);
    Datagram d = tcp_datagram(text);
    const auto len = d.payload.size();
    const Verdict v = apply_policy(d, rules->inspect(d.payload), *rules, policies, ctx("app"));
    if (v.kind == VerdictKind::Drop) continue;
    ASSERT_EQ(d.payload.size(), len);
    ASSERT_NO_THROW(parse_datagram(serialize_datagram(d)));
    for (const auto& p : pats) {
      if (policies.lookup("app", p.id) != Action::Allow) {
        ASSERT_FALSE(contains(d.payload, p.bytes)) << "pattern " << p.bytes << " survived in iteration " << iter;
      }
    }
  }
}

TEST(DpiStore, PersistsPatternsAndDecisions) {
  const auto path = temp_path("store.jsonl");
  {
    DpiStore store(path);
    store.add_pattern({"imei", "356938035643809", "IMEI"});
    store.add_pattern({"mail", "bob@example.org", "Email"});
    EXPECT_THROW(store.add_pattern({"imei", "x", ""}), Error);
    store.set_policy("com.example", "imei", Action::Block);
  }
  DpiStore reloaded(path);
  EXPECT_EQ(reloaded.patterns().size(), 2u);
  EXPECT_EQ(reloaded.policies()->lookup("com.example", "imei"), Action::Block);
  EXPECT_EQ(reloaded.policies()->lookup("com.example", "mail"), Action::Ask);
  EXPECT_TRUE(reloaded.remove_pattern("imei"));
  EXPECT_FALSE(reloaded.remove_pattern("imei"));
  EXPECT_EQ(reloaded.ruleset()->patterns().size(), 1u);
}

TEST(DpiStore, SnapshotsAreImmutable) {
  DpiStore store;
  store.add_pattern({"a", "alpha", ""});
  auto old_rules = store.ruleset();
  auto old_policies = store.policies();
  store.set_policy("x", "a", Action::Allow);
  store.add_pattern({"b", "beta", ""});
  EXPECT_EQ(old_rules->patterns().size(), 1u);
  EXPECT_EQ(old_policies->lookup("x", "a"), Action::Ask);
  EXPECT_EQ(store.policies()->lookup("x", "a"), Action::Allow);
}

TEST(LeakHistory, AppendsAndReloads) {
  const auto path = temp_path("leaks.jsonl");
  std::vector<std::uint64_t> pushed;
  {
    LeakHistory h(path);
    h.subscribe([&](const LeakEvent& e) { pushed.push_back(e.seq); });
    for (int i = 0; i < 3; ++i) {
      LeakEvent e;
      e.timestamp_us = 1000 * (i + 1);
      e.app_id = "app";
      e.flow.src = {Ipv4Addr::from_octets(10, 0, 0, 1), 5000};
      e.flow.dst = {Ipv4Addr::from_octets(1, 2, 3, 4), 80};
      e.pattern_id = "imei";
      e.action = Action::Block;
      h.record(e);
    }
    EXPECT_EQ(h.since(2000).size(), 2u);
  }
  EXPECT_EQ(pushed, (std::vector<std::uint64_t>{1, 2, 3}));
  const auto back = LeakHistory::read_file(path);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[2].action, Action::Block);
  EXPECT_EQ(back[0].flow.dst.port, 80);
  LeakHistory again(path);
  LeakEvent e;
  again.record(e);
  EXPECT_EQ(again.since(0).back().seq, 4u);
}
