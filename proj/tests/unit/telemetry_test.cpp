#include "antproxy/telemetry.h"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <json.hpp>
#include <random>
#include <set>

#include "antproxy/error.h"
#include "support/telemetry_oracle.h"

using namespace antproxy;
using namespace antproxy::telemetry;
using namespace antproxy::testing;

TEST(Windowed, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int round = 0; round < 200; ++round) {
    const auto trace = random_trace(rng, 1 + rng() % 300);
    for (double w : {0.05, 1.0, 5.0}) {
      for (Direction d : {Direction::Up, Direction::Down}) {
        EXPECT_NEAR(max_windowed_throughput(trace, w, d), brute_windowed(trace, w, d), 1e-9);
      }
    }
  }
}

TEST(Windowed, ShortWindowNeverBelowLong) {
  std::mt19937_64 rng(6);
  for (int round = 0; round < 100; ++round) {
    const auto trace = random_trace(rng, 2 + rng() % 500);
    EXPECT_GE(max_windowed_throughput(trace, 1.0, Direction::Down) + 1e-12,
              max_windowed_throughput(trace, 5.0, Direction::Down));
  }
}

TEST(Windowed, ConstantRate) {
  TrafficTrace t;
  // 1 MB/s for 10 s, timestamps exact in binary
  for (int i = 0; i < 80; ++i) t.push_back({i * 0.125, Direction::Down, 125000, {}});
  EXPECT_NEAR(max_windowed_throughput(t, 1.0, Direction::Down), 8.0, 1e-9);
  EXPECT_NEAR(max_windowed_throughput(t, 5.0, Direction::Down), 8.0, 1e-9);
  EXPECT_EQ(max_windowed_throughput(t, 1.0, Direction::Up), 0.0);
  EXPECT_THROW(max_windowed_throughput(t, 0.0, Direction::Up), Error);
}

TEST(ConnectLatency, RequiresHandshake) {
  EXPECT_DOUBLE_EQ(connect_latency_ms({1000, 26000}), 25.0);
  try {
    connect_latency_ms({1000, std::nullopt});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotConnected);
  }
}

TEST(Features, NamesAreUniqueAndCounted) {
  const auto& n = FeatureVector::names();
  EXPECT_EQ(n.size(), 66u);
  std::set<std::string> uniq(n.begin(), n.end());
  EXPECT_EQ(uniq.size(), 66u);
  EXPECT_THROW(FeatureVector::index_of("nope"), Error);
}

TEST(Features, EmptyFlowRejected) {
  try {
    extract_features({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyFlow);
  }
}

TEST(Features, MatchBruteForce) {
  std::mt19937_64 rng(9);
  for (int round = 0; round < 300; ++round) {
    const auto flow = random_flow(rng, 1 + rng() % 60);
    const auto fv = extract_features(flow);
    const auto expected = brute_features(flow, kDefaultBurstGap);
    ASSERT_EQ(expected.size(), kFeatureCount);
    for (const auto& [name, value] : expected) {
      EXPECT_NEAR(fv[name], value, 1e-9 * std::max(1.0, std::abs(value))) << name;
    }
  }
}

TEST(Features, SingleDirectionAndSinglePacket) {
  PacketRecord p;
  p.timestamp = 3;
  p.packet_bytes = 60;
  p.payload_bytes = 20;
  const auto fv = extract_features(std::vector{p});
  EXPECT_EQ(fv["up_pkt_count"], 1);
  EXPECT_EQ(fv["up_iat_mean"], 0);
  EXPECT_EQ(fv["down_pkt_count"], 0);
  EXPECT_EQ(fv["down_pkt_size_max"], 0);
  EXPECT_EQ(fv["up_pkts_per_second"], 0);
  EXPECT_EQ(fv["up_down_byte_ratio"], 60);
}

TEST(Features, FromSerializedDatagram) {
  TcpSegmentSpec s;
  s.src = {Ipv4Addr::from_octets(10, 0, 0, 1), 1};
  s.dst = {Ipv4Addr::from_octets(10, 0, 0, 2), 2};
  s.flags = tcp_flag::SYN | tcp_flag::ACK;
  s.window = 777;
  s.ttl = 61;
  const Bytes pkt = build_tcp_datagram(s, Bytes(10, 1));
  const auto r = packet_record(pkt, 1.5, Direction::Down);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->packet_bytes, 50u);
  EXPECT_EQ(r->payload_bytes, 10u);
  EXPECT_EQ(r->window, 777);
  EXPECT_EQ(r->ttl, 61);
  EXPECT_EQ(r->tcp_flags, tcp_flag::SYN | tcp_flag::ACK);
  EXPECT_FALSE(packet_record(Bytes(5), 0, Direction::Up));
}

TEST(FeaturesCsv, RoundTrip) {
  std::mt19937_64 rng(10);
  std::vector<LabeledFlow> flows;
  for (int i = 0; i < 50; ++i) {
    flows.push_back({extract_features(random_flow(rng, 1 + rng() % 30)), i % 7 ? "com.app" + std::to_string(i) : "a,\"b\""});
  }
  const std::string csv = export_features_csv(flows);
  const auto back = parse_features_csv(csv);
  ASSERT_EQ(back.size(), flows.size());
  for (std::size_t i = 0; i < flows.size(); ++i) {
    EXPECT_EQ(back[i].app_id, flows[i].app_id);
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      const double a = flows[i].features.values[k], b = back[i].features.values[k];
      EXPECT_NEAR(a, b, 1e-8 * std::max(1.0, std::abs(a)));
    }
  }
  EXPECT_THROW(parse_features_csv("a,b\n1,2\n"), Error);
}

TEST(Collector, GroupsByFlowAndLabels) {
  FlowFeatureCollector c;
  FlowKey k1{IpProto::UDP, {Ipv4Addr::from_octets(10, 0, 0, 1), 1000}, {Ipv4Addr::from_octets(8, 8, 8, 8), 53}};
  FlowKey k2 = k1;
  k2.src.port = 1001;
  for (int i = 0; i < 10; ++i) {
    capture::TapRecord r;
    r.timestamp_us = i * 1000;
    r.flow = i % 2 ? k1 : k2;
    r.direction = i % 3 ? Direction::Up : Direction::Down;
    r.app_id = i % 2 ? "com.one" : "";
    r.datagram = build_udp_datagram(k1.src, k1.dst, 1, Bytes(i + 1, 0));
    c.add(r);
  }
  const auto flows = c.flows();
  ASSERT_EQ(flows.size(), 2u);
  EXPECT_EQ(c.flow_count(), 2u);
  EXPECT_EQ(flows[0].app_id, "unknown");
  EXPECT_EQ(flows[1].app_id, "com.one");
  EXPECT_EQ(flows[0].features["total_pkts"] + flows[1].features["total_pkts"], 10);
}

TEST(Monitor, StatsJsonShape) {
  ThroughputMonitor m;
  for (int i = 0; i < 1000; ++i) m.add(i * 0.001, Direction::Down, 1000, i % 2 ? "a" : "b");
  const auto j = nlohmann::json::parse(m.stats_json());
  EXPECT_EQ(j["network"], "SIM");
  ASSERT_EQ(j["windows"].size(), 2u);
  EXPECT_EQ(j["windows"][0]["window"], 1.0);
  EXPECT_NEAR(j["windows"][0]["mbps_down"].get<double>(), 8.0, 1e-9);
  EXPECT_NEAR(j["windows"][0]["per_app"]["a"]["mbps_down"].get<double>(), 4.0, 1e-9);
  EXPECT_EQ(j["windows"][0]["mbps_up"], 0.0);
  m.add(100.0, Direction::Up, 10, "a");
  EXPECT_EQ(m.trace().size(), 1u);
}
