#include "antproxy/forwarder.h"

#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "antproxy/app_stack.h"
#include "antproxy/error.h"

using namespace antproxy;
using namespace antproxy::fwd;
using namespace antproxy::net;
using namespace std::chrono_literals;

namespace {

Endpoint ep(int a, int b, int c, int d, std::uint16_t port) { return {Ipv4Addr::from_octets(a, b, c, d), port}; }

const Endpoint kApp = ep(10, 1, 0, 2, 33000);
const Endpoint kDns = ep(10, 0, 0, 3, 53);
const Endpoint kEcho = ep(10, 0, 0, 7, 7);

std::size_t open_fds() {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator("/proc/self/fd")) ++n;
  return n;
}

template <typename Pred>
bool eventually(Pred p, std::chrono::milliseconds limit = 3s) {
  const auto deadline = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < deadline) {
    if (p()) return true;
    std::this_thread::sleep_for(1ms);
  }
  return p();
}

Bytes pattern_bytes(std::size_t n, std::uint64_t seed) {
  Bytes b(n);
  fill_content(seed, 0, b);
  return b;
}

std::string sha(ByteView b) {
  Sha256 h;
  h.update(b);
  return h.hex_digest();
}

ByteView text(const std::string& s) { return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}; }

// Speaks raw segments on the app side of the TUN.
struct RawApp {
  SimTun& tun;

  void send(std::uint8_t flags, std::uint32_t seq, std::uint32_t ack, ByteView payload = {},
            std::optional<std::uint16_t> mss = std::nullopt, Endpoint dst = kEcho, std::uint16_t window = 65535) {
    TcpSegmentSpec s;
    s.src = kApp;
    s.dst = dst;
    s.seq = seq;
    s.ack = ack;
    s.flags = flags;
    s.window = window;
    s.mss = mss;
    tun.inject(build_tcp_datagram(s, payload));
  }

  std::optional<Datagram> next(std::chrono::milliseconds wait = 2s) {
    auto raw = tun.receive(std::chrono::steady_clock::now() + wait);
    if (!raw) return std::nullopt;
    return parse_datagram(*raw);
  }
};

struct Rig {
  SimTun tun;
  SimNet net;
  std::atomic<std::int64_t> clock{1'000'000'000};
  EngineOptions opts;
  std::unique_ptr<Engine> engine;

  explicit Rig(bool manual_clock = false, Hooks hooks = {}, EngineOptions o = {}) : opts(std::move(o)) {
    if (manual_clock) opts.clock = [this] { return clock.load(); };
    net.register_endpoint(IpProto::UDP, kDns, EndpointScript::echo());
    net.register_endpoint(IpProto::TCP, kEcho, EndpointScript::echo());
    engine = std::make_unique<Engine>(tun, net, opts, hooks);
    engine->start();
  }
};

}  // namespace

TEST(ForwarderUdp, EchoSwapsTuplesBack) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  auto sock = app.open_udp("dns");
  sock->send_to(kDns, text("query"));
  auto got = sock->recv(2s);
  ASSERT_TRUE(got);
  EXPECT_EQ(got->first, kDns);
  EXPECT_EQ(std::string(got->second.begin(), got->second.end()), "query");
  const auto c = rig.engine->counters();
  EXPECT_EQ(c.udp_sockets, 1u);
  EXPECT_EQ(c.bytes_up, 5u);
  EXPECT_EQ(c.bytes_down, 5u);
}

TEST(ForwarderUdp, ReplyDatagramAddressedToAppTuple) {
  Rig rig;
  rig.tun.inject(build_udp_datagram(kApp, kDns, 9, text("abc")));
  auto raw = rig.tun.receive(std::chrono::steady_clock::now() + 2s);
  ASSERT_TRUE(raw);
  const Datagram d = parse_datagram(*raw);  // checksums verified by the parser
  EXPECT_FALSE(d.is_tcp());
  EXPECT_EQ(d.source(), kDns);
  EXPECT_EQ(d.destination(), kApp);
  EXPECT_EQ(d.ip.ttl, 64);
  EXPECT_TRUE(d.ip.flags_fragment & kIpFlagDF);
}

TEST(ForwarderUdp, TwoSocketsSameServerDemultiplexed) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  auto a = app.open_udp("a");
  auto b = app.open_udp("b");
  for (int round = 0; round < 20; ++round) {
    a->send_to(kDns, text("from-a-" + std::to_string(round)));
    b->send_to(kDns, text("from-b-" + std::to_string(round)));
  }
  for (int round = 0; round < 20; ++round) {
    auto ra = a->recv(2s);
    auto rb = b->recv(2s);
    ASSERT_TRUE(ra && rb);
    EXPECT_EQ(std::string(ra->second.begin(), ra->second.end()), "from-a-" + std::to_string(round));
    EXPECT_EQ(std::string(rb->second.begin(), rb->second.end()), "from-b-" + std::to_string(round));
  }
  EXPECT_EQ(rig.engine->counters().flows_active, 2u);
  EXPECT_EQ(rig.engine->counters().udp_sockets, 1u);
}

TEST(ForwarderUdp, ZeroLengthPayload) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  auto s = app.open_udp("z");
  s->send_to(kDns, {});
  auto got = s->recv(2s);
  ASSERT_TRUE(got);
  EXPECT_TRUE(got->second.empty());
}

TEST(ForwarderUdp, UnsolicitedDatagramDropped) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  auto s = app.open_udp("dns");
  s->send_to(kDns, text("q"));
  ASSERT_TRUE(s->recv(2s));
  const auto written = rig.tun.written();
  rig.net.inject_udp(ep(10, 9, 9, 9, 999), text("surprise"));
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().drops.nomapping == 1; }));
  std::this_thread::sleep_for(20ms);
  EXPECT_EQ(rig.tun.written(), written);
}

TEST(ForwarderUdp, IdleEvictionThenLateReplyIsNoMapping) {
  EngineOptions o;
  o.sweep_interval = 1h;  // sweeps only when asked
  Rig rig(true, {}, o);
  AppStack app(rig.tun, nullptr);
  auto s = app.open_udp("dns");
  s->send_to(kDns, text("q"));
  ASSERT_TRUE(s->recv(2s));
  EXPECT_EQ(rig.engine->sweep(), 0u);

  rig.clock += 59'000'000;
  EXPECT_EQ(rig.engine->sweep(), 0u);
  rig.clock += 1'000'000;
  EXPECT_EQ(rig.engine->sweep(), 1u);
  EXPECT_EQ(rig.engine->counters().flows_active, 0u);

  rig.net.inject_udp(kDns, text("late"));
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().drops.nomapping == 1; }));

  // socket lingers, then closes
  EXPECT_EQ(rig.engine->counters().udp_sockets, 1u);
  rig.clock += 5'000'000;
  rig.engine->sweep();
  EXPECT_EQ(rig.engine->counters().udp_sockets, 0u);
  EXPECT_EQ(rig.engine->counters().fd_in_use, 0u);
}

TEST(ForwarderUdp, MapFullEvictsOldest) {
  EngineOptions o;
  o.udp_map_limit = 3;
  Rig rig(true, {}, o);
  for (std::uint16_t p = 1; p <= 4; ++p) {
    rig.clock += 1000;
    rig.tun.inject(build_udp_datagram({kApp.ip, static_cast<std::uint16_t>(50000 + p)}, kDns, p, text("x")));
    ASSERT_TRUE(rig.tun.receive(std::chrono::steady_clock::now() + 2s));
  }
  const auto flows = rig.engine->flows();
  std::set<std::uint16_t> active;
  for (const auto& f : flows) {
    if (f.state == flow::FlowState::Active) active.insert(f.key.src.port);
  }
  EXPECT_EQ(active, (std::set<std::uint16_t>{50002, 50003, 50004}));
}

TEST(ForwarderTcp, SynAckCarriesMssForMtu) {
  Rig rig;
  RawApp raw{rig.tun};
  raw.send(tcp_flag::SYN, 1000, 0, {}, 1460);
  auto d = raw.next();
  ASSERT_TRUE(d);
  ASSERT_TRUE(d->is_tcp());
  const auto& t = d->tcp();
  EXPECT_EQ(t.flags, tcp_flag::SYN | tcp_flag::ACK);
  EXPECT_EQ(t.ack, 1001u);
  ASSERT_TRUE(t.mss());
  EXPECT_EQ(*t.mss(), 16344);
  EXPECT_EQ(d->source(), kEcho);
  EXPECT_EQ(d->destination(), kApp);
  const auto timings = rig.engine->handshake_timings();
  ASSERT_EQ(timings.size(), 1u);
  EXPECT_GE(telemetry::connect_latency_ms(timings[0]), 0.0);
}

TEST(ForwarderTcp, MssFollowsMtu) {
  SimTun tun(1500);
  SimNet net;
  net.register_endpoint(IpProto::TCP, kEcho, EndpointScript::echo());
  Engine engine(tun, net);
  engine.start();
  RawApp raw{tun};
  raw.send(tcp_flag::SYN, 5, 0, {}, 1460);
  auto d = raw.next();
  ASSERT_TRUE(d && d->tcp().mss());
  EXPECT_EQ(*d->tcp().mss(), 1460);
}

TEST(ForwarderTcp, RefusedConnectGetsRst) {
  Rig rig;
  RawApp raw{rig.tun};
  raw.send(tcp_flag::SYN, 77, 0, {}, 1460, ep(10, 0, 0, 99, 80));
  auto d = raw.next();
  ASSERT_TRUE(d && d->is_tcp());
  EXPECT_TRUE(d->tcp().flags & tcp_flag::RST);
  EXPECT_EQ(d->tcp().ack, 78u);
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().fd_in_use == 0; }));
  EXPECT_EQ(rig.engine->counters().connect_failures, 1u);
}

TEST(ForwarderTcp, StraySegmentsToUnknownConnection) {
  Rig rig;
  RawApp raw{rig.tun};
  raw.send(tcp_flag::ACK, 10, 20);  // pure ACK: ignored
  raw.send(tcp_flag::ACK | tcp_flag::PSH, 10, 20, text("data"));
  auto d = raw.next();
  ASSERT_TRUE(d && d->is_tcp());
  EXPECT_EQ(d->tcp().flags, tcp_flag::RST);
  EXPECT_EQ(d->tcp().seq, 20u);
  EXPECT_FALSE(raw.next(50ms));
}

namespace {

// Handshake with a Serve endpoint of `size` bytes, then collect data segments
// (without ACKing further) until FIN.
std::vector<Datagram> collect_download(std::uint64_t size) {
  SimTun tun;
  SimNet net;
  const Endpoint srv = ep(10, 0, 0, 8, 80);
  net.register_endpoint(IpProto::TCP, srv, EndpointScript::serve(size, 5));
  Engine engine(tun, net);
  engine.start();
  RawApp raw{tun};
  raw.send(tcp_flag::SYN, 100, 0, {}, 65495, srv);
  auto synack = raw.next();
  EXPECT_TRUE(synack);
  if (!synack) return {};
  std::this_thread::sleep_for(100ms);  // let the server's bytes reach the engine
  raw.send(tcp_flag::ACK, 101, synack->tcp().seq + 1, {}, std::nullopt, srv);
  std::vector<Datagram> out;
  while (auto d = raw.next(1s)) {
    out.push_back(*d);
    if (d->tcp().flags & tcp_flag::FIN) break;
  }
  return out;
}

}  // namespace

TEST(ForwarderTcp, FullMssSegmentFillsOneTunDatagram) {
  const auto segs = collect_download(16344);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].payload.size(), 16344u);
  EXPECT_EQ(segs[0].ip.total_length, 16384u);
  EXPECT_TRUE(segs[1].tcp().flags & tcp_flag::FIN);
  EXPECT_TRUE(segs[1].payload.empty());
}

TEST(ForwarderTcp, LargerWriteSplitsAtMss) {
  const auto segs = collect_download(20000);
  ASSERT_EQ(segs.size(), 3u);
  EXPECT_EQ(segs[0].payload.size(), 16344u);
  EXPECT_EQ(segs[1].payload.size(), 3656u);
  EXPECT_EQ(segs[1].tcp().seq, segs[0].tcp().seq + 16344);
  Bytes joined = segs[0].payload;
  joined.insert(joined.end(), segs[1].payload.begin(), segs[1].payload.end());
  Bytes expect(20000);
  fill_content(5, 0, expect);
  EXPECT_EQ(joined, expect);
}

TEST(ForwarderTcp, OutOfOrderSegmentReAcked) {
  Rig rig;
  RawApp raw{rig.tun};
  raw.send(tcp_flag::SYN, 1000, 0, {}, 1460);
  auto synack = raw.next();
  ASSERT_TRUE(synack);
  const std::uint32_t our = synack->tcp().seq + 1;
  raw.send(tcp_flag::ACK, 1001, our);
  raw.send(tcp_flag::ACK | tcp_flag::PSH, 1011, our, text("later"));  // gap of 10
  auto ack = raw.next();
  ASSERT_TRUE(ack);
  EXPECT_EQ(ack->tcp().ack, 1001u);
  EXPECT_TRUE(ack->payload.empty());
  raw.send(tcp_flag::ACK | tcp_flag::PSH, 1001, our, text("0123456789"));
  ack = raw.next();
  ASSERT_TRUE(ack);
  EXPECT_EQ(ack->tcp().ack, 1011u);
  auto echo = raw.next();
  ASSERT_TRUE(echo);
  EXPECT_EQ(std::string(echo->payload.begin(), echo->payload.end()), "0123456789");
}

TEST(ForwarderTcp, EchoRoundTripThroughAppStack) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  auto s = app.connect(kEcho, "echo");
  EXPECT_EQ(s->peer_mss(), 16344);
  const Bytes msg = pattern_bytes(100'000, 9);
  std::thread writer([&] { s->send_all(msg); });
  Bytes got;
  std::vector<std::uint8_t> buf(65536);
  while (got.size() < msg.size()) {
    const std::size_t n = s->recv(buf);
    ASSERT_GT(n, 0u);
    got.insert(got.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
  }
  writer.join();
  EXPECT_EQ(got, msg);
  s->close();
  EXPECT_TRUE(s->wait_closed(3s));
}

TEST(ForwarderTcp, DownloadAndUploadByteFidelity) {
  Rig rig;
  const Endpoint down = ep(10, 0, 0, 20, 80), up = ep(10, 0, 0, 21, 80);
  const std::uint64_t size = 4 << 20;
  rig.net.register_endpoint(IpProto::TCP, down, EndpointScript::serve(size, 77));
  rig.net.register_endpoint(IpProto::TCP, up, EndpointScript::sink());
  AppStack app(rig.tun, nullptr);

  auto d = app.connect(down, "dl");
  Sha256 h;
  std::uint64_t total = 0;
  std::vector<std::uint8_t> buf(65536);
  for (;;) {
    const std::size_t n = d->recv(buf);
    if (n == 0) break;
    h.update({buf.data(), n});
    total += n;
  }
  EXPECT_EQ(total, size);
  EXPECT_EQ(h.hex_digest(), sha(pattern_bytes(size, 77)));
  d->close();

  const Bytes payload = pattern_bytes(3 << 20, 78);
  auto u = app.connect(up, "ul");
  u->send_all(payload);
  u->close();
  ASSERT_TRUE(rig.net.ledger().wait_for(up, 1, 10s));
  EXPECT_EQ(rig.net.ledger().results(up)[0].bytes, payload.size());
  EXPECT_EQ(rig.net.ledger().results(up)[0].sha256, sha(payload));
  EXPECT_TRUE(u->wait_closed(3s));
  EXPECT_TRUE(d->wait_closed(3s));
}

TEST(ForwarderTcp, ServerCloseReachesClosedAndReclaims) {
  Rig rig;
  const Endpoint srv = ep(10, 0, 0, 22, 80);
  rig.net.register_endpoint(IpProto::TCP, srv, EndpointScript::serve(1000, 1));
  AppStack app(rig.tun, nullptr);
  auto s = app.connect(srv, "x");
  std::vector<std::uint8_t> buf(4096);
  std::size_t total = 0;
  while (std::size_t n = s->recv(buf)) total += n;
  EXPECT_EQ(total, 1000u);
  s->close();
  EXPECT_TRUE(s->wait_closed(3s));
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().tcp_sockets == 0; }));
  EXPECT_EQ(rig.engine->counters().flows_active, 0u);
  EXPECT_EQ(rig.engine->reclaim_sockets(), 0u);
  bool saw_closed = false;
  for (const auto& f : rig.engine->flows()) saw_closed |= f.key.dst == srv && f.state == flow::FlowState::Closed;
  EXPECT_TRUE(saw_closed);
}

TEST(ForwarderTcp, AppResetMidTransferClosesSocketPromptly) {
  Rig rig;
  const Endpoint srv = ep(10, 0, 0, 23, 80);
  rig.net.register_endpoint(IpProto::TCP, srv, EndpointScript::serve(200 << 20, 2));
  AppStack app(rig.tun, nullptr);
  auto s = app.connect(srv, "x");
  std::vector<std::uint8_t> buf(65536);
  ASSERT_GT(s->recv(buf), 0u);
  EXPECT_EQ(rig.engine->counters().tcp_sockets, 1u);
  s->abort();
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().tcp_sockets == 0; }, 200ms));
  EXPECT_EQ(rig.engine->counters().fd_in_use, 0u);
  ASSERT_TRUE(eventually([&] { return rig.net.live_stream_workers() == 0; }));
}

TEST(ForwarderTcp, HalfOpenTimesOutWithRst) {
  EngineOptions o;
  o.sweep_interval = 1h;
  Rig rig(true, {}, o);
  RawApp raw{rig.tun};
  raw.send(tcp_flag::SYN, 1, 0, {}, 1460);
  ASSERT_TRUE(raw.next());  // SYN-ACK, never acknowledged
  rig.clock += 31'000'000;
  EXPECT_EQ(rig.engine->sweep(), 1u);
  auto rst = raw.next();
  ASSERT_TRUE(rst);
  EXPECT_TRUE(rst->tcp().flags & tcp_flag::RST);
  EXPECT_EQ(rig.engine->counters().tcp_sockets, 0u);
}

TEST(ForwarderTcp, SequentialChurnStaysUnderFdLimit) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  std::vector<std::uint8_t> buf(64);
  for (int i = 0; i < 500; ++i) {
    auto s = app.connect(kEcho, "churn");
    s->send_all(text("ping"));
    ASSERT_EQ(s->recv(buf), 4u);
    s->close();
    ASSERT_TRUE(s->wait_closed(3s)) << i;
  }
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().tcp_sockets == 0; }));
  const auto c = rig.engine->counters();
  EXPECT_LT(c.fd_peak, 1024u);
  EXPECT_EQ(c.flows_total, 500u);
}

TEST(ForwarderTcp, ManyConcurrentFlowsTwoWorkers) {
  Rig rig;
  AppStack app(rig.tun, nullptr);
  std::vector<std::shared_ptr<AppStack::TcpSocket>> socks;
  for (int i = 0; i < 200; ++i) socks.push_back(app.connect(kEcho, "many"));
  EXPECT_EQ(Engine::forwarding_threads(), 2u);
  EXPECT_EQ(rig.engine->counters().tcp_sockets, 200u);
  for (std::size_t i = 0; i < socks.size(); ++i) socks[i]->send_all(text("flow-" + std::to_string(i)));
  std::vector<std::uint8_t> buf(64);
  for (std::size_t i = 0; i < socks.size(); ++i) {
    const std::string want = "flow-" + std::to_string(i);
    std::string got;
    while (got.size() < want.size()) {
      const std::size_t n = socks[i]->recv(buf);
      ASSERT_GT(n, 0u);
      got.append(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
    }
    EXPECT_EQ(got, want);
  }
  EXPECT_EQ(Engine::forwarding_threads(), 2u);
  for (auto& s : socks) s->close();
  for (auto& s : socks) EXPECT_TRUE(s->wait_closed(3s));
}

TEST(ForwarderTcp, AttributionRecordedInFlows) {
  auto oracle = std::make_shared<flow::OracleRegistry>();
  flow::AppMap map(flow::AppSourceKind::Oracle, flow::oracle_source(oracle));
  Hooks hooks;
  hooks.app_map = &map;
  Rig rig(false, hooks);
  AppStack app(rig.tun, oracle);
  auto s = app.connect(kEcho, "com.example.mail");
  std::vector<flow::FlowRecord> flows;
  ASSERT_TRUE(eventually([&] {
    flows = rig.engine->flows();
    return flows.size() == 1 && flows[0].state == flow::FlowState::Established;
  }));
  EXPECT_EQ(flows[0].app_id, "com.example.mail");
  EXPECT_EQ(flows[0].state, flow::FlowState::Established);
  s->close();
  EXPECT_TRUE(s->wait_closed(3s));
}

TEST(ForwarderDpi, ScrubAndBlockOnTheWire) {
  dpi::DpiStore store;
  store.add_pattern({"imei", "356938035643809", "IMEI"});
  store.add_pattern({"tok", "TOKEN-XYZ", "token"});
  store.set_policy("leaky", "tok", dpi::Action::Block);
  dpi::LeakHistory leaks;
  auto oracle = std::make_shared<flow::OracleRegistry>();
  flow::AppMap map(flow::AppSourceKind::Oracle, flow::oracle_source(oracle));
  Hooks hooks;
  hooks.app_map = &map;
  hooks.dpi = &store;
  hooks.leaks = &leaks;
  EngineOptions o;
  o.dpi_enabled = true;
  o.scrub_seed = 4;
  Rig rig(false, hooks, o);
  const Endpoint sink = ep(10, 0, 0, 30, 443);
  rig.net.register_endpoint(IpProto::TCP, sink, EndpointScript::sink());
  AppStack app(rig.tun, oracle);
  auto s = app.connect(sink, "leaky");
  const std::string first = "id=356938035643809&x=1";
  const std::string second = "auth TOKEN-XYZ";
  const std::string third = "plain";
  s->send_all(text(first));
  ASSERT_TRUE(eventually([&] { return leaks.size() == 1; }));
  s->send_all(text(second));
  ASSERT_TRUE(eventually([&] { return leaks.size() == 2; }));
  s->send_all(text(third));
  s->close();
  ASSERT_TRUE(rig.net.ledger().wait_for(sink, 1, 5s));
  const auto r = rig.net.ledger().results(sink)[0];
  // scrubbed bytes keep their length; blocked bytes never leave
  EXPECT_EQ(r.bytes, first.size() + third.size());
  EXPECT_NE(r.sha256, sha(text(first + third)));
  const auto events = leaks.since(0);
  ASSERT_EQ(events.size(), 2u);
  EXPECT_EQ(events[0].pattern_id, "imei");
  EXPECT_EQ(events[0].app_id, "leaky");
  EXPECT_TRUE(events[0].needs_decision);
  EXPECT_EQ(events[1].action, dpi::Action::Block);
  EXPECT_EQ(rig.engine->counters().drops.blocked, 1u);
  EXPECT_TRUE(s->wait_closed(3s));
}

TEST(ForwarderEngine, IcmpCountedNeverForwarded) {
  Rig rig;
  Bytes icmp(28, 0);
  icmp[0] = 0x45;
  icmp[3] = 28;
  icmp[8] = 64;
  icmp[9] = 1;
  icmp[20] = 8;  // echo request
  rig.tun.inject(icmp);
  Bytes gre = icmp;
  gre[9] = 47;
  rig.tun.inject(gre);
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().drops.protocol == 1; }));
  EXPECT_EQ(rig.engine->counters().drops.icmp, 1u);
  EXPECT_EQ(rig.tun.written(), 0u);
  EXPECT_EQ(rig.net.udp_received() + rig.net.tcp_accepted(), 0u);
}

TEST(ForwarderEngine, MalformedCounted) {
  Rig rig;
  Bytes d = build_udp_datagram(kApp, kDns, 1, text("x"));
  d[10] ^= 0xff;  // IP checksum
  rig.tun.inject(d);
  ASSERT_TRUE(eventually([&] { return rig.engine->counters().drops.malformed == 1; }));
}

TEST(ForwarderEngine, StartStopReturnsToFdBaseline) {
  const std::size_t before = open_fds();
  {
    SimTun tun;
    SimNet net;
    Engine e(tun, net);
    e.start();
    EXPECT_EQ(Engine::forwarding_threads(), 2u);
    e.stop();
    EXPECT_FALSE(e.running());
    EXPECT_EQ(Engine::forwarding_threads(), 0u);
  }
  EXPECT_EQ(open_fds(), before);
}

TEST(ForwarderEngine, StopWithLiveFlowsClosesEverything) {
  const std::size_t before = open_fds();
  {
    Rig rig;
    AppStack app(rig.tun, nullptr);
    auto s = app.connect(kEcho, "x");
    auto u = app.open_udp("y");
    u->send_to(kDns, text("q"));
    ASSERT_TRUE(u->recv(2s));
    EXPECT_EQ(rig.engine->counters().fd_in_use, 2u);
    rig.engine->stop();
    EXPECT_EQ(rig.engine->counters().fd_in_use, 0u);
    EXPECT_TRUE(s->wait_closed(2s));
    EXPECT_TRUE(s->reset());
  }
  EXPECT_EQ(open_fds(), before);
}

TEST(ForwarderEngine, RestartAfterStop) {
  Rig rig;
  rig.engine->stop();
  rig.engine->start();
  AppStack app(rig.tun, nullptr);
  auto u = app.open_udp("y");
  u->send_to(kDns, text("again"));
  EXPECT_TRUE(u->recv(2s));
}

TEST(ForwarderEngine, ClosedTunRefusesToStart) {
  SimTun tun;
  SimNet net;
  tun.close();
  Engine e(tun, net);
  try {
    e.start();
    FAIL() << "expected TunUnavailable";
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), Errc::TunUnavailable);
  }
  EXPECT_EQ(Engine::forwarding_threads(), 0u);
}

TEST(ForwarderEngine, StateNames) {
  EXPECT_EQ(tcp_state_name(TcpState::SynReceived), "SYN_RECEIVED");
  EXPECT_EQ(tcp_state_name(TcpState::LastAck), "LAST_ACK");
}
