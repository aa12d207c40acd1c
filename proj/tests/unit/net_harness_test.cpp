#include <gtest/gtest.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <set>
#include <thread>

#include "antproxy/capture_log.h"
#include "antproxy/error.h"
#include "antproxy/external_net.h"
#include "antproxy/reactor.h"
#include "antproxy/tun.h"

using namespace antproxy;
using namespace antproxy::net;
using namespace std::chrono_literals;

namespace {

Endpoint ep(int a, int b, int c, int d, std::uint16_t port) { return {Ipv4Addr::from_octets(a, b, c, d), port}; }

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::InvalidArgument;
}

Bytes udp_bytes(std::size_t payload, std::uint16_t id = 1) {
  return build_udp_datagram(ep(10, 1, 0, 2, 5000), ep(10, 0, 0, 3, 53), id, Bytes(payload, 0x5a));
}

// Runs a reactor on its own thread for the lifetime of the object.
struct LoopThread {
  Reactor reactor;
  std::thread thread{[this] { reactor.run(); }};
  ~LoopThread() {
    reactor.stop();
    thread.join();
  }
  template <typename F>
  auto sync(F fn) {
    std::packaged_task<decltype(fn())()> task(std::move(fn));
    auto fut = task.get_future();
    reactor.post([&] { task(); });
    return fut.get();
  }
};

// Blocking full read from a non-blocking fd.
Bytes read_exact(int fd, std::size_t n) {
  Bytes out;
  std::uint8_t buf[4096];
  const auto deadline = std::chrono::steady_clock::now() + 5s;
  while (out.size() < n && std::chrono::steady_clock::now() < deadline) {
    const ssize_t r = ::recv(fd, buf, std::min(sizeof buf, n - out.size()), MSG_DONTWAIT);
    if (r > 0) {
      out.insert(out.end(), buf, buf + r);
    } else if (r == 0) {
      break;
    } else {
      std::this_thread::sleep_for(1ms);
    }
  }
  return out;
}

}  // namespace

TEST(SimTun, MtuBounds) {
  EXPECT_EQ(code_of([] { SimTun t(575); }), Errc::MtuTooSmall);
  SimTun small(576);
  EXPECT_EQ(small.mtu(), 576u);
  SimTun big;
  EXPECT_EQ(big.mtu(), 16384u);
}

TEST(SimTun, WholeDatagramsAtBothMtus) {
  for (std::size_t mtu : {576u, 16384u}) {
    SimTun tun(mtu);
    const Bytes d = udp_bytes(mtu - 28);
    ASSERT_EQ(d.size(), mtu);
    tun.inject(d);
    std::vector<std::uint8_t> buf(mtu);
    ASSERT_EQ(tun.read(buf), mtu);
    EXPECT_TRUE(std::equal(d.begin(), d.end(), buf.begin()));

    tun.write(d);
    auto got = tun.receive(std::chrono::steady_clock::now() + 1s);
    ASSERT_TRUE(got);
    EXPECT_EQ(*got, d);
    EXPECT_EQ(code_of([&] { tun.write(Bytes(mtu + 1, 0)); }), Errc::OversizeDatagram);
  }
}

TEST(SimTun, BareAckDelivered) {
  SimTun tun;
  TcpSegmentSpec s;
  s.src = ep(10, 1, 0, 2, 40000);
  s.dst = ep(10, 0, 0, 3, 80);
  s.flags = tcp_flag::ACK;
  const Bytes ack = build_tcp_datagram(s, {});
  ASSERT_EQ(ack.size(), 40u);
  tun.inject(ack);
  std::vector<std::uint8_t> buf(tun.mtu());
  EXPECT_EQ(tun.read(buf), 40u);
}

TEST(SimTun, InterruptAndClose) {
  SimTun tun;
  std::vector<std::uint8_t> buf(tun.mtu());
  auto f = std::async(std::launch::async, [&] { return tun.read(buf); });
  std::this_thread::sleep_for(20ms);
  tun.interrupt();
  EXPECT_EQ(f.get(), 0u);
  EXPECT_FALSE(tun.receive(std::chrono::steady_clock::now() + 10ms));
  EXPECT_FALSE(tun.closed());
  tun.close();
  EXPECT_TRUE(tun.closed());
  EXPECT_EQ(code_of([&] { tun.read(buf); }), Errc::PortClosed);
  EXPECT_EQ(code_of([&] { tun.write(udp_bytes(10)); }), Errc::PortClosed);
}

TEST(SimTun, InjectBlocksWhenFull) {
  SimTun tun(kDefaultMtu, 2);
  tun.inject(udp_bytes(1));
  tun.inject(udp_bytes(2));
  auto f = std::async(std::launch::async, [&] { tun.inject(udp_bytes(3)); });
  EXPECT_EQ(f.wait_for(50ms), std::future_status::timeout);
  std::vector<std::uint8_t> buf(tun.mtu());
  tun.read(buf);
  EXPECT_EQ(f.wait_for(1s), std::future_status::ready);
  EXPECT_EQ(tun.injected(), 3u);
}

TEST(Reactor, TimersFireInOrderAndCancel) {
  Reactor r;
  std::vector<int> order;
  r.call_after(30ms, [&] { order.push_back(3); });
  r.call_after(10ms, [&] { order.push_back(1); });
  const auto id = r.call_after(20ms, [&] { order.push_back(2); });
  r.cancel(id);
  r.call_after(40ms, [&] { r.stop(); });
  r.run();
  EXPECT_EQ(order, (std::vector<int>{1, 3}));
}

TEST(Reactor, PostFromOtherThreadAndRemoveDuringDispatch) {
  LoopThread loop;
  int sv[2];
  ASSERT_EQ(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv), 0);
  std::atomic<int> calls{0};
  loop.sync([&] {
    loop.reactor.add(sv[0], EPOLLIN, [&](std::uint32_t) {
      ++calls;
      loop.reactor.remove(sv[0]);
    });
    return 0;
  });
  ASSERT_EQ(::write(sv[1], "xy", 2), 2);
  std::this_thread::sleep_for(50ms);
  EXPECT_EQ(calls.load(), 1);
  EXPECT_EQ(loop.sync([&] { return loop.reactor.watching(sv[0]); }), false);
  ::close(sv[0]);
  ::close(sv[1]);
}

TEST(SimNet, DuplicateEndpointRejected) {
  SimNet net;
  net.register_endpoint(IpProto::TCP, ep(10, 0, 0, 3, 80), EndpointScript::echo());
  EXPECT_EQ(code_of([&] { net.register_endpoint(IpProto::TCP, ep(10, 0, 0, 3, 80), EndpointScript::sink()); }),
            Errc::DuplicateEndpoint);
  // same address, other protocol is a different endpoint
  net.register_endpoint(IpProto::UDP, ep(10, 0, 0, 3, 80), EndpointScript::echo());
  EXPECT_TRUE(net.has_endpoint(IpProto::UDP, ep(10, 0, 0, 3, 80)));
}

TEST(SimNet, TcpEchoAndRefusal) {
  SimNet net;
  net.register_endpoint(IpProto::TCP, ep(10, 0, 0, 3, 7), EndpointScript::echo());
  LoopThread loop;
  std::promise<bool> ok_p, refused_p;
  const int fd = loop.sync([&] { return net.connect_tcp(ep(10, 0, 0, 3, 7), loop.reactor, [&](bool ok) { ok_p.set_value(ok); }); });
  const int fd2 = loop.sync([&] { return net.connect_tcp(ep(10, 0, 0, 3, 8), loop.reactor, [&](bool ok) { refused_p.set_value(ok); }); });
  EXPECT_TRUE(ok_p.get_future().get());
  EXPECT_FALSE(refused_p.get_future().get());
  const std::string msg = "hello through the simulated internet";
  ASSERT_EQ(::send(fd, msg.data(), msg.size(), 0), static_cast<ssize_t>(msg.size()));
  const Bytes back = read_exact(fd, msg.size());
  EXPECT_EQ(std::string(back.begin(), back.end()), msg);
  ::close(fd);
  ::close(fd2);
  EXPECT_EQ(net.tcp_accepted(), 1u);
  EXPECT_EQ(net.tcp_refused(), 1u);
}

TEST(SimNet, ServeContentMatchesHash) {
  SimNet net;
  const std::uint64_t size = 300'000;
  net.register_endpoint(IpProto::TCP, ep(10, 0, 0, 4, 80), EndpointScript::serve(size, 42));
  LoopThread loop;
  std::promise<bool> p;
  const int fd = loop.sync([&] { return net.connect_tcp(ep(10, 0, 0, 4, 80), loop.reactor, [&](bool ok) { p.set_value(ok); }); });
  ASSERT_TRUE(p.get_future().get());
  const Bytes got = read_exact(fd, size + 1);
  ASSERT_EQ(got.size(), size);
  Sha256 h;
  h.update(got);
  EXPECT_EQ(h.hex_digest(), content_sha256(42, size));
  ::close(fd);
}

TEST(SimNet, ContentIsDeterministicAndOffsetConsistent) {
  Bytes whole(10000), a(3000), b(7000);
  fill_content(7, 0, whole);
  fill_content(7, 0, a);
  fill_content(7, 3000, b);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), whole.begin()));
  EXPECT_TRUE(std::equal(b.begin(), b.end(), whole.begin() + 3000));
  Bytes other(10000);
  fill_content(8, 0, other);
  EXPECT_NE(whole, other);
  EXPECT_EQ(content_sha256(7, 10000), content_sha256(7, 10000));
}

TEST(SimNet, SinkRecordsHash) {
  SimNet net;
  const Endpoint at = ep(10, 0, 0, 5, 9000);
  net.register_endpoint(IpProto::TCP, at, EndpointScript::sink());
  LoopThread loop;
  std::promise<bool> p;
  const int fd = loop.sync([&] { return net.connect_tcp(at, loop.reactor, [&](bool ok) { p.set_value(ok); }); });
  ASSERT_TRUE(p.get_future().get());
  Bytes data(50000);
  fill_content(3, 0, data);
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n > 0) off += static_cast<std::size_t>(n);
    else std::this_thread::sleep_for(1ms);
  }
  ::shutdown(fd, SHUT_WR);
  ASSERT_TRUE(net.ledger().wait_for(at, 1, 5s));
  EXPECT_EQ(net.ledger().results(at)[0].bytes, data.size());
  EXPECT_EQ(net.ledger().results(at)[0].sha256, content_sha256(3, data.size()));
  ::close(fd);
}

TEST(SimNet, UdpEchoCarriesSourceAddress) {
  SimNet net;
  const Endpoint dns = ep(10, 0, 0, 3, 53);
  net.register_endpoint(IpProto::UDP, dns, EndpointScript::echo());
  const int fd = net.open_udp();
  ASSERT_GE(fd, 0);
  const std::string q = "query";
  ASSERT_TRUE(net.udp_send(fd, dns, {reinterpret_cast<const std::uint8_t*>(q.data()), q.size()}));
  std::vector<std::uint8_t> buf(2048);
  std::optional<std::pair<Endpoint, std::size_t>> got;
  for (int i = 0; i < 500 && !got; ++i) {
    got = net.udp_recv(fd, buf);
    if (!got) std::this_thread::sleep_for(1ms);
  }
  ASSERT_TRUE(got);
  EXPECT_EQ(got->first, dns);
  EXPECT_EQ(std::string(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(got->second)), q);
  ::close(fd);
}

TEST(SimNet, SeededLossIsDeterministic) {
  auto run = [](std::uint64_t seed) {
    SimNet net(seed, SimNet::Link{0us, 0.5});
    const Endpoint at = ep(10, 0, 0, 3, 53);
    net.register_endpoint(IpProto::UDP, at, EndpointScript::echo());
    const int fd = net.open_udp();
    for (std::uint32_t i = 0; i < 200; ++i) {
      net.udp_send(fd, at, {reinterpret_cast<const std::uint8_t*>(&i), sizeof i});
    }
    const auto deadline = std::chrono::steady_clock::now() + 5s;
    while (net.udp_received() < 200 && std::chrono::steady_clock::now() < deadline) std::this_thread::sleep_for(1ms);
    std::this_thread::sleep_for(50ms);
    std::set<std::uint32_t> seen;
    std::vector<std::uint8_t> buf(64);
    while (auto got = net.udp_recv(fd, buf)) {
      std::uint32_t v;
      std::memcpy(&v, buf.data(), sizeof v);
      seen.insert(v);
    }
    ::close(fd);
    return seen;
  };
  const auto a = run(11);
  const auto b = run(11);
  EXPECT_EQ(a, b);
  EXPECT_GT(a.size(), 60u);
  EXPECT_LT(a.size(), 140u);
  EXPECT_NE(a, run(12));
}

TEST(OsNet, LoopbackEchoThroughRemap) {
  SinkLedger ledger;
  const Endpoint virt = ep(10, 0, 0, 9, 7);
  LoopbackServer server(EndpointScript::echo(), ledger, virt);
  OsNet net;
  net.add_route(virt, server.address());
  LoopThread loop;
  std::promise<bool> p;
  const int fd = loop.sync([&] { return net.connect_tcp(virt, loop.reactor, [&](bool ok) { p.set_value(ok); }); });
  ASSERT_TRUE(p.get_future().get());
  const std::string msg = "over real loopback";
  ASSERT_EQ(::send(fd, msg.data(), msg.size(), MSG_NOSIGNAL), static_cast<ssize_t>(msg.size()));
  const Bytes back = read_exact(fd, msg.size());
  EXPECT_EQ(std::string(back.begin(), back.end()), msg);
  ::close(fd);
}

TEST(OsNet, UdpRepliesMappedBackToVirtualAddress) {
  LoopbackUdpEcho echo;
  const Endpoint virt = ep(10, 0, 0, 3, 53);
  OsNet net(std::map<Endpoint, Endpoint>{{virt, echo.address()}});
  const int fd = net.open_udp();
  const std::string q = "dns?";
  ASSERT_TRUE(net.udp_send(fd, virt, {reinterpret_cast<const std::uint8_t*>(q.data()), q.size()}));
  std::vector<std::uint8_t> buf(256);
  std::optional<std::pair<Endpoint, std::size_t>> got;
  for (int i = 0; i < 1000 && !got; ++i) {
    got = net.udp_recv(fd, buf);
    if (!got) std::this_thread::sleep_for(1ms);
  }
  ASSERT_TRUE(got);
  EXPECT_EQ(got->first, virt);
  EXPECT_EQ(got->second, q.size());
  ::close(fd);
}

namespace {

void put32(std::ofstream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
void put16(std::ofstream& o, std::uint16_t v) { o.write(reinterpret_cast<const char*>(&v), 2); }

}  // namespace

TEST(Capture, ClassicPcapRawAndEthernet) {
  const auto dir = std::filesystem::temp_directory_path() / "antproxy_harness";
  std::filesystem::create_directories(dir);
  const Bytes d1 = udp_bytes(10, 1), d2 = udp_bytes(20, 2);

  auto write_pcap = [&](const std::filesystem::path& p, std::uint32_t linktype, bool ethernet) {
    std::ofstream o(p, std::ios::binary);
    put32(o, 0xA1B2C3D4);
    put16(o, 2);
    put16(o, 4);
    put32(o, 0);
    put32(o, 0);
    put32(o, 65535);
    put32(o, linktype);
    std::uint32_t sec = 100;
    for (const Bytes* d : {&d1, &d2}) {
      Bytes frame;
      if (ethernet) {
        frame.assign(12, 0);
        frame.push_back(0x08);
        frame.push_back(0x00);
      }
      frame.insert(frame.end(), d->begin(), d->end());
      put32(o, sec++);
      put32(o, 250);
      put32(o, static_cast<std::uint32_t>(frame.size()));
      put32(o, static_cast<std::uint32_t>(frame.size()));
      o.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
    }
  };
  write_pcap(dir / "raw.pcap", 101, false);
  write_pcap(dir / "eth.pcap", 1, true);
  for (const char* name : {"raw.pcap", "eth.pcap"}) {
    const auto got = read_capture_datagrams(dir / name);
    ASSERT_EQ(got.size(), 2u) << name;
    EXPECT_EQ(got[0].datagram, d1);
    EXPECT_EQ(got[1].datagram, d2);
    EXPECT_EQ(got[0].timestamp_us, 100'000'250);
    EXPECT_EQ(got[1].timestamp_us, 101'000'250);
  }
}

TEST(Capture, PcapngReplayIntoSimTun) {
  const auto path = std::filesystem::temp_directory_path() / "antproxy_harness" / "replay.pcapng";
  std::filesystem::create_directories(path.parent_path());
  std::filesystem::remove(path);
  std::vector<Bytes> sent;
  {
    capture::PcapngWriter w(path, capture::LogPolicy{});
    for (std::uint16_t i = 0; i < 20; ++i) {
      sent.push_back(udp_bytes(i * 7u, i));
      w.log_packet(sent.back(), {{"app", "replay"}}, 1'000'000 + i * 1000);
    }
    w.close();
  }
  const auto packets = read_capture_datagrams(path);
  ASSERT_EQ(packets.size(), sent.size());
  SimTun tun;
  EXPECT_EQ(replay_into(tun, packets, 0), sent.size());
  std::vector<std::uint8_t> buf(tun.mtu());
  for (const auto& expect : sent) {
    const std::size_t n = tun.read(buf);
    EXPECT_EQ(Bytes(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n)), expect);
  }
  ASSERT_EQ(packets[3].comments.size(), 1u);
  EXPECT_EQ(packets[3].comments[0], "antmon.app=replay");
  EXPECT_EQ(packets[3].timestamp_us, 1'003'000);
}

TEST(Capture, NotACaptureFile) {
  const auto path = std::filesystem::temp_directory_path() / "antproxy_harness" / "junk.bin";
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << "definitely not a capture";
  EXPECT_EQ(code_of([&] { read_capture_datagrams(path); }), Errc::MalformedHeader);
}
