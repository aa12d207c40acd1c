#include "antproxy/capture_log.h"

#include <gtest/gtest.h>
#include <httplib.h>
#include <unistd.h>

#include <filesystem>
#include <random>
#include <thread>

#include "antproxy/error.h"
#include "support/pcapng_reader.h"

using namespace antproxy;
using namespace antproxy::capture;
using antproxy::testing::read_pcapng;

namespace {

class CaptureDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("antproxy_capture_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

Bytes udp_packet(std::size_t total) {
  Bytes payload(total - 28);
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<std::uint8_t>(i);
  return build_udp_datagram({Ipv4Addr::from_octets(10, 0, 0, 1), 5000}, {Ipv4Addr::from_octets(10, 0, 0, 3), 53}, 1,
                            payload);
}

Bytes tcp_packet(std::size_t total) {
  TcpSegmentSpec s;
  s.src = {Ipv4Addr::from_octets(10, 0, 0, 1), 40000};
  s.dst = {Ipv4Addr::from_octets(10, 0, 0, 2), 80};
  s.flags = tcp_flag::ACK;
  Bytes payload(total - 40, 'x');
  return build_tcp_datagram(s, payload);
}

}  // namespace

TEST_F(CaptureDir, FreshFileStartsWithSectionAndInterface) {
  const auto path = dir_ / "c.pcapng";
  { PcapngWriter w(path, LogPolicy{}); }
  std::ifstream in(path, std::ios::binary);
  unsigned char magic[4];
  in.read(reinterpret_cast<char*>(magic), 4);
  EXPECT_EQ(magic[0], 0x0A);
  EXPECT_EQ(magic[1], 0x0D);
  EXPECT_EQ(magic[2], 0x0D);
  EXPECT_EQ(magic[3], 0x0A);
  const auto cap = read_pcapng(path);
  ASSERT_EQ(cap.block_types.size(), 2u);
  EXPECT_EQ(cap.block_types[1], kBlockIDB);
  EXPECT_EQ(cap.link_types, std::vector<std::uint16_t>{101});
  EXPECT_TRUE(validate_pcapng(path).valid);
}

TEST_F(CaptureDir, FullPacketWithAppAnnotation) {
  const auto path = dir_ / "c.pcapng";
  const Bytes pkt = tcp_packet(100);
  {
    PcapngWriter w(path, LogPolicy{});
    EXPECT_TRUE(w.log_packet(pkt, {{"app", "com.example"}}, 1'700'000'000'123'456));
  }
  const auto cap = read_pcapng(path);
  ASSERT_EQ(cap.packets.size(), 1u);
  EXPECT_EQ(cap.packets[0].captured_len, 100u);
  EXPECT_EQ(cap.packets[0].original_len, 100u);
  EXPECT_EQ(cap.packets[0].data, pkt);
  EXPECT_EQ(cap.packets[0].timestamp, 1'700'000'000'123'456u);
  EXPECT_EQ(cap.packets[0].comments, std::vector<std::string>{"antmon.app=com.example"});
}

TEST_F(CaptureDir, HeadersOnlyTruncatesToTransportHeader) {
  const auto path = dir_ / "c.pcapng";
  LogPolicy pol;
  pol.mode = LogMode::HeadersOnly;
  const Bytes pkt = tcp_packet(100);
  {
    PcapngWriter w(path, pol);
    w.log_packet(pkt, {{"app", "com.example"}}, 1);
    w.log_packet(udp_packet(60), {}, 2);
  }
  const auto cap = read_pcapng(path);
  ASSERT_EQ(cap.packets.size(), 2u);
  EXPECT_EQ(cap.packets[0].captured_len, 40u);
  EXPECT_EQ(cap.packets[0].original_len, 100u);
  EXPECT_EQ(cap.packets[1].captured_len, 28u);
  EXPECT_TRUE(validate_pcapng(path).valid);
}

TEST_F(CaptureDir, DisabledAppWritesNothing) {
  const auto path = dir_ / "c.pcapng";
  LogPolicy pol;
  pol.app_enabled["com.quiet"] = false;
  {
    PcapngWriter w(path, pol);
    EXPECT_FALSE(w.log_packet(tcp_packet(60), {{"app", "com.quiet"}}, 1));
    EXPECT_TRUE(w.log_packet(tcp_packet(60), {{"app", "com.loud"}}, 1));
  }
  EXPECT_EQ(read_pcapng(path).packets.size(), 1u);
}

TEST_F(CaptureDir, ReopenRotatesExistingFile) {
  const auto path = dir_ / "c.pcapng";
  { PcapngWriter w(path, LogPolicy{}); }
  PcapngWriter again(path, LogPolicy{});
  ASSERT_EQ(again.rotated_files().size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(again.rotated_files()[0]));
  EXPECT_NE(again.rotated_files()[0], path);
}

TEST_F(CaptureDir, SizeRotationKeepsEveryFileValid) {
  const auto path = dir_ / "c.pcapng";
  LogPolicy pol;
  pol.rotation_bytes = 4096;
  std::vector<std::filesystem::path> files;
  {
    PcapngWriter w(path, pol);
    for (int i = 0; i < 50; ++i) w.log_packet(udp_packet(500), {{"direction", "up"}}, i);
    files = w.rotated_files();
  }
  files.push_back(path);
  EXPECT_GT(files.size(), 3u);
  std::size_t packets = 0;
  for (const auto& f : files) {
    const auto v = validate_pcapng(f);
    EXPECT_TRUE(v.valid) << f << ": " << v.error;
    packets += read_pcapng(f).packets.size();
  }
  EXPECT_EQ(packets, 50u);
}

TEST_F(CaptureDir, UnwritablePathIsIoFailure) {
  try {
    PcapngWriter w(dir_ / "missing" / "deeper" / "c.pcapng", LogPolicy{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IoFailure);
  }
}

TEST_F(CaptureDir, AnnotationRoundTripAndAlignmentProperty) {
  const auto path = dir_ / "c.pcapng";
  std::mt19937_64 rng(8);
  std::vector<std::pair<Bytes, std::vector<Annotation>>> written;
  {
    PcapngWriter w(path, LogPolicy{});
    for (int i = 0; i < 200; ++i) {
      Bytes pkt = udp_packet(28 + rng() % 300);
      std::vector<Annotation> ann;
      const char* keys[] = {"app", "netstate", "rssi", "location", "direction"};
      for (int k = 0; k < static_cast<int>(rng() % 4); ++k) {
        ann.push_back({keys[rng() % 5], std::string(rng() % 9, static_cast<char>('a' + rng() % 26))});
      }
      w.log_packet(pkt, ann, i);
      written.emplace_back(pkt, ann);
    }
  }
  ASSERT_TRUE(validate_pcapng(path).valid);
  const auto cap = read_pcapng(path);
  ASSERT_EQ(cap.packets.size(), written.size());
  for (std::size_t i = 0; i < written.size(); ++i) {
    EXPECT_EQ(cap.packets[i].data, written[i].first);
    std::vector<std::string> expected;
    for (const auto& a : written[i].second) expected.push_back("antmon." + a.key + "=" + a.value);
    EXPECT_EQ(cap.packets[i].comments, expected);
  }
}

TEST_F(CaptureDir, ValidatorRejectsCorruption) {
  const auto path = dir_ / "c.pcapng";
  {
    PcapngWriter w(path, LogPolicy{});
    w.log_packet(udp_packet(64), {}, 1);
  }
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(-2, std::ios::end);
  f.put(0x7F);
  f.close();
  EXPECT_FALSE(validate_pcapng(path).valid);
  std::ofstream(dir_ / "bogus.pcapng") << "not a capture file!";
  EXPECT_FALSE(validate_pcapng(dir_ / "bogus.pcapng").valid);
}

TEST_F(CaptureDir, LoggerRunsObserversAndWritesAll) {
  CaptureLogger::Options opts;
  opts.path = dir_ / "live.pcapng";
  opts.queue_capacity = 100000;
  std::atomic<int> observed{0};
  CaptureLogger logger(opts);
  logger.add_observer([&](const TapRecord&) { observed.fetch_add(1); });
  for (int i = 0; i < 500; ++i) {
    TapRecord r;
    r.timestamp_us = i;
    r.app_id = "com.example";
    r.direction = i % 2 ? Direction::Down : Direction::Up;
    r.datagram = udp_packet(100);
    ASSERT_TRUE(logger.submit(std::move(r)));
  }
  logger.drain();
  EXPECT_EQ(observed.load(), 500);
  EXPECT_EQ(logger.logged(), 500u);
  logger.stop();
  const auto cap = read_pcapng(opts.path->string());
  ASSERT_EQ(cap.packets.size(), 500u);
  EXPECT_EQ(cap.packets[1].comments, (std::vector<std::string>{"antmon.app=com.example", "antmon.direction=down"}));
}

TEST_F(CaptureDir, LoggerDropsWhenQueueFull) {
  CaptureLogger::Options opts;
  opts.queue_capacity = 1;
  CaptureLogger logger(opts);
  std::mutex gate;
  gate.lock();
  logger.add_observer([&](const TapRecord&) {
    gate.lock();
    gate.unlock();
  });
  int accepted = 0;
  for (int i = 0; i < 20; ++i) accepted += logger.submit(TapRecord{}) ? 1 : 0;
  gate.unlock();
  logger.drain();
  EXPECT_GT(logger.dropped(), 0u);
  EXPECT_EQ(logger.dropped() + static_cast<std::uint64_t>(accepted), 20u);
}

TEST_F(CaptureDir, UploadArchivesAcknowledgedFiles) {
  httplib::Server server;
  std::atomic<int> parts{0};
  std::atomic<int> status{200};
  server.Post("/upload", [&](const httplib::Request& req, httplib::Response& res) {
    if (req.has_file("file")) {
      const auto f = req.get_file_value("file");
      if (f.content.size() >= 4 && static_cast<unsigned char>(f.content[0]) == 0x0A) ++parts;
    }
    res.status = status.load();
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string url = "http://127.0.0.1:" + std::to_string(port) + "/upload";

  UploadConditions on_demand{true, false, false};
  // nothing closed yet
  EXPECT_FALSE(upload_logs(dir_, std::nullopt, url, on_demand).attempted);

  const auto active = dir_ / "c.pcapng";
  { PcapngWriter w(active, LogPolicy{}); }
  PcapngWriter w(active, LogPolicy{});  // rotates the first file
  EXPECT_FALSE(upload_logs(dir_, active, url, UploadConditions{}).attempted);

  status = 500;
  auto failed = upload_logs(dir_, active, url, on_demand);
  EXPECT_TRUE(failed.attempted);
  EXPECT_TRUE(failed.retryable);
  EXPECT_EQ(failed.retained.size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(failed.retained[0]));

  status = 200;
  auto ok = upload_logs(dir_, active, url, on_demand);
  EXPECT_FALSE(ok.retryable);
  ASSERT_EQ(ok.archived.size(), 1u);
  EXPECT_EQ(ok.last_status, 200);
  EXPECT_TRUE(std::filesystem::exists(ok.archived[0]));
  EXPECT_EQ(ok.archived[0].parent_path().filename(), "archived");
  EXPECT_TRUE(std::filesystem::exists(active));
  EXPECT_EQ(parts.load(), 2);

  server.stop();
  t.join();
}
