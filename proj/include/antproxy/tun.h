#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "antproxy/packet_codec.h"

namespace antproxy {

inline constexpr std::size_t kDefaultMtu = 16384;

/// Layer-3 interception point exchanging whole IP datagrams.
class TunPort {
 public:
  virtual ~TunPort() = default;

  virtual std::size_t mtu() const = 0;
  /// Blocks until one whole datagram is available and returns its length.
  /// Returns 0 when woken by interrupt(). Throws Error(PortClosed).
  virtual std::size_t read(std::span<std::uint8_t> buffer) = 0;
  /// Throws Error(OversizeDatagram) above mtu, Error(PortClosed) after close.
  virtual void write(ByteView datagram) = 0;
  /// Makes one blocked (or the next) read return 0.
  virtual void interrupt() = 0;
  virtual void close() = 0;
  virtual bool closed() const = 0;
};

/// In-memory TUN. The engine side uses the TunPort interface; the app side
/// injects datagrams and receives what the engine writes.
class SimTun : public TunPort {
 public:
  explicit SimTun(std::size_t mtu = kDefaultMtu, std::size_t inject_capacity = 4096);

  std::size_t mtu() const override { return mtu_; }
  std::size_t read(std::span<std::uint8_t> buffer) override;
  void write(ByteView datagram) override;
  void interrupt() override;
  void close() override;
  bool closed() const override;

  /// App side: blocks while the engine-bound queue is full.
  void inject(ByteView datagram);
  /// App side: next engine-written datagram, or nullopt at the deadline or
  /// after wake_receiver(). Throws Error(PortClosed).
  std::optional<Bytes> receive(std::chrono::steady_clock::time_point deadline);
  void wake_receiver();

  std::uint64_t injected() const;
  std::uint64_t written() const;

 private:
  std::size_t mtu_;
  std::size_t inject_capacity_;
  mutable std::mutex mu_;
  std::condition_variable to_engine_cv_;
  std::condition_variable space_cv_;
  std::condition_variable to_app_cv_;
  std::deque<Bytes> to_engine_;
  std::deque<Bytes> to_app_;
  bool closed_ = false;
  bool interrupted_ = false;
  bool receiver_woken_ = false;
  std::uint64_t injected_ = 0;
  std::uint64_t written_ = 0;
};

/// Linux /dev/net/tun device (IFF_TUN | IFF_NO_PI). Needs CAP_NET_ADMIN;
/// construction throws Error(TunUnavailable) otherwise.
class OsTun : public TunPort {
 public:
  explicit OsTun(const std::string& name = "antproxy0", std::size_t mtu = kDefaultMtu);
  ~OsTun() override;

  std::size_t mtu() const override { return mtu_; }
  std::size_t read(std::span<std::uint8_t> buffer) override;
  void write(ByteView datagram) override;
  void interrupt() override;
  void close() override;
  bool closed() const override { return fd_ < 0; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::size_t mtu_;
  int fd_ = -1;
  int wake_fd_ = -1;
};

struct CapturedDatagram {
  std::int64_t timestamp_us = 0;
  Bytes datagram;
  std::vector<std::string> comments;  // pcapng opt_comment values
};

/// IPv4 datagrams from a pcap or pcapng file. Raw-IP and Ethernet link types
/// are understood; other records and non-IPv4 frames are skipped.
std::vector<CapturedDatagram> read_capture_datagrams(const std::filesystem::path& path);

/// Injects `packets` into the app side of `tun`. speed <= 0 means as fast as
/// possible, otherwise inter-packet gaps are divided by `speed`.
std::size_t replay_into(SimTun& tun, std::span<const CapturedDatagram> packets, double speed);

}  // namespace antproxy
