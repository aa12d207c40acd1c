#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "antproxy/byte_queue.h"
#include "antproxy/flow_context.h"
#include "antproxy/packet_codec.h"
#include "antproxy/seq.h"
#include "antproxy/tun.h"

namespace antproxy::net {

/// Simulated application-side TCP/UDP endpoints living on the app side of
/// a SimTun. Plays the role of the phone's apps and kernel stack.
class AppStack {
 public:
  struct Options {
    Ipv4Addr local_ip = Ipv4Addr::from_octets(10, 1, 0, 2);
    std::size_t rcv_window = 65535;
    std::size_t snd_buffer = 256 * 1024;
    std::chrono::milliseconds rto{200};
    std::uint16_t first_port = 40000;
  };

  class TcpSocket;
  class UdpSocket;

  AppStack(SimTun& tun, std::shared_ptr<flow::OracleRegistry> oracle);
  AppStack(SimTun& tun, std::shared_ptr<flow::OracleRegistry> oracle, Options opts);
  ~AppStack();
  AppStack(const AppStack&) = delete;
  AppStack& operator=(const AppStack&) = delete;

  /// Blocks until established. Throws Error(NetworkFailure) on reset or
  /// timeout.
  std::shared_ptr<TcpSocket> connect(const Endpoint& dst, const std::string& app_id,
                                     std::chrono::milliseconds timeout = std::chrono::seconds(10));
  std::shared_ptr<UdpSocket> open_udp(const std::string& app_id);

  std::uint64_t retransmissions() const { return retransmissions_.load(); }
  std::uint64_t bad_datagrams() const { return bad_datagrams_.load(); }
  std::size_t open_connections() const;
  const Options& options() const { return opts_; }

 private:
  friend class TcpSocket;
  friend class UdpSocket;

  void loop();
  void handle(Datagram& d);
  std::uint16_t allocate_port();
  void release(std::uint16_t port);

  SimTun& tun_;
  std::shared_ptr<flow::OracleRegistry> oracle_;
  Options opts_;
  std::atomic<std::uint16_t> ip_id_{1};
  mutable std::mutex mu_;
  std::map<std::uint16_t, std::shared_ptr<TcpSocket>> tcp_;
  std::map<std::uint16_t, std::shared_ptr<UdpSocket>> udp_;
  std::uint16_t next_port_;
  std::atomic<std::uint64_t> retransmissions_{0};
  std::atomic<std::uint64_t> bad_datagrams_{0};
  std::atomic<bool> stopping_{false};
  std::thread thread_;
};

class AppStack::TcpSocket {
 public:
  enum class State { SynSent, Established, Closed, Reset };

  TcpSocket(AppStack& stack, Endpoint local, Endpoint remote);

  /// Blocks until every byte is queued. Throws Error(NotConnected) after a
  /// reset.
  void send_all(ByteView data);
  /// Blocks for at least one byte; 0 means the peer closed.
  std::size_t recv(std::span<std::uint8_t> out);
  /// Sends FIN after queued data.
  void close();
  /// Sends RST and drops the connection.
  void abort();
  /// Waits until both directions are finished (or reset).
  bool wait_closed(std::chrono::milliseconds timeout);

  State state() const;
  bool reset() const { return state() == State::Reset; }
  Endpoint local() const { return local_; }
  Endpoint remote() const { return remote_; }
  std::uint16_t peer_mss() const;
  /// Time between our SYN and the engine's SYN-ACK.
  std::chrono::microseconds handshake_time() const;
  std::uint64_t bytes_received() const;

 private:
  friend class AppStack;

  void on_segment(const Datagram& d);
  void on_timer(std::chrono::steady_clock::time_point now);
  std::optional<std::chrono::steady_clock::time_point> deadline() const;
  void pump_locked(bool force_one = false);
  void emit(std::uint8_t flags, Seq32 seq, ByteView payload, std::optional<std::uint16_t> mss = std::nullopt);
  std::uint16_t adv_window_locked() const;
  bool finished_locked() const;

  AppStack& stack_;
  Endpoint local_;
  Endpoint remote_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  State state_ = State::SynSent;
  Seq32 iss_;
  Seq32 snd_una_;
  Seq32 snd_nxt_;
  std::uint32_t snd_wnd_ = 0;
  std::uint16_t peer_mss_ = 536;
  ByteQueue sndbuf_;  // bytes from snd_una_ onward
  bool fin_queued_ = false;
  bool fin_sent_ = false;
  bool fin_acked_ = false;
  Seq32 rcv_nxt_;
  ByteQueue rcvbuf_;
  bool peer_fin_ = false;
  std::uint16_t last_adv_wnd_ = 0;
  std::optional<std::chrono::steady_clock::time_point> rto_at_;
  std::chrono::steady_clock::time_point syn_at_;
  std::chrono::microseconds handshake_{0};
  std::uint64_t received_ = 0;
};

class AppStack::UdpSocket {
 public:
  UdpSocket(AppStack& stack, Endpoint local);

  void send_to(const Endpoint& dst, ByteView payload);
  std::optional<std::pair<Endpoint, Bytes>> recv(std::chrono::milliseconds timeout);
  Endpoint local() const { return local_; }
  void close();

 private:
  friend class AppStack;
  AppStack& stack_;
  Endpoint local_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::pair<Endpoint, Bytes>> inbox_;
};

}  // namespace antproxy::net
