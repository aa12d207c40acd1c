#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "antproxy/byte_queue.h"
#include "antproxy/capture_log.h"
#include "antproxy/dpi.h"
#include "antproxy/external_net.h"
#include "antproxy/flow_context.h"
#include "antproxy/packet_codec.h"
#include "antproxy/reactor.h"
#include "antproxy/seq.h"
#include "antproxy/telemetry.h"
#include "antproxy/tun.h"

namespace antproxy::fwd {

struct EngineOptions {
  std::size_t queue_capacity = 512;  // datagrams between the two workers
  std::size_t pending_cap = 1 << 20;
  std::size_t fd_limit = 1024;
  std::size_t udp_map_limit = 4096;
  std::chrono::milliseconds udp_idle_timeout{60'000};
  /// How long the shared UDP socket stays open after the map empties.
  std::chrono::milliseconds udp_linger{5'000};
  std::chrono::milliseconds tcp_half_open_timeout{30'000};
  std::chrono::milliseconds rto{200};
  std::chrono::milliseconds sweep_interval{1'000};
  bool dpi_enabled = false;
  std::uint64_t scrub_seed = 0;
  /// Wall clock in microseconds; used for timestamps and idle accounting.
  std::function<std::int64_t()> clock;
};

/// Optional collaborators. All are borrowed and must outlive the engine.
struct Hooks {
  flow::AppMap* app_map = nullptr;
  dpi::DpiStore* dpi = nullptr;
  dpi::LeakHistory* leaks = nullptr;
  capture::CaptureLogger* tap = nullptr;
};

struct Drops {
  std::uint64_t icmp = 0;
  std::uint64_t protocol = 0;  // other non-TCP/UDP IP protocols
  std::uint64_t nomapping = 0;
  std::uint64_t overflow = 0;
  std::uint64_t malformed = 0;
  std::uint64_t budget = 0;
  std::uint64_t send_failure = 0;
  std::uint64_t blocked = 0;
};

struct Counters {
  std::uint64_t flows_active = 0;
  std::uint64_t flows_total = 0;
  std::uint64_t bytes_up = 0;    // transport payload bytes, app -> net
  std::uint64_t bytes_down = 0;  // transport payload bytes, net -> app
  std::uint64_t packets_up = 0;
  std::uint64_t packets_down = 0;
  Drops drops;
  std::uint64_t fd_in_use = 0;
  std::uint64_t fd_peak = 0;
  std::uint64_t tcp_sockets = 0;
  std::uint64_t udp_sockets = 0;
  std::uint64_t retransmissions = 0;
  std::uint64_t connect_failures = 0;
};

/// Internal-leg state of one proxied TCP connection.
enum class TcpState { Listen, SynReceived, Established, FinWait, CloseWait, LastAck, Closed };

std::string_view tcp_state_name(TcpState s);

/// The forwarding core: worker A reads the TUN, worker B owns every socket
/// and all connection state.
class Engine {
 public:
  Engine(TunPort& tun, net::ExternalNet& net, EngineOptions opts = {}, Hooks hooks = {});
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  /// Throws Error(TunUnavailable) if the port is closed.
  void start();
  void stop();
  bool running() const { return running_.load(); }

  Counters counters() const;
  /// Point-in-time copy of the flow table, taken on worker B.
  std::vector<flow::FlowRecord> flows();
  std::int64_t last_snapshot_pause_us() const { return snapshot_pause_us_.load(); }

  /// SYN arrival / SYN-ACK emission for recently handshaken connections.
  std::vector<telemetry::ConnTiming> handshake_timings() const;

  /// Runs idle eviction now; returns the number of flows removed.
  std::size_t sweep();
  /// Closes sockets of connections already in CLOSED; returns how many.
  std::size_t reclaim_sockets();

  /// Threads in this process named as forwarding workers.
  static std::size_t forwarding_threads();

 private:
  struct Inbound {
    Datagram datagram;
    Bytes raw;  // kept only when tapping
    std::int64_t ts_us = 0;
  };
  struct TcpConn;
  struct UdpEntry;

  void reader_loop();
  void on_inbound_ready();
  void process(Inbound& in);
  void reap();
  template <typename F>
  auto on_loop(F&& fn) -> decltype(fn());

  // TCP
  void tcp_in(Inbound& in);
  void tcp_open(Inbound& in);
  void tcp_segment(TcpConn& c, Inbound& in);
  void on_connected(std::uint64_t id, bool ok);
  void on_tcp_attributed(std::uint64_t id, std::string app);
  void maybe_synack(TcpConn& c);
  void on_socket(std::uint64_t id, std::uint32_t events);
  void read_socket(TcpConn& c);
  void flush_to_net(TcpConn& c);
  void pump_to_app(TcpConn& c, bool force_one = false);
  void send_to_app(TcpConn& c, std::uint8_t flags, Seq32 seq, ByteView payload, bool with_mss = false);
  void send_rst(const FlowKey& key, std::uint32_t seq, std::optional<std::uint32_t> ack);
  void arm_rto(TcpConn& c);
  void on_rto(std::uint64_t id);
  void update_interest(TcpConn& c);
  void update_state(TcpConn& c);
  void close_socket(TcpConn& c);
  void retire(TcpConn& c);
  void abort(TcpConn& c, bool rst_app);
  std::uint16_t adv_window(const TcpConn& c) const;
  TcpConn* conn_by_id(std::uint64_t id);

  // UDP
  void udp_out(Inbound& in);
  void on_udp_attributed(const FlowKey& key, std::string app);
  void udp_forward(UdpEntry& e, Inbound& in);
  bool ensure_udp_socket();
  void on_udp_readable();
  void evict_udp(const FlowKey& key);
  void close_udp_socket();

  // shared
  bool inspect(Datagram& d, const FlowKey& key, const std::string& app, bool& modified);
  void tap_inbound(Inbound& in, const FlowKey& key, const std::string& app, bool modified);
  void write_tun(Bytes&& datagram, const FlowKey& key, const std::string& app);
  std::int64_t now_us() const;
  void fd_opened();
  void fd_closed();
  void teardown();
  std::size_t sweep_on_loop();
  void schedule_sweep();
  void remember_closed(flow::FlowRecord r);

  TunPort& tun_;
  net::ExternalNet& net_;
  EngineOptions opts_;
  Hooks hooks_;
  std::uint16_t mss_;

  std::mutex lifecycle_mu_;
  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  std::shared_ptr<Reactor> reactor_;
  std::thread reader_;
  std::thread mux_;

  // A -> B hand-off
  std::mutex q_mu_;
  std::condition_variable q_space_;
  std::deque<Inbound> queue_;
  int q_event_fd_ = -1;

  // owned by worker B
  std::unordered_map<FlowKey, std::unique_ptr<TcpConn>> tcp_;
  std::unordered_map<std::uint64_t, TcpConn*> tcp_by_id_;
  std::vector<std::unique_ptr<TcpConn>> graveyard_;
  std::unordered_map<FlowKey, std::unique_ptr<UdpEntry>> udp_;
  std::unordered_map<Endpoint, std::deque<FlowKey>> udp_expect_;
  std::unordered_map<Endpoint, FlowKey> udp_last_;
  int udp_fd_ = -1;
  std::int64_t udp_empty_since_us_ = -1;
  std::uint64_t next_conn_id_ = 1;
  std::uint16_t ip_id_ = 1;
  Bytes read_buf_;
  std::deque<flow::FlowRecord> closed_flows_;

  mutable std::mutex timing_mu_;
  std::deque<telemetry::ConnTiming> timings_;

  struct Atomics {
    std::atomic<std::uint64_t> flows_active{0}, flows_total{0}, bytes_up{0}, bytes_down{0}, packets_up{0},
        packets_down{0}, icmp{0}, protocol{0}, nomapping{0}, overflow{0}, malformed{0}, budget{0}, send_failure{0},
        blocked{0}, fd_in_use{0}, fd_peak{0}, tcp_sockets{0}, udp_sockets{0}, retransmissions{0},
        connect_failures{0};
  } ctr_;
  std::atomic<std::int64_t> snapshot_pause_us_{0};
};

}  // namespace antproxy::fwd
