#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "antproxy/packet_codec.h"
#include "antproxy/reactor.h"

namespace antproxy::net {

/// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(ByteView data);
  std::string hex_digest();

 private:
  void* ctx_;
};

/// Deterministic byte stream served by Serve endpoints: bytes
/// [offset, offset + out.size()) of the stream for `seed`.
void fill_content(std::uint64_t seed, std::uint64_t offset, std::span<std::uint8_t> out);
std::string content_sha256(std::uint64_t seed, std::uint64_t size);

enum class ScriptKind { Echo, Serve, Sink };

struct EndpointScript {
  ScriptKind kind = ScriptKind::Echo;
  std::uint64_t size = 0;  // Serve: bytes to send
  std::uint64_t seed = 0;  // Serve: content seed

  static EndpointScript echo() { return {ScriptKind::Echo, 0, 0}; }
  static EndpointScript serve(std::uint64_t size, std::uint64_t seed = 0) { return {ScriptKind::Serve, size, seed}; }
  static EndpointScript sink() { return {ScriptKind::Sink, 0, 0}; }
};

struct SinkResult {
  std::uint64_t bytes = 0;
  std::string sha256;
};

/// Results reported by stream scripts; shared by SimNet and loopback hosting.
class SinkLedger {
 public:
  void record(const Endpoint& at, SinkResult r);
  std::vector<SinkResult> results(const Endpoint& at) const;
  /// Waits until `at` has at least `count` results.
  bool wait_for(const Endpoint& at, std::size_t count, std::chrono::milliseconds timeout) const;

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<Endpoint, std::vector<SinkResult>> results_;
};

/// Runs one stream script on a connected blocking fd. Leaves the fd shut
/// down in both directions but open; the caller closes it.
void run_stream_script(const EndpointScript& script, int fd, const Endpoint& at, SinkLedger& ledger);

/// External leg of the forwarder. The fds handed out are non-blocking and
/// behave like connected TCP / unconnected UDP sockets.
class ExternalNet {
 public:
  using ConnectDone = std::function<void(bool ok)>;

  virtual ~ExternalNet() = default;

  /// Starts a connect. Returns the fd (caller owns it), or -1 if no fd could
  /// be created. `done` later runs on the reactor thread; it can still fire
  /// after the caller abandoned the fd, so it must check its own state.
  virtual int connect_tcp(const Endpoint& dst, Reactor& reactor, ConnectDone done) = 0;

  virtual int open_udp() = 0;
  virtual bool udp_send(int fd, const Endpoint& dst, ByteView payload) = 0;
  /// nullopt when nothing is pending.
  virtual std::optional<std::pair<Endpoint, std::size_t>> udp_recv(int fd, std::span<std::uint8_t> buffer) = 0;
};

/// Deterministic in-memory internet of scripted endpoints.
class SimNet : public ExternalNet {
 public:
  struct Link {
    std::chrono::microseconds latency{0};
    double udp_loss = 0.0;
  };

  explicit SimNet(std::uint64_t seed = 1);
  SimNet(std::uint64_t seed, Link link);
  ~SimNet() override;

  /// Throws Error(DuplicateEndpoint).
  void register_endpoint(IpProto proto, const Endpoint& at, EndpointScript script);
  bool has_endpoint(IpProto proto, const Endpoint& at) const;

  int connect_tcp(const Endpoint& dst, Reactor& reactor, ConnectDone done) override;
  int open_udp() override;
  bool udp_send(int fd, const Endpoint& dst, ByteView payload) override;
  std::optional<std::pair<Endpoint, std::size_t>> udp_recv(int fd, std::span<std::uint8_t> buffer) override;

  /// Delivers a datagram from `from` to every open UDP channel.
  void inject_udp(const Endpoint& from, ByteView payload);

  SinkLedger& ledger() { return ledger_; }
  std::uint64_t tcp_accepted() const { return tcp_accepted_.load(); }
  std::uint64_t tcp_refused() const { return tcp_refused_.load(); }
  std::uint64_t udp_received() const { return udp_received_.load(); }
  std::size_t live_stream_workers();

 private:
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
    int fd;
  };
  void reap_locked();
  void udp_loop(int fd);

  Link link_;
  mutable std::mutex mu_;
  std::map<std::pair<IpProto, Endpoint>, EndpointScript> endpoints_;
  std::list<Worker> workers_;
  std::vector<int> udp_fds_;
  std::mt19937_64 rng_;
  SinkLedger ledger_;
  std::atomic<std::uint64_t> tcp_accepted_{0};
  std::atomic<std::uint64_t> tcp_refused_{0};
  std::atomic<std::uint64_t> udp_received_{0};
  std::atomic<bool> stopping_{false};
};

/// Real sockets. Destinations are rewritten through `remap` (virtual
/// address -> reachable address); replies are mapped back.
class OsNet : public ExternalNet {
 public:
  explicit OsNet(std::map<Endpoint, Endpoint> remap = {});

  void add_route(const Endpoint& virtual_ep, const Endpoint& real_ep);

  int connect_tcp(const Endpoint& dst, Reactor& reactor, ConnectDone done) override;
  int open_udp() override;
  bool udp_send(int fd, const Endpoint& dst, ByteView payload) override;
  std::optional<std::pair<Endpoint, std::size_t>> udp_recv(int fd, std::span<std::uint8_t> buffer) override;

 private:
  Endpoint forward(const Endpoint& e) const;
  Endpoint backward(const Endpoint& e) const;

  mutable std::mutex mu_;
  std::map<Endpoint, Endpoint> remap_;
  std::map<Endpoint, Endpoint> reverse_;
};

/// Hosts stream scripts on 127.0.0.1 TCP listeners (and UDP echo).
class LoopbackServer {
 public:
  LoopbackServer(EndpointScript script, SinkLedger& ledger, const Endpoint& ledger_key);
  ~LoopbackServer();
  Endpoint address() const { return address_; }
  std::uint64_t accepted() const { return accepted_.load(); }

 private:
  void accept_loop();

  EndpointScript script_;
  SinkLedger& ledger_;
  Endpoint key_;
  Endpoint address_;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> accepted_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<std::thread> conns_;
  std::set<int> open_fds_;
};

/// Loopback UDP echo server.
class LoopbackUdpEcho {
 public:
  LoopbackUdpEcho();
  ~LoopbackUdpEcho();
  Endpoint address() const { return address_; }

 private:
  int fd_ = -1;
  Endpoint address_;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
};

/// Sets SO_SNDBUF/SO_RCVBUF on a socket; ignores failures.
void set_socket_buffers(int fd, int bytes);

}  // namespace antproxy::net
