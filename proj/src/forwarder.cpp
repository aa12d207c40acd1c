#include "antproxy/forwarder.h"

#include <pthread.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <fstream>
#include <future>
#include <mutex>
#include <set>

#include "antproxy/error.h"

namespace antproxy::fwd {

namespace {

constexpr std::size_t kClosedHistory = 256;
constexpr std::size_t kTimingHistory = 4096;
constexpr std::size_t kUdpHeldPerFlow = 64;
constexpr std::size_t kUdpExpectPerRemote = 256;
constexpr int kReadsPerWakeup = 8;
constexpr int kUdpReadsPerWakeup = 64;
constexpr std::size_t kFdReserve = 16;

std::int64_t wall_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// Threads spawned from a worker inherit its name, so workers are tracked by tid.
std::mutex worker_mu;
std::set<pid_t> worker_tids;

struct WorkerTid {
  pid_t tid = ::gettid();
  WorkerTid(const char* name, std::promise<void>& ready) {
    ::pthread_setname_np(::pthread_self(), name);
    {
      std::lock_guard lock(worker_mu);
      worker_tids.insert(tid);
    }
    ready.set_value();
  }
  ~WorkerTid() {
    std::lock_guard lock(worker_mu);
    worker_tids.erase(tid);
  }
};

void bump_peak(std::atomic<std::uint64_t>& peak, std::uint64_t v) {
  std::uint64_t cur = peak.load();
  while (v > cur && !peak.compare_exchange_weak(cur, v)) {
  }
}

}  // namespace

std::string_view tcp_state_name(TcpState s) {
  switch (s) {
    case TcpState::Listen: return "LISTEN";
    case TcpState::SynReceived: return "SYN_RECEIVED";
    case TcpState::Established: return "ESTABLISHED";
    case TcpState::FinWait: return "FIN_WAIT";
    case TcpState::CloseWait: return "CLOSE_WAIT";
    case TcpState::LastAck: return "LAST_ACK";
    case TcpState::Closed: return "CLOSED";
  }
  return "?";
}

struct Engine::TcpConn {
  std::uint64_t id = 0;
  FlowKey key;
  TcpState state = TcpState::Listen;
  bool dead = false;

  std::string app = std::string(flow::kUnknownApp);
  bool attributed = false;
  bool connected = false;
  bool synack_sent = false;
  bool handshake_done = false;

  int fd = -1;
  std::uint32_t interest = 0;
  bool registered = false;

  Seq32 irs;      // app's initial sequence number
  Seq32 iss;      // ours
  Seq32 snd_una;  // oldest byte of to_app not yet acked by the app
  Seq32 snd_nxt;
  Seq32 rcv_nxt;  // our_ack
  std::uint32_t app_wnd = 0;
  std::uint16_t mss = 536;
  std::uint16_t last_adv = 0;

  ByteQueue to_app;  // starts at snd_una
  ByteQueue to_net;

  bool app_fin = false;
  bool net_eof = false;
  bool fin_sent = false;
  bool fin_acked = false;
  bool net_shut_wr = false;

  std::optional<std::chrono::steady_clock::time_point> rto_at;
  bool rto_scheduled = false;

  std::int64_t syn_us = 0;
  std::int64_t start_us = 0;
  std::int64_t last_us = 0;
  std::uint64_t packets_up = 0, packets_down = 0, bytes_up = 0, bytes_down = 0;
};

struct Engine::UdpEntry {
  FlowKey key;
  std::string app = std::string(flow::kUnknownApp);
  bool attributed = false;
  std::vector<Inbound> held;
  std::int64_t start_us = 0;
  std::int64_t last_us = 0;
  std::uint64_t packets_up = 0, packets_down = 0, bytes_up = 0, bytes_down = 0;
};

namespace {

flow::FlowState record_state(TcpState s) {
  switch (s) {
    case TcpState::Listen:
    case TcpState::SynReceived: return flow::FlowState::Connecting;
    case TcpState::Established: return flow::FlowState::Established;
    case TcpState::Closed: return flow::FlowState::Closed;
    default: return flow::FlowState::Closing;
  }
}

}  // namespace

Engine::Engine(TunPort& tun, net::ExternalNet& net, EngineOptions opts, Hooks hooks)
    : tun_(tun), net_(net), opts_(std::move(opts)), hooks_(hooks), mss_(mss_for_mtu(tun.mtu())) {
  if (!opts_.clock) opts_.clock = wall_us;
  read_buf_.resize(std::max<std::size_t>(tun.mtu(), 65536));
}

Engine::~Engine() { stop(); }

std::int64_t Engine::now_us() const { return opts_.clock(); }

// --- lifecycle ---

void Engine::start() {
  std::lock_guard lock(lifecycle_mu_);
  if (running_) return;
  if (tun_.closed()) throw Error(Errc::TunUnavailable, "tun port is closed");
  stopping_ = false;
  reactor_ = std::make_shared<Reactor>();
  q_event_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
  if (q_event_fd_ < 0) throw Error(Errc::IoFailure, "eventfd failed");
  reactor_->add(q_event_fd_, EPOLLIN, [this](std::uint32_t) { on_inbound_ready(); });
  schedule_sweep();
  std::promise<void> mux_ready, reader_ready;
  try {
    mux_ = std::thread([r = reactor_, &mux_ready] {
      WorkerTid reg("fwd-mux", mux_ready);
      r->run();
    });
    mux_ready.get_future().wait();
    reader_ = std::thread([this, &reader_ready] {
      WorkerTid reg("fwd-tun", reader_ready);
      reader_loop();
    });
    reader_ready.get_future().wait();
  } catch (...) {
    reactor_->stop();
    if (mux_.joinable()) mux_.join();
    ::close(q_event_fd_);
    q_event_fd_ = -1;
    reactor_.reset();
    throw;
  }
  running_ = true;
}

void Engine::stop() {
  std::lock_guard lock(lifecycle_mu_);
  if (!running_) return;
  stopping_ = true;
  tun_.interrupt();
  q_space_.notify_all();
  reader_.join();
  reactor_->post([this] {
    teardown();
    reactor_->stop();
  });
  mux_.join();
  reactor_->remove(q_event_fd_);
  ::close(q_event_fd_);
  q_event_fd_ = -1;
  reactor_.reset();
  {
    std::lock_guard q(q_mu_);
    queue_.clear();
  }
  running_ = false;
}

void Engine::teardown() {
  std::vector<TcpConn*> conns;
  for (auto& [k, c] : tcp_) conns.push_back(c.get());
  for (auto* c : conns) abort(*c, true);
  std::vector<FlowKey> keys;
  for (auto& [k, e] : udp_) keys.push_back(k);
  for (auto& k : keys) evict_udp(k);
  close_udp_socket();
  reap();
}

template <typename F>
auto Engine::on_loop(F&& fn) -> decltype(fn()) {
  if (reactor_ && reactor_->in_loop_thread()) return fn();
  std::packaged_task<decltype(fn())()> task(std::forward<F>(fn));
  auto fut = task.get_future();
  {
    // posting under the lifecycle lock orders this ahead of any teardown
    std::unique_lock lock(lifecycle_mu_);
    if (!running_) {
      task();
      return fut.get();
    }
    reactor_->post([&task] { task(); });
  }
  return fut.get();
}

std::size_t Engine::forwarding_threads() {
  std::lock_guard lock(worker_mu);
  std::size_t n = 0;
  for (pid_t tid : worker_tids) {
    std::ifstream comm("/proc/self/task/" + std::to_string(tid) + "/comm");
    std::string name;
    if (std::getline(comm, name) && name.rfind("fwd-", 0) == 0) ++n;
  }
  return n;
}

// --- worker A ---

void Engine::reader_loop() {
  std::vector<std::uint8_t> buf(tun_.mtu());
  const bool keep_raw = hooks_.tap != nullptr;
  while (!stopping_.load()) {
    std::size_t n = 0;
    try {
      n = tun_.read(buf);
    } catch (const Error&) {
      break;
    }
    if (n == 0) continue;
    const ByteView raw(buf.data(), n);
    const auto proto = peek_protocol(raw);
    if (proto && *proto != static_cast<std::uint8_t>(IpProto::TCP) &&
        *proto != static_cast<std::uint8_t>(IpProto::UDP)) {
      if (*proto == static_cast<std::uint8_t>(IpProto::ICMP)) {
        ctr_.icmp.fetch_add(1);
      } else {
        ctr_.protocol.fetch_add(1);
      }
      continue;
    }
    Inbound in;
    try {
      in.datagram = parse_datagram(raw);
    } catch (const Error&) {
      ctr_.malformed.fetch_add(1);
      continue;
    }
    in.ts_us = now_us();
    if (keep_raw) in.raw.assign(raw.begin(), raw.end());

    bool signal = false;
    {
      std::unique_lock lock(q_mu_);
      q_space_.wait(lock, [&] { return queue_.size() < opts_.queue_capacity || stopping_.load(); });
      if (stopping_) break;
      signal = queue_.empty();
      queue_.push_back(std::move(in));
    }
    if (signal) {
      const std::uint64_t one = 1;
      [[maybe_unused]] auto w = ::write(q_event_fd_, &one, sizeof one);
    }
  }
}

// --- worker B ---

void Engine::on_inbound_ready() {
  std::uint64_t count;
  [[maybe_unused]] auto r = ::read(q_event_fd_, &count, sizeof count);
  std::deque<Inbound> batch;
  {
    std::lock_guard lock(q_mu_);
    batch.swap(queue_);
  }
  q_space_.notify_all();
  for (auto& in : batch) process(in);
  reap();
}

void Engine::process(Inbound& in) {
  ctr_.packets_up.fetch_add(1);
  if (in.datagram.is_tcp()) {
    tcp_in(in);
  } else {
    udp_out(in);
  }
}

void Engine::reap() { graveyard_.clear(); }

void Engine::fd_opened() {
  const auto v = ctr_.fd_in_use.fetch_add(1) + 1;
  bump_peak(ctr_.fd_peak, v);
}

void Engine::fd_closed() { ctr_.fd_in_use.fetch_sub(1); }

void Engine::write_tun(Bytes&& datagram, const FlowKey& key, const std::string& app) {
  try {
    tun_.write(datagram);
  } catch (const Error&) {
    ctr_.send_failure.fetch_add(1);
    return;
  }
  ctr_.packets_down.fetch_add(1);
  if (hooks_.tap) {
    hooks_.tap->submit(capture::TapRecord{now_us(), capture::Direction::Down, key, app, std::move(datagram)});
  }
}

void Engine::tap_inbound(Inbound& in, const FlowKey& key, const std::string& app, bool modified) {
  if (!hooks_.tap) return;
  Bytes bytes = modified ? serialize_datagram(in.datagram) : std::move(in.raw);
  hooks_.tap->submit(capture::TapRecord{in.ts_us, capture::Direction::Up, key, app, std::move(bytes)});
}

bool Engine::inspect(Datagram& d, const FlowKey& key, const std::string& app, bool& modified) {
  modified = false;
  if (!opts_.dpi_enabled || !hooks_.dpi || d.payload.empty()) return true;
  const auto rules = hooks_.dpi->ruleset();
  if (!rules || rules->empty()) return true;
  const auto matches = rules->inspect(d.payload);
  if (matches.empty()) return true;
  const auto policies = hooks_.dpi->policies();
  const dpi::PolicyContext ctx{app, key, opts_.scrub_seed, now_us()};
  dpi::Verdict v = dpi::apply_policy(d, matches, *rules, *policies, ctx);
  if (hooks_.leaks) {
    for (auto& e : v.events) hooks_.leaks->record(std::move(e));
  }
  modified = v.modified;
  return v.kind == dpi::VerdictKind::Forward;
}

// --- TCP ---

Engine::TcpConn* Engine::conn_by_id(std::uint64_t id) {
  auto it = tcp_by_id_.find(id);
  return it == tcp_by_id_.end() ? nullptr : it->second;
}

std::uint16_t Engine::adv_window(const TcpConn& c) const {
  const std::size_t used = c.to_net.size();
  const std::size_t room = used >= opts_.pending_cap ? 0 : opts_.pending_cap - used;
  return static_cast<std::uint16_t>(std::min<std::size_t>(room, 65535));
}

void Engine::send_to_app(TcpConn& c, std::uint8_t flags, Seq32 seq, ByteView payload, bool with_mss) {
  TcpSegmentSpec spec;
  spec.src = c.key.dst;
  spec.dst = c.key.src;
  spec.seq = seq.value();
  spec.ack = c.rcv_nxt.value();
  spec.flags = static_cast<std::uint8_t>(flags | tcp_flag::ACK);
  spec.window = adv_window(c);
  spec.ip_id = ip_id_++;
  if (with_mss) spec.mss = mss_;
  c.last_adv = spec.window;
  c.packets_down++;
  c.last_us = now_us();
  write_tun(build_tcp_datagram(spec, payload), c.key, c.app);
}

void Engine::send_rst(const FlowKey& key, std::uint32_t seq, std::optional<std::uint32_t> ack) {
  TcpSegmentSpec spec;
  spec.src = key.dst;
  spec.dst = key.src;
  spec.seq = seq;
  spec.flags = tcp_flag::RST;
  if (ack) {
    spec.flags |= tcp_flag::ACK;
    spec.ack = *ack;
  }
  spec.ip_id = ip_id_++;
  write_tun(build_tcp_datagram(spec, {}), key, std::string(flow::kUnknownApp));
}

void Engine::tcp_in(Inbound& in) {
  const Datagram& d = in.datagram;
  const TcpHeader& t = d.tcp();
  const FlowKey key{IpProto::TCP, d.source(), d.destination()};
  auto it = tcp_.find(key);
  const bool syn = (t.flags & tcp_flag::SYN) && !(t.flags & tcp_flag::ACK);
  if (it != tcp_.end() && syn && Seq32(t.seq) != it->second->irs) {
    // same tuple, new incarnation
    abort(*it->second, false);
    it = tcp_.end();
  }
  if (it == tcp_.end()) {
    if (syn) {
      tcp_open(in);
      return;
    }
    tap_inbound(in, key, std::string(flow::kUnknownApp), false);
    if (t.flags & tcp_flag::RST) return;
    const bool pure_ack = (t.flags & tcp_flag::ACK) && !(t.flags & (tcp_flag::FIN | tcp_flag::SYN)) && d.payload.empty();
    if (pure_ack) return;
    if (t.flags & tcp_flag::ACK) {
      send_rst(key, t.ack, std::nullopt);
    } else {
      const auto len = static_cast<std::uint32_t>(d.payload.size()) + ((t.flags & tcp_flag::FIN) ? 1u : 0u);
      send_rst(key, 0, t.seq + len);
    }
    return;
  }
  tcp_segment(*it->second, in);
}

void Engine::tcp_open(Inbound& in) {
  const Datagram& d = in.datagram;
  const TcpHeader& t = d.tcp();
  const FlowKey key{IpProto::TCP, d.source(), d.destination()};
  tap_inbound(in, key, std::string(flow::kUnknownApp), false);

  if (ctr_.fd_in_use.load() + kFdReserve >= opts_.fd_limit) {
    ctr_.budget.fetch_add(1);
    send_rst(key, 0, t.seq + 1);
    return;
  }

  auto owned = std::make_unique<TcpConn>();
  TcpConn& c = *owned;
  c.id = next_conn_id_++;
  c.key = key;
  c.state = TcpState::SynReceived;
  c.irs = Seq32(t.seq);
  c.rcv_nxt = c.irs + 1;
  c.iss = Seq32(static_cast<std::uint32_t>(0x20000000u + c.id * 104729u));
  c.snd_una = c.iss;
  c.snd_nxt = c.iss;
  c.app_wnd = t.window;
  c.mss = std::min<std::uint16_t>(mss_, t.mss().value_or(536));
  c.syn_us = in.ts_us;
  c.start_us = in.ts_us;
  c.last_us = in.ts_us;
  c.packets_up = 1;

  c.fd = net_.connect_tcp(key.dst, *reactor_, [this, id = c.id](bool ok) {
    on_connected(id, ok);
    reap();
  });
  if (c.fd < 0) {
    ctr_.send_failure.fetch_add(1);
    send_rst(key, 0, t.seq + 1);
    return;
  }
  fd_opened();
  ctr_.tcp_sockets.fetch_add(1);
  ctr_.flows_total.fetch_add(1);
  ctr_.flows_active.fetch_add(1);
  tcp_by_id_[c.id] = &c;
  tcp_.emplace(key, std::move(owned));

  if (!hooks_.app_map) {
    c.attributed = true;
  } else if (auto app = hooks_.app_map->peek(key)) {
    c.app = *app;
    c.attributed = true;
  } else {
    std::weak_ptr<Reactor> weak = reactor_;
    hooks_.app_map->lookup_async(key, [this, weak, id = c.id](std::string app) {
      if (auto r = weak.lock()) {
        r->post([this, id, app = std::move(app)]() mutable {
          on_tcp_attributed(id, std::move(app));
          reap();
        });
      }
    });
  }
  // half-open guard also covers a connect that never completes
}

void Engine::on_tcp_attributed(std::uint64_t id, std::string app) {
  TcpConn* c = conn_by_id(id);
  if (!c || c->dead) return;
  c->app = std::move(app);
  c->attributed = true;
  maybe_synack(*c);
}

void Engine::on_connected(std::uint64_t id, bool ok) {
  TcpConn* c = conn_by_id(id);
  if (!c || c->dead) return;
  if (!ok) {
    ctr_.connect_failures.fetch_add(1);
    abort(*c, true);
    return;
  }
  c->connected = true;
  update_interest(*c);
  maybe_synack(*c);
}

void Engine::maybe_synack(TcpConn& c) {
  if (c.synack_sent || !c.connected || !c.attributed) return;
  c.synack_sent = true;
  send_to_app(c, tcp_flag::SYN, c.iss, {}, true);
  c.snd_nxt = c.iss + 1;
  arm_rto(c);
  std::lock_guard lock(timing_mu_);
  timings_.push_back(telemetry::ConnTiming{c.syn_us, now_us()});
  if (timings_.size() > kTimingHistory) timings_.pop_front();
}

void Engine::tcp_segment(TcpConn& c, Inbound& in) {
  Datagram& d = in.datagram;
  const TcpHeader t = d.tcp();
  c.packets_up++;
  c.last_us = in.ts_us;

  if (t.flags & tcp_flag::RST) {
    tap_inbound(in, c.key, c.app, false);
    abort(c, false);
    return;
  }
  if (t.flags & tcp_flag::SYN) {
    // retransmitted SYN
    tap_inbound(in, c.key, c.app, false);
    if (c.synack_sent && !c.handshake_done) send_to_app(c, tcp_flag::SYN, c.iss, {}, true);
    return;
  }

  if (t.flags & tcp_flag::ACK) {
    const Seq32 ack(t.ack);
    if (!c.handshake_done) {
      if (c.synack_sent && ack == c.iss + 1) {
        c.handshake_done = true;
        c.snd_una = c.iss + 1;
        c.snd_nxt = c.iss + 1;
        c.rto_at.reset();
        c.state = TcpState::Established;
      }
    } else if (ack.after(c.snd_una) && ack.at_or_before(c.snd_nxt)) {
      std::size_t acked = static_cast<std::size_t>(ack - c.snd_una);
      if (c.fin_sent && ack == c.snd_nxt) {
        c.fin_acked = true;
        acked -= 1;
      }
      acked = std::min(acked, c.to_app.size());
      c.to_app.consume(acked);
      c.bytes_down += acked;
      ctr_.bytes_down.fetch_add(acked);
      c.snd_una = ack;
      c.rto_at.reset();
      if (c.snd_nxt != c.snd_una) arm_rto(c);
    }
    if (c.handshake_done && ack.at_or_after(c.snd_una)) c.app_wnd = t.window;
  }
  if (!c.handshake_done) {
    tap_inbound(in, c.key, c.app, false);
    return;
  }

  bool ack_now = false;
  bool modified = false;
  bool blocked = false;
  const Seq32 seq(t.seq);
  const std::size_t len = d.payload.size();
  if (len > 0) {
    ack_now = true;
    if (seq != c.rcv_nxt || c.app_fin) {
      // out of order or duplicate: re-ACK at rcv_nxt
    } else if (c.to_net.size() + len > opts_.pending_cap) {
      ctr_.overflow.fetch_add(1);
      ack_now = false;
    } else {
      if (!inspect(d, c.key, c.app, modified)) {
        blocked = true;
        ctr_.blocked.fetch_add(1);
      } else {
        c.to_net.append(d.payload);
        c.bytes_up += len;
        ctr_.bytes_up.fetch_add(len);
      }
      c.rcv_nxt += static_cast<std::uint32_t>(len);
    }
  }
  if (t.flags & tcp_flag::FIN) {
    ack_now = true;
    if (!c.app_fin && seq + static_cast<std::uint32_t>(len) == c.rcv_nxt) {
      c.app_fin = true;
      c.rcv_nxt += 1;
    }
  }
  if (!blocked) tap_inbound(in, c.key, c.app, modified);

  if (!c.to_net.empty() || c.app_fin) flush_to_net(c);
  if (c.dead) return;
  if (ack_now) send_to_app(c, 0, c.snd_nxt, {});
  pump_to_app(c);
  update_interest(c);
  update_state(c);
}

void Engine::flush_to_net(TcpConn& c) {
  if (!c.connected || c.fd < 0) return;
  while (!c.to_net.empty()) {
    const auto chunk = c.to_net.view(0, c.to_net.size());
    const ssize_t n = ::send(c.fd, chunk.data(), chunk.size(), MSG_DONTWAIT | MSG_NOSIGNAL);
    if (n > 0) {
      c.to_net.consume(static_cast<std::size_t>(n));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
    ctr_.send_failure.fetch_add(1);
    abort(c, true);
    return;
  }
  if (c.to_net.empty() && c.app_fin && !c.net_shut_wr) {
    ::shutdown(c.fd, SHUT_WR);
    c.net_shut_wr = true;
  }
  // window update once enough room has opened up
  if (c.handshake_done && !c.app_fin) {
    const std::uint16_t adv = adv_window(c);
    const std::size_t threshold = std::min<std::size_t>(16384, opts_.pending_cap / 2);
    if (adv > c.last_adv && static_cast<std::size_t>(adv - c.last_adv) >= threshold) send_to_app(c, 0, c.snd_nxt, {});
  }
}

void Engine::read_socket(TcpConn& c) {
  const std::size_t block = mss_;
  for (int i = 0; i < kReadsPerWakeup && !c.net_eof && c.to_app.size() < opts_.pending_cap; ++i) {
    const std::size_t want = std::min(block, opts_.pending_cap - c.to_app.size());
    const ssize_t n = ::recv(c.fd, read_buf_.data(), want, MSG_DONTWAIT);
    if (n > 0) {
      c.to_app.append({read_buf_.data(), static_cast<std::size_t>(n)});
      if (static_cast<std::size_t>(n) < want) break;
      continue;
    }
    if (n == 0) {
      c.net_eof = true;
      break;
    }
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) break;
    abort(c, true);
    return;
  }
}

void Engine::pump_to_app(TcpConn& c, bool force_one) {
  if (!c.handshake_done || c.dead) return;
  while (!c.fin_sent) {
    const std::size_t offset = static_cast<std::size_t>(c.snd_nxt - c.snd_una);
    const std::size_t unsent = c.to_app.size() > offset ? c.to_app.size() - offset : 0;
    if (unsent > 0) {
      const std::size_t room = c.app_wnd > offset ? c.app_wnd - offset : 0;
      std::size_t len = std::min({unsent, static_cast<std::size_t>(c.mss), room});
      if (len == 0) {
        if (!force_one || offset != 0) break;
        len = 1;
      }
      force_one = false;
      send_to_app(c, tcp_flag::PSH, c.snd_nxt, c.to_app.view(offset, len));
      c.snd_nxt += static_cast<std::uint32_t>(len);
      arm_rto(c);
      continue;
    }
    if (c.net_eof) {
      send_to_app(c, tcp_flag::FIN, c.snd_nxt, {});
      c.snd_nxt += 1;
      c.fin_sent = true;
      arm_rto(c);
    }
    break;
  }
  // zero-window persist
  if (c.snd_nxt == c.snd_una && !c.to_app.empty()) arm_rto(c);
}

void Engine::arm_rto(TcpConn& c) {
  if (!c.rto_at) c.rto_at = std::chrono::steady_clock::now() + opts_.rto;
  if (c.rto_scheduled) return;
  c.rto_scheduled = true;
  reactor_->call_after(opts_.rto, [this, id = c.id] {
    on_rto(id);
    reap();
  });
}

void Engine::on_rto(std::uint64_t id) {
  TcpConn* cp = conn_by_id(id);
  if (!cp || cp->dead) return;
  TcpConn& c = *cp;
  c.rto_scheduled = false;
  if (!c.rto_at) return;
  const auto now = std::chrono::steady_clock::now();
  if (now < *c.rto_at) {
    c.rto_scheduled = true;
    reactor_->call_after(*c.rto_at - now, [this, id] {
      on_rto(id);
      reap();
    });
    return;
  }
  c.rto_at.reset();
  if (!c.handshake_done) {
    if (c.synack_sent) {
      ctr_.retransmissions.fetch_add(1);
      send_to_app(c, tcp_flag::SYN, c.iss, {}, true);
      arm_rto(c);
    }
    return;
  }
  if (c.snd_nxt != c.snd_una) {
    ctr_.retransmissions.fetch_add(1);
    c.snd_nxt = c.snd_una;
    c.fin_sent = false;
    pump_to_app(c);
  } else if (!c.to_app.empty()) {
    pump_to_app(c, true);
  }
  update_interest(c);
}

void Engine::on_socket(std::uint64_t id, std::uint32_t events) {
  TcpConn* cp = conn_by_id(id);
  if (!cp || cp->dead) return;
  TcpConn& c = *cp;
  if (events & EPOLLOUT) flush_to_net(c);
  if (!c.dead && (events & (EPOLLIN | EPOLLHUP | EPOLLERR))) {
    const bool was_eof = c.net_eof;
    read_socket(c);
    if (!c.dead && c.net_eof && !was_eof && c.to_app.empty() && !c.handshake_done) {
      // server closed before the app finished the handshake; FIN follows later
    }
  }
  if (c.dead) return;
  pump_to_app(c);
  update_interest(c);
  update_state(c);
}

void Engine::update_interest(TcpConn& c) {
  if (c.dead || c.fd < 0 || !c.connected) return;
  std::uint32_t want = 0;
  if (!c.net_eof && c.to_app.size() < opts_.pending_cap) want |= EPOLLIN;
  if (!c.to_net.empty()) want |= EPOLLOUT;
  if (want == c.interest && c.registered) return;
  if (want == 0) {
    if (c.registered) reactor_->remove(c.fd);
    c.registered = false;
  } else if (!c.registered) {
    reactor_->add(c.fd, want, [this, id = c.id](std::uint32_t ev) {
      on_socket(id, ev);
      reap();
    });
    c.registered = true;
  } else {
    reactor_->modify(c.fd, want);
  }
  c.interest = want;
}

void Engine::update_state(TcpConn& c) {
  if (c.dead || !c.handshake_done) return;
  if (c.app_fin && c.fin_acked && c.net_shut_wr) {
    c.state = TcpState::Closed;
    retire(c);
    return;
  }
  if (c.app_fin && c.fin_sent) {
    c.state = TcpState::LastAck;
  } else if (c.app_fin) {
    c.state = TcpState::CloseWait;
  } else if (c.fin_sent) {
    c.state = TcpState::FinWait;
  } else {
    c.state = TcpState::Established;
  }
}

void Engine::close_socket(TcpConn& c) {
  if (c.fd < 0) return;
  if (reactor_) reactor_->remove(c.fd);
  ::close(c.fd);
  c.fd = -1;
  c.registered = false;
  fd_closed();
  ctr_.tcp_sockets.fetch_sub(1);
}

void Engine::retire(TcpConn& c) {
  close_socket(c);
  c.dead = true;
  c.state = TcpState::Closed;
  remember_closed(flow::FlowRecord{c.key, c.app, c.start_us, c.last_us, c.packets_up, c.packets_down, c.bytes_up,
                                   c.bytes_down, flow::FlowState::Closed});
  tcp_by_id_.erase(c.id);
  auto it = tcp_.find(c.key);
  if (it != tcp_.end() && it->second.get() == &c) {
    graveyard_.push_back(std::move(it->second));
    tcp_.erase(it);
  }
  ctr_.flows_active.fetch_sub(1);
}

void Engine::abort(TcpConn& c, bool rst_app) {
  if (c.dead) return;
  if (rst_app) {
    if (c.synack_sent) {
      send_to_app(c, tcp_flag::RST, c.snd_nxt, {});
    } else {
      send_rst(c.key, 0, c.rcv_nxt.value());
    }
  }
  retire(c);
}

std::vector<telemetry::ConnTiming> Engine::handshake_timings() const {
  std::lock_guard lock(timing_mu_);
  return {timings_.begin(), timings_.end()};
}

std::size_t Engine::reclaim_sockets() {
  return on_loop([this] {
    std::size_t n = 0;
    for (auto& [k, c] : tcp_) {
      if (c->state == TcpState::Closed && c->fd >= 0) {
        close_socket(*c);
        ++n;
      }
    }
    return n;
  });
}

// --- UDP ---

void Engine::udp_out(Inbound& in) {
  const Datagram& d = in.datagram;
  const FlowKey key{IpProto::UDP, d.source(), d.destination()};
  auto it = udp_.find(key);
  if (it == udp_.end()) {
    if (udp_.size() >= opts_.udp_map_limit) {
      auto oldest = std::min_element(udp_.begin(), udp_.end(),
                                     [](const auto& a, const auto& b) { return a.second->last_us < b.second->last_us; });
      evict_udp(oldest->first);
    }
    auto e = std::make_unique<UdpEntry>();
    e->key = key;
    e->start_us = in.ts_us;
    e->last_us = in.ts_us;
    ctr_.flows_total.fetch_add(1);
    ctr_.flows_active.fetch_add(1);
    it = udp_.emplace(key, std::move(e)).first;
    UdpEntry& entry = *it->second;
    if (!hooks_.app_map) {
      entry.attributed = true;
    } else if (auto app = hooks_.app_map->peek(key)) {
      entry.app = *app;
      entry.attributed = true;
    } else {
      std::weak_ptr<Reactor> weak = reactor_;
      hooks_.app_map->lookup_async(key, [this, weak, key](std::string app) {
        if (auto r = weak.lock()) r->post([this, key, app = std::move(app)]() mutable { on_udp_attributed(key, std::move(app)); });
      });
    }
  }
  UdpEntry& e = *it->second;
  e.last_us = in.ts_us;
  if (!e.attributed) {
    if (e.held.size() >= kUdpHeldPerFlow) {
      ctr_.overflow.fetch_add(1);
      return;
    }
    e.held.push_back(std::move(in));
    return;
  }
  udp_forward(e, in);
}

void Engine::on_udp_attributed(const FlowKey& key, std::string app) {
  auto it = udp_.find(key);
  if (it == udp_.end()) return;
  UdpEntry& e = *it->second;
  e.app = std::move(app);
  e.attributed = true;
  auto held = std::move(e.held);
  e.held.clear();
  for (auto& in : held) udp_forward(e, in);
}

bool Engine::ensure_udp_socket() {
  udp_empty_since_us_ = -1;
  if (udp_fd_ >= 0) return true;
  udp_fd_ = net_.open_udp();
  if (udp_fd_ < 0) return false;
  fd_opened();
  ctr_.udp_sockets.store(1);
  reactor_->add(udp_fd_, EPOLLIN, [this](std::uint32_t) { on_udp_readable(); });
  return true;
}

void Engine::udp_forward(UdpEntry& e, Inbound& in) {
  Datagram& d = in.datagram;
  e.packets_up++;
  bool modified = false;
  if (!inspect(d, e.key, e.app, modified)) {
    ctr_.blocked.fetch_add(1);
    return;
  }
  tap_inbound(in, e.key, e.app, modified);
  if (!ensure_udp_socket() || !net_.udp_send(udp_fd_, e.key.dst, d.payload)) {
    ctr_.send_failure.fetch_add(1);
    return;
  }
  e.bytes_up += d.payload.size();
  ctr_.bytes_up.fetch_add(d.payload.size());
  auto& fifo = udp_expect_[e.key.dst];
  fifo.push_back(e.key);
  if (fifo.size() > kUdpExpectPerRemote) fifo.pop_front();
  udp_last_[e.key.dst] = e.key;
}

void Engine::on_udp_readable() {
  const std::size_t max_payload = tun_.mtu() - 28;
  for (int i = 0; i < kUdpReadsPerWakeup && udp_fd_ >= 0; ++i) {
    auto got = net_.udp_recv(udp_fd_, read_buf_);
    if (!got) break;
    const auto [from, n] = *got;
    UdpEntry* e = nullptr;
    if (auto f = udp_expect_.find(from); f != udp_expect_.end()) {
      while (!f->second.empty() && !e) {
        auto it = udp_.find(f->second.front());
        f->second.pop_front();
        if (it != udp_.end()) e = it->second.get();
      }
      if (f->second.empty()) udp_expect_.erase(f);
    }
    if (!e) {
      if (auto l = udp_last_.find(from); l != udp_last_.end()) {
        auto it = udp_.find(l->second);
        if (it != udp_.end()) {
          e = it->second.get();
        } else {
          udp_last_.erase(l);
        }
      }
    }
    if (!e) {
      ctr_.nomapping.fetch_add(1);
      continue;
    }
    if (n > max_payload) {
      ctr_.overflow.fetch_add(1);
      continue;
    }
    e->last_us = now_us();
    e->packets_down++;
    e->bytes_down += n;
    ctr_.bytes_down.fetch_add(n);
    write_tun(build_udp_datagram(from, e->key.src, ip_id_++, {read_buf_.data(), n}), e->key, e->app);
  }
}

void Engine::evict_udp(const FlowKey& key) {
  auto it = udp_.find(key);
  if (it == udp_.end()) return;
  const UdpEntry& e = *it->second;
  remember_closed(flow::FlowRecord{e.key, e.app, e.start_us, e.last_us, e.packets_up, e.packets_down, e.bytes_up,
                                   e.bytes_down, flow::FlowState::Closed});
  udp_.erase(it);
  ctr_.flows_active.fetch_sub(1);
  if (udp_.empty()) udp_empty_since_us_ = now_us();
}

void Engine::close_udp_socket() {
  if (udp_fd_ < 0) return;
  if (reactor_) reactor_->remove(udp_fd_);
  ::close(udp_fd_);
  udp_fd_ = -1;
  fd_closed();
  ctr_.udp_sockets.store(0);
  udp_expect_.clear();
  udp_last_.clear();
  udp_empty_since_us_ = -1;
}

// --- housekeeping ---

void Engine::remember_closed(flow::FlowRecord r) {
  closed_flows_.push_back(std::move(r));
  if (closed_flows_.size() > kClosedHistory) closed_flows_.pop_front();
}

std::size_t Engine::sweep_on_loop() {
  const std::int64_t now = now_us();
  const std::int64_t udp_idle = std::chrono::duration_cast<std::chrono::microseconds>(opts_.udp_idle_timeout).count();
  const std::int64_t half_open =
      std::chrono::duration_cast<std::chrono::microseconds>(opts_.tcp_half_open_timeout).count();
  std::size_t removed = 0;
  std::vector<FlowKey> idle;
  for (auto& [k, e] : udp_) {
    if (now - e->last_us >= udp_idle) idle.push_back(k);
  }
  for (auto& k : idle) evict_udp(k);
  removed += idle.size();
  std::vector<TcpConn*> stale;
  for (auto& [k, c] : tcp_) {
    if (!c->handshake_done && now - c->start_us >= half_open) stale.push_back(c.get());
  }
  for (auto* c : stale) abort(*c, true);
  removed += stale.size();
  if (udp_fd_ >= 0 && udp_.empty()) {
    if (udp_empty_since_us_ < 0) udp_empty_since_us_ = now;
    const auto linger = std::chrono::duration_cast<std::chrono::microseconds>(opts_.udp_linger).count();
    if (now - udp_empty_since_us_ >= linger) close_udp_socket();
  }
  reap();
  return removed;
}

void Engine::schedule_sweep() {
  std::weak_ptr<Reactor> weak = reactor_;
  reactor_->call_after(opts_.sweep_interval, [this, weak] {
    sweep_on_loop();
    if (weak.lock()) schedule_sweep();
  });
}

std::size_t Engine::sweep() {
  return on_loop([this] { return sweep_on_loop(); });
}

std::vector<flow::FlowRecord> Engine::flows() {
  return on_loop([this] {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<flow::FlowRecord> out;
    out.reserve(closed_flows_.size() + tcp_.size() + udp_.size());
    out.insert(out.end(), closed_flows_.begin(), closed_flows_.end());
    for (auto& [k, c] : tcp_) {
      out.push_back(flow::FlowRecord{c->key, c->app, c->start_us, c->last_us, c->packets_up, c->packets_down,
                                     c->bytes_up, c->bytes_down, record_state(c->state)});
    }
    for (auto& [k, e] : udp_) {
      out.push_back(flow::FlowRecord{e->key, e->app, e->start_us, e->last_us, e->packets_up, e->packets_down,
                                     e->bytes_up, e->bytes_down, flow::FlowState::Active});
    }
    snapshot_pause_us_ = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0)
                             .count();
    return out;
  });
}

Counters Engine::counters() const {
  Counters c;
  c.flows_active = ctr_.flows_active.load();
  c.flows_total = ctr_.flows_total.load();
  c.bytes_up = ctr_.bytes_up.load();
  c.bytes_down = ctr_.bytes_down.load();
  c.packets_up = ctr_.packets_up.load();
  c.packets_down = ctr_.packets_down.load();
  c.drops.icmp = ctr_.icmp.load();
  c.drops.protocol = ctr_.protocol.load();
  c.drops.nomapping = ctr_.nomapping.load();
  c.drops.overflow = ctr_.overflow.load();
  c.drops.malformed = ctr_.malformed.load();
  c.drops.budget = ctr_.budget.load();
  c.drops.send_failure = ctr_.send_failure.load();
  c.drops.blocked = ctr_.blocked.load();
  c.fd_in_use = ctr_.fd_in_use.load();
  c.fd_peak = ctr_.fd_peak.load();
  c.tcp_sockets = ctr_.tcp_sockets.load();
  c.udp_sockets = ctr_.udp_sockets.load();
  c.retransmissions = ctr_.retransmissions.load();
  c.connect_failures = ctr_.connect_failures.load();
  return c;
}

}  // namespace antproxy::fwd
