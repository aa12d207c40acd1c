#include "antproxy/app_stack.h"

#include <vector>

#include "antproxy/error.h"

namespace antproxy::net {

using Clock = std::chrono::steady_clock;

AppStack::AppStack(SimTun& tun, std::shared_ptr<flow::OracleRegistry> oracle)
    : AppStack(tun, std::move(oracle), Options{}) {}

AppStack::AppStack(SimTun& tun, std::shared_ptr<flow::OracleRegistry> oracle, Options opts)
    : tun_(tun), oracle_(std::move(oracle)), opts_(opts), next_port_(opts.first_port) {
  thread_ = std::thread([this] { loop(); });
}

AppStack::~AppStack() {
  stopping_ = true;
  tun_.wake_receiver();
  thread_.join();
}

std::size_t AppStack::open_connections() const {
  std::lock_guard lock(mu_);
  return tcp_.size();
}

std::uint16_t AppStack::allocate_port() {
  for (;;) {
    const std::uint16_t p = next_port_;
    next_port_ = next_port_ >= 64999 ? opts_.first_port : static_cast<std::uint16_t>(next_port_ + 1);
    if (!tcp_.count(p) && !udp_.count(p)) return p;
  }
}

void AppStack::release(std::uint16_t port) {
  std::lock_guard lock(mu_);
  tcp_.erase(port);
  udp_.erase(port);
}

std::shared_ptr<AppStack::TcpSocket> AppStack::connect(const Endpoint& dst, const std::string& app_id,
                                                       std::chrono::milliseconds timeout) {
  std::shared_ptr<TcpSocket> s;
  {
    std::lock_guard lock(mu_);
    const Endpoint local{opts_.local_ip, allocate_port()};
    s = std::make_shared<TcpSocket>(*this, local, dst);
    tcp_[local.port] = s;
  }
  if (oracle_) oracle_->assign(s->local(), app_id);
  {
    std::unique_lock lock(s->mu_);
    s->syn_at_ = Clock::now();
    s->rto_at_ = s->syn_at_ + opts_.rto;
    s->emit(tcp_flag::SYN, s->iss_, {}, mss_for_mtu(tun_.mtu()));
    s->cv_.wait_for(lock, timeout, [&] { return s->state_ != TcpSocket::State::SynSent; });
    if (s->state_ != TcpSocket::State::Established) {
      if (s->state_ == TcpSocket::State::SynSent) s->emit(tcp_flag::RST, s->iss_ + 1, {});
      s->state_ = TcpSocket::State::Reset;
      lock.unlock();
      release(s->local().port);
      throw Error(Errc::NetworkFailure, "connect to " + dst.to_string() + " failed");
    }
  }
  return s;
}

std::shared_ptr<AppStack::UdpSocket> AppStack::open_udp(const std::string& app_id) {
  std::shared_ptr<UdpSocket> s;
  {
    std::lock_guard lock(mu_);
    s = std::make_shared<UdpSocket>(*this, Endpoint{opts_.local_ip, allocate_port()});
    udp_[s->local().port] = s;
  }
  if (oracle_) oracle_->assign(s->local(), app_id);
  return s;
}

void AppStack::loop() {
  auto next_timer_scan = Clock::now();
  while (!stopping_.load()) {
    std::optional<Bytes> raw;
    try {
      raw = tun_.receive(Clock::now() + std::chrono::milliseconds(10));
    } catch (const Error&) {
      break;
    }
    if (raw) {
      try {
        Datagram d = parse_datagram(*raw);
        handle(d);
      } catch (const Error&) {
        bad_datagrams_.fetch_add(1);
      }
    }
    const auto now = Clock::now();
    if (now < next_timer_scan) continue;
    next_timer_scan = now + std::chrono::milliseconds(5);
    std::vector<std::shared_ptr<TcpSocket>> conns;
    {
      std::lock_guard lock(mu_);
      for (auto& [port, s] : tcp_) conns.push_back(s);
    }
    for (auto& s : conns) {
      s->on_timer(now);
      const auto st = s->state();
      if (st == TcpSocket::State::Closed || st == TcpSocket::State::Reset) release(s->local().port);
    }
  }
}

void AppStack::handle(Datagram& d) {
  const Endpoint dst = d.destination();
  if (d.is_tcp()) {
    std::shared_ptr<TcpSocket> s;
    {
      std::lock_guard lock(mu_);
      auto it = tcp_.find(dst.port);
      if (it != tcp_.end() && it->second->remote() == d.source()) s = it->second;
    }
    if (s) s->on_segment(d);
    return;
  }
  std::shared_ptr<UdpSocket> s;
  {
    std::lock_guard lock(mu_);
    auto it = udp_.find(dst.port);
    if (it != udp_.end()) s = it->second;
  }
  if (!s) return;
  {
    std::lock_guard lock(s->mu_);
    s->inbox_.emplace_back(d.source(), std::move(d.payload));
  }
  s->cv_.notify_all();
}

// --- TCP ---

AppStack::TcpSocket::TcpSocket(AppStack& stack, Endpoint local, Endpoint remote)
    : stack_(stack), local_(local), remote_(remote), iss_(0x10000000u + local.port * 7919u) {
  snd_una_ = iss_;
  snd_nxt_ = iss_ + 1;
}

AppStack::TcpSocket::State AppStack::TcpSocket::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::uint16_t AppStack::TcpSocket::peer_mss() const {
  std::lock_guard lock(mu_);
  return peer_mss_;
}

std::chrono::microseconds AppStack::TcpSocket::handshake_time() const {
  std::lock_guard lock(mu_);
  return handshake_;
}

std::uint64_t AppStack::TcpSocket::bytes_received() const {
  std::lock_guard lock(mu_);
  return received_;
}

std::uint16_t AppStack::TcpSocket::adv_window_locked() const {
  const std::size_t cap = stack_.opts_.rcv_window;
  const std::size_t used = rcvbuf_.size();
  return static_cast<std::uint16_t>(std::min<std::size_t>(used >= cap ? 0 : cap - used, 65535));
}

void AppStack::TcpSocket::emit(std::uint8_t flags, Seq32 seq, ByteView payload, std::optional<std::uint16_t> mss) {
  TcpSegmentSpec spec;
  spec.src = local_;
  spec.dst = remote_;
  spec.seq = seq.value();
  spec.flags = flags;
  if (state_ != State::SynSent) {
    spec.flags |= tcp_flag::ACK;
    spec.ack = rcv_nxt_.value();
  }
  if (flags & tcp_flag::RST) spec.flags = tcp_flag::RST | (spec.flags & tcp_flag::ACK);
  spec.window = adv_window_locked();
  spec.ip_id = stack_.ip_id_.fetch_add(1);
  spec.mss = mss;
  last_adv_wnd_ = spec.window;
  try {
    stack_.tun_.inject(build_tcp_datagram(spec, payload));
  } catch (const Error&) {
    // tun gone; the stack loop is shutting down
  }
}

void AppStack::TcpSocket::pump_locked(bool force_one) {
  if (state_ != State::Established) return;
  while (!fin_sent_) {
    const std::size_t offset = static_cast<std::size_t>(snd_nxt_ - snd_una_);
    const std::size_t unsent = sndbuf_.size() > offset ? sndbuf_.size() - offset : 0;
    const std::size_t room = snd_wnd_ > offset ? snd_wnd_ - offset : 0;
    if (unsent > 0) {
      std::size_t len = std::min({unsent, static_cast<std::size_t>(peer_mss_), room});
      if (len == 0) {
        if (!force_one || offset != 0) break;
        len = 1;
      }
      force_one = false;
      const auto bytes = sndbuf_.view(offset, len);
      emit(tcp_flag::PSH, snd_nxt_, bytes);
      snd_nxt_ += static_cast<std::uint32_t>(len);
      if (!rto_at_) rto_at_ = Clock::now() + stack_.opts_.rto;
      continue;
    }
    if (fin_queued_) {
      emit(tcp_flag::FIN, snd_nxt_, {});
      snd_nxt_ += 1;
      fin_sent_ = true;
      if (!rto_at_) rto_at_ = Clock::now() + stack_.opts_.rto;
    }
    break;
  }
  // zero-window persist
  if (!rto_at_ && snd_nxt_ == snd_una_ && !sndbuf_.empty()) rto_at_ = Clock::now() + stack_.opts_.rto;
}

bool AppStack::TcpSocket::finished_locked() const { return fin_acked_ && peer_fin_; }

void AppStack::TcpSocket::on_segment(const Datagram& d) {
  std::lock_guard lock(mu_);
  const TcpHeader& t = d.tcp();
  if (t.flags & tcp_flag::RST) {
    state_ = State::Reset;
    cv_.notify_all();
    return;
  }
  const auto now = Clock::now();
  if (state_ == State::SynSent) {
    if ((t.flags & tcp_flag::SYN) && (t.flags & tcp_flag::ACK) && Seq32(t.ack) == iss_ + 1) {
      rcv_nxt_ = Seq32(t.seq) + 1;
      snd_una_ = snd_nxt_ = iss_ + 1;
      snd_wnd_ = t.window;
      peer_mss_ = t.mss().value_or(536);
      state_ = State::Established;
      handshake_ = std::chrono::duration_cast<std::chrono::microseconds>(now - syn_at_);
      rto_at_.reset();
      emit(0, snd_nxt_, {});
      cv_.notify_all();
      pump_locked();
    }
    return;
  }
  if (state_ != State::Established) return;

  if (t.flags & tcp_flag::ACK) {
    const Seq32 ack(t.ack);
    if (ack.after(snd_una_) && ack.at_or_before(snd_nxt_)) {
      const auto acked = static_cast<std::size_t>(ack - snd_una_);
      sndbuf_.consume(std::min(acked, sndbuf_.size()));
      if (fin_sent_ && ack == snd_nxt_) fin_acked_ = true;
      snd_una_ = ack;
      rto_at_.reset();
      if (snd_nxt_ != snd_una_) rto_at_ = now + stack_.opts_.rto;
      cv_.notify_all();
    }
    if (ack.at_or_after(snd_una_)) snd_wnd_ = t.window;
  }

  bool need_ack = false;
  const Seq32 seq(t.seq);
  const std::size_t len = d.payload.size();
  if (len > 0) {
    const std::size_t space = stack_.opts_.rcv_window - std::min(stack_.opts_.rcv_window, rcvbuf_.size());
    if (seq == rcv_nxt_ && len <= space) {
      rcvbuf_.append(d.payload);
      rcv_nxt_ += static_cast<std::uint32_t>(len);
      received_ += len;
      cv_.notify_all();
    }
    need_ack = true;
  }
  if (t.flags & tcp_flag::FIN) {
    if (seq + static_cast<std::uint32_t>(len) == rcv_nxt_ && !peer_fin_) {
      rcv_nxt_ += 1;
      peer_fin_ = true;
      cv_.notify_all();
    }
    need_ack = true;
  }
  if (need_ack) emit(0, snd_nxt_, {});
  pump_locked();
  if (finished_locked()) {
    state_ = State::Closed;
    cv_.notify_all();
  }
}

void AppStack::TcpSocket::on_timer(Clock::time_point now) {
  std::lock_guard lock(mu_);
  if (!rto_at_ || now < *rto_at_) return;
  if (state_ == State::SynSent) {
    stack_.retransmissions_.fetch_add(1);
    emit(tcp_flag::SYN, iss_, {}, mss_for_mtu(stack_.tun_.mtu()));
    rto_at_ = now + stack_.opts_.rto;
    return;
  }
  if (state_ != State::Established) return;
  rto_at_.reset();
  if (snd_nxt_ != snd_una_) {
    stack_.retransmissions_.fetch_add(1);
    snd_nxt_ = snd_una_;
    fin_sent_ = false;
    pump_locked();
  } else if (!sndbuf_.empty()) {
    pump_locked(true);
  }
}

void AppStack::TcpSocket::send_all(ByteView data) {
  std::unique_lock lock(mu_);
  while (!data.empty()) {
    cv_.wait(lock, [&] { return state_ != State::Established || sndbuf_.size() < stack_.opts_.snd_buffer; });
    if (state_ != State::Established || fin_queued_) throw Error(Errc::NotConnected, "connection not open");
    const std::size_t n = std::min(data.size(), stack_.opts_.snd_buffer - sndbuf_.size());
    sndbuf_.append(data.first(n));
    data = data.subspan(n);
    pump_locked();
  }
}

std::size_t AppStack::TcpSocket::recv(std::span<std::uint8_t> out) {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return !rcvbuf_.empty() || peer_fin_ || state_ == State::Reset; });
  if (rcvbuf_.empty()) {
    if (state_ == State::Reset && !peer_fin_) throw Error(Errc::NotConnected, "connection reset");
    return 0;
  }
  const std::size_t n = rcvbuf_.peek(0, out);
  rcvbuf_.consume(n);
  const std::uint16_t adv = adv_window_locked();
  const std::size_t threshold = std::min<std::size_t>(stack_.opts_.rcv_window / 2, 16384);
  if (state_ == State::Established && adv > last_adv_wnd_ && static_cast<std::size_t>(adv - last_adv_wnd_) >= threshold) {
    emit(0, snd_nxt_, {});
  }
  return n;
}

void AppStack::TcpSocket::close() {
  std::lock_guard lock(mu_);
  if (state_ != State::Established || fin_queued_) return;
  fin_queued_ = true;
  pump_locked();
}

void AppStack::TcpSocket::abort() {
  std::lock_guard lock(mu_);
  if (state_ == State::Established) emit(tcp_flag::RST, snd_nxt_, {});
  state_ = State::Reset;
  cv_.notify_all();
}

bool AppStack::TcpSocket::wait_closed(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return state_ == State::Closed || state_ == State::Reset; });
}

// --- UDP ---

AppStack::UdpSocket::UdpSocket(AppStack& stack, Endpoint local) : stack_(stack), local_(local) {}

void AppStack::UdpSocket::send_to(const Endpoint& dst, ByteView payload) {
  stack_.tun_.inject(build_udp_datagram(local_, dst, stack_.ip_id_.fetch_add(1), payload));
}

std::optional<std::pair<Endpoint, Bytes>> AppStack::UdpSocket::recv(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_for(lock, timeout, [&] { return !inbox_.empty(); })) return std::nullopt;
  auto front = std::move(inbox_.front());
  inbox_.pop_front();
  return front;
}

void AppStack::UdpSocket::close() { stack_.release(local_.port); }

}  // namespace antproxy::net
