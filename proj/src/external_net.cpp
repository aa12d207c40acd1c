#include "antproxy/external_net.h"

#include <pthread.h>

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/evp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "antproxy/error.h"

namespace antproxy::net {
namespace {

constexpr std::size_t kUdpHeader = 6;  // address framing on SimNet datagram channels
constexpr std::size_t kChunk = 64 * 1024;

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

sockaddr_in to_sockaddr(const Endpoint& e) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(e.ip.value);
  sa.sin_port = htons(e.port);
  return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) { return {Ipv4Addr{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)}; }

void put_endpoint(std::uint8_t* p, const Endpoint& e) {
  p[0] = e.ip.value >> 24;
  p[1] = e.ip.value >> 16;
  p[2] = e.ip.value >> 8;
  p[3] = e.ip.value;
  p[4] = e.port >> 8;
  p[5] = e.port;
}

Endpoint get_endpoint(const std::uint8_t* p) {
  return {Ipv4Addr::from_octets(p[0], p[1], p[2], p[3]), static_cast<std::uint16_t>(p[4] << 8 | p[5])};
}

bool send_all(int fd, const std::uint8_t* data, std::size_t len) {
  while (len > 0) {
    const ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(ByteView data) { EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data.data(), data.size()); }

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

void fill_content(std::uint64_t seed, std::uint64_t offset, std::span<std::uint8_t> out) {
  std::size_t i = 0;
  while (i < out.size()) {
    const std::uint64_t pos = offset + i;
    const std::uint64_t word = splitmix64(seed * 0x100000001b3ULL ^ (pos / 8));
    std::size_t b = pos % 8;
    for (; b < 8 && i < out.size(); ++b, ++i) out[i] = static_cast<std::uint8_t>(word >> (8 * b));
  }
}

std::string content_sha256(std::uint64_t seed, std::uint64_t size) {
  Sha256 h;
  std::vector<std::uint8_t> buf(kChunk);
  for (std::uint64_t off = 0; off < size; off += kChunk) {
    const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(kChunk, size - off));
    fill_content(seed, off, {buf.data(), n});
    h.update({buf.data(), n});
  }
  return h.hex_digest();
}

void SinkLedger::record(const Endpoint& at, SinkResult r) {
  {
    std::lock_guard lock(mu_);
    results_[at].push_back(std::move(r));
  }
  cv_.notify_all();
}

std::vector<SinkResult> SinkLedger::results(const Endpoint& at) const {
  std::lock_guard lock(mu_);
  auto it = results_.find(at);
  return it == results_.end() ? std::vector<SinkResult>{} : it->second;
}

bool SinkLedger::wait_for(const Endpoint& at, std::size_t count, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] {
    auto it = results_.find(at);
    return it != results_.end() && it->second.size() >= count;
  });
}

void run_stream_script(const EndpointScript& script, int fd, const Endpoint& at, SinkLedger& ledger) {
  std::vector<std::uint8_t> buf(kChunk);
  auto drain = [&] {
    while (::recv(fd, buf.data(), buf.size(), 0) > 0) {
    }
  };
  switch (script.kind) {
    case ScriptKind::Echo:
      for (;;) {
        const ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0 || !send_all(fd, buf.data(), static_cast<std::size_t>(n))) break;
      }
      break;
    case ScriptKind::Serve: {
      bool ok = true;
      for (std::uint64_t off = 0; ok && off < script.size; off += kChunk) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(kChunk, script.size - off));
        fill_content(script.seed, off, {buf.data(), n});
        ok = send_all(fd, buf.data(), n);
      }
      ::shutdown(fd, SHUT_WR);
      drain();
      break;
    }
    case ScriptKind::Sink: {
      Sha256 h;
      SinkResult r;
      for (;;) {
        const ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        h.update({buf.data(), static_cast<std::size_t>(n)});
        r.bytes += static_cast<std::uint64_t>(n);
      }
      r.sha256 = h.hex_digest();
      ledger.record(at, std::move(r));
      break;
    }
  }
  ::shutdown(fd, SHUT_RDWR);
}

void set_socket_buffers(int fd, int bytes) {
  ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &bytes, sizeof bytes);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &bytes, sizeof bytes);
}

// --- SimNet ---

SimNet::SimNet(std::uint64_t seed) : SimNet(seed, Link{}) {}

SimNet::SimNet(std::uint64_t seed, Link link) : link_(link), rng_(seed) {}

SimNet::~SimNet() {
  stopping_ = true;
  std::list<Worker> workers;
  std::vector<int> udp;
  {
    std::lock_guard lock(mu_);
    workers.swap(workers_);
    udp.swap(udp_fds_);
  }
  for (auto& w : workers) ::shutdown(w.fd, SHUT_RDWR);
  for (auto& w : workers) {
    w.thread.join();
    ::close(w.fd);
  }
  for (int fd : udp) ::close(fd);
}

void SimNet::register_endpoint(IpProto proto, const Endpoint& at, EndpointScript script) {
  std::lock_guard lock(mu_);
  if (!endpoints_.emplace(std::make_pair(proto, at), script).second) {
    throw Error(Errc::DuplicateEndpoint, "endpoint already registered: " + at.to_string());
  }
}

bool SimNet::has_endpoint(IpProto proto, const Endpoint& at) const {
  std::lock_guard lock(mu_);
  return endpoints_.count({proto, at}) != 0;
}

void SimNet::reap_locked() {
  for (auto it = workers_.begin(); it != workers_.end();) {
    if (it->done->load()) {
      it->thread.join();
      if (it->fd >= 0) ::close(it->fd);
      it = workers_.erase(it);
    } else {
      ++it;
    }
  }
}

std::size_t SimNet::live_stream_workers() {
  std::lock_guard lock(mu_);
  reap_locked();
  return workers_.size();
}

int SimNet::connect_tcp(const Endpoint& dst, Reactor& reactor, ConnectDone done) {
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) return -1;
  set_nonblocking(sv[0]);
  bool ok = false;
  {
    std::lock_guard lock(mu_);
    reap_locked();
    auto it = endpoints_.find({IpProto::TCP, dst});
    if (it != endpoints_.end()) {
      ok = true;
      auto flag = std::make_shared<std::atomic<bool>>(false);
      const int fd = sv[1];
      std::thread t([this, script = it->second, fd, dst, flag] {
        ::pthread_setname_np(::pthread_self(), "simnet-tcp");
        run_stream_script(script, fd, dst, ledger_);
        flag->store(true);
      });
      workers_.push_back(Worker{std::move(t), flag, fd});
    }
  }
  if (ok) {
    tcp_accepted_.fetch_add(1);
  } else {
    ::close(sv[1]);
    tcp_refused_.fetch_add(1);
  }
  reactor.call_after(link_.latency, [done = std::move(done), ok] { done(ok); });
  return sv[0];
}

int SimNet::open_udp() {
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_DGRAM | SOCK_CLOEXEC, 0, sv) != 0) return -1;
  set_nonblocking(sv[0]);
  set_socket_buffers(sv[0], 1 << 20);
  set_socket_buffers(sv[1], 1 << 20);
  std::lock_guard lock(mu_);
  udp_fds_.push_back(sv[1]);
  auto flag = std::make_shared<std::atomic<bool>>(false);
  const int fd = sv[1];
  std::thread t([this, fd, flag] {
    ::pthread_setname_np(::pthread_self(), "simnet-udp");
    udp_loop(fd);
    flag->store(true);
  });
  workers_.push_back(Worker{std::move(t), flag, -1});
  return sv[0];
}

void SimNet::udp_loop(int fd) {
  std::vector<std::uint8_t> buf(kUdpHeader + 65536);
  while (!stopping_.load()) {
    pollfd p{fd, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    const ssize_t n = ::recv(fd, buf.data(), buf.size(), MSG_DONTWAIT);
    if (n < static_cast<ssize_t>(kUdpHeader)) {
      if (n == 0) break;
      continue;
    }
    udp_received_.fetch_add(1);
    const Endpoint dst = get_endpoint(buf.data());
    EndpointScript script;
    bool lost = false;
    {
      std::lock_guard lock(mu_);
      auto it = endpoints_.find({IpProto::UDP, dst});
      if (it == endpoints_.end()) continue;
      script = it->second;
      if (link_.udp_loss > 0) lost = std::uniform_real_distribution<double>(0, 1)(rng_) < link_.udp_loss;
    }
    if (lost || script.kind == ScriptKind::Sink) continue;
    if (link_.latency.count() > 0) std::this_thread::sleep_for(link_.latency);
    if (script.kind == ScriptKind::Serve) {
      const std::size_t size = static_cast<std::size_t>(std::min<std::uint64_t>(script.size, 65507));
      fill_content(script.seed, 0, {buf.data() + kUdpHeader, size});
      if (::send(fd, buf.data(), kUdpHeader + size, MSG_NOSIGNAL) < 0 && errno == ECONNREFUSED) break;
    } else if (::send(fd, buf.data(), static_cast<std::size_t>(n), MSG_NOSIGNAL) < 0 && errno == ECONNREFUSED) {
      break;
    }
  }
}

bool SimNet::udp_send(int fd, const Endpoint& dst, ByteView payload) {
  std::vector<std::uint8_t> frame(kUdpHeader + payload.size());
  put_endpoint(frame.data(), dst);
  if (!payload.empty()) std::memcpy(frame.data() + kUdpHeader, payload.data(), payload.size());
  return ::send(fd, frame.data(), frame.size(), MSG_DONTWAIT | MSG_NOSIGNAL) == static_cast<ssize_t>(frame.size());
}

std::optional<std::pair<Endpoint, std::size_t>> SimNet::udp_recv(int fd, std::span<std::uint8_t> buffer) {
  std::uint8_t header[kUdpHeader];
  iovec iov[2] = {{header, kUdpHeader}, {buffer.data(), buffer.size()}};
  msghdr msg{};
  msg.msg_iov = iov;
  msg.msg_iovlen = 2;
  const ssize_t n = ::recvmsg(fd, &msg, MSG_DONTWAIT);
  if (n < static_cast<ssize_t>(kUdpHeader)) return std::nullopt;
  return std::make_pair(get_endpoint(header), static_cast<std::size_t>(n) - kUdpHeader);
}

void SimNet::inject_udp(const Endpoint& from, ByteView payload) {
  std::vector<std::uint8_t> frame(kUdpHeader + payload.size());
  put_endpoint(frame.data(), from);
  if (!payload.empty()) std::memcpy(frame.data() + kUdpHeader, payload.data(), payload.size());
  std::lock_guard lock(mu_);
  for (int fd : udp_fds_) ::send(fd, frame.data(), frame.size(), MSG_DONTWAIT | MSG_NOSIGNAL);
}

// --- OsNet ---

OsNet::OsNet(std::map<Endpoint, Endpoint> remap) {
  for (const auto& [v, r] : remap) add_route(v, r);
}

void OsNet::add_route(const Endpoint& virtual_ep, const Endpoint& real_ep) {
  std::lock_guard lock(mu_);
  remap_[virtual_ep] = real_ep;
  reverse_[real_ep] = virtual_ep;
}

Endpoint OsNet::forward(const Endpoint& e) const {
  std::lock_guard lock(mu_);
  auto it = remap_.find(e);
  return it == remap_.end() ? e : it->second;
}

Endpoint OsNet::backward(const Endpoint& e) const {
  std::lock_guard lock(mu_);
  auto it = reverse_.find(e);
  return it == reverse_.end() ? e : it->second;
}

int OsNet::connect_tcp(const Endpoint& dst, Reactor& reactor, ConnectDone done) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  if (fd < 0) return -1;
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  const sockaddr_in sa = to_sockaddr(forward(dst));
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0 && errno != EINPROGRESS) {
    reactor.call_after(std::chrono::microseconds(0), [done = std::move(done)] { done(false); });
    return fd;
  }
  reactor.add(fd, EPOLLOUT | EPOLLERR | EPOLLHUP, [fd, &reactor, done = std::move(done)](std::uint32_t) {
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    auto cb = done;
    reactor.remove(fd);
    cb(err == 0);
  });
  return fd;
}

int OsNet::open_udp() {
  const int fd = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  if (fd < 0) return -1;
  set_socket_buffers(fd, 1 << 20);
  sockaddr_in sa = to_sockaddr({Ipv4Addr{0}, 0});
  ::bind(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
  return fd;
}

bool OsNet::udp_send(int fd, const Endpoint& dst, ByteView payload) {
  const sockaddr_in sa = to_sockaddr(forward(dst));
  return ::sendto(fd, payload.data(), payload.size(), MSG_DONTWAIT | MSG_NOSIGNAL, reinterpret_cast<const sockaddr*>(&sa),
                  sizeof sa) == static_cast<ssize_t>(payload.size());
}

std::optional<std::pair<Endpoint, std::size_t>> OsNet::udp_recv(int fd, std::span<std::uint8_t> buffer) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  const ssize_t n = ::recvfrom(fd, buffer.data(), buffer.size(), MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&sa), &len);
  if (n < 0) return std::nullopt;
  return std::make_pair(backward(from_sockaddr(sa)), static_cast<std::size_t>(n));
}

// --- loopback hosting ---

LoopbackServer::LoopbackServer(EndpointScript script, SinkLedger& ledger, const Endpoint& ledger_key)
    : script_(script), ledger_(ledger), key_(ledger_key) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in sa = to_sockaddr({Ipv4Addr::from_octets(127, 0, 0, 1), 0});
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0 || ::listen(listen_fd_, 1024) != 0) {
    ::close(listen_fd_);
    throw Error(Errc::NetworkFailure, std::string("loopback listen: ") + std::strerror(errno));
  }
  socklen_t len = sizeof sa;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&sa), &len);
  address_ = from_sockaddr(sa);
  acceptor_ = std::thread([this] { accept_loop(); });
}

LoopbackServer::~LoopbackServer() {
  stopping_ = true;
  ::shutdown(listen_fd_, SHUT_RDWR);
  acceptor_.join();
  ::close(listen_fd_);
  {
    std::lock_guard lock(mu_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : conns_) t.join();
}

void LoopbackServer::accept_loop() {
  while (!stopping_.load()) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      break;
    }
    accepted_.fetch_add(1);
    std::lock_guard lock(mu_);
    open_fds_.insert(fd);
    conns_.emplace_back([this, fd] {
      run_stream_script(script_, fd, key_, ledger_);
      std::lock_guard l(mu_);
      open_fds_.erase(fd);
      ::close(fd);
    });
  }
}

LoopbackUdpEcho::LoopbackUdpEcho() {
  fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0);
  sockaddr_in sa = to_sockaddr({Ipv4Addr::from_octets(127, 0, 0, 1), 0});
  ::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
  socklen_t len = sizeof sa;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
  address_ = from_sockaddr(sa);
  thread_ = std::thread([this] {
    std::vector<std::uint8_t> buf(65536);
    while (!stopping_.load()) {
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      sockaddr_in from{};
      socklen_t flen = sizeof from;
      const ssize_t n = ::recvfrom(fd_, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &flen);
      if (n >= 0) ::sendto(fd_, buf.data(), static_cast<std::size_t>(n), 0, reinterpret_cast<sockaddr*>(&from), flen);
    }
  });
}

LoopbackUdpEcho::~LoopbackUdpEcho() {
  stopping_ = true;
  thread_.join();
  ::close(fd_);
}

}  // namespace antproxy::net
