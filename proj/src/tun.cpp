#include "antproxy/tun.h"

#include <fcntl.h>
#include <linux/if.h>
#include <linux/if_tun.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <iterator>
#include <thread>

#include "antproxy/error.h"

namespace antproxy {

SimTun::SimTun(std::size_t mtu, std::size_t inject_capacity) : mtu_(mtu), inject_capacity_(inject_capacity) {
  if (mtu < 576) throw Error(Errc::MtuTooSmall, "mtu below 576");
}

std::size_t SimTun::read(std::span<std::uint8_t> buffer) {
  std::unique_lock lock(mu_);
  to_engine_cv_.wait(lock, [&] { return closed_ || interrupted_ || !to_engine_.empty(); });
  if (closed_) throw Error(Errc::PortClosed, "tun closed");
  if (to_engine_.empty()) {
    interrupted_ = false;
    return 0;
  }
  Bytes d = std::move(to_engine_.front());
  to_engine_.pop_front();
  lock.unlock();
  space_cv_.notify_one();
  if (d.size() > buffer.size()) throw Error(Errc::InvalidArgument, "read buffer smaller than datagram");
  std::memcpy(buffer.data(), d.data(), d.size());
  return d.size();
}

void SimTun::write(ByteView datagram) {
  if (datagram.size() > mtu_) throw Error(Errc::OversizeDatagram, "datagram exceeds mtu");
  {
    std::lock_guard lock(mu_);
    if (closed_) throw Error(Errc::PortClosed, "tun closed");
    to_app_.emplace_back(datagram.begin(), datagram.end());
    ++written_;
  }
  to_app_cv_.notify_one();
}

void SimTun::interrupt() {
  {
    std::lock_guard lock(mu_);
    interrupted_ = true;
  }
  to_engine_cv_.notify_all();
}

void SimTun::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  to_engine_cv_.notify_all();
  to_app_cv_.notify_all();
  space_cv_.notify_all();
}

bool SimTun::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

void SimTun::inject(ByteView datagram) {
  if (datagram.size() > mtu_) throw Error(Errc::OversizeDatagram, "datagram exceeds mtu");
  std::unique_lock lock(mu_);
  space_cv_.wait(lock, [&] { return closed_ || to_engine_.size() < inject_capacity_; });
  if (closed_) throw Error(Errc::PortClosed, "tun closed");
  to_engine_.emplace_back(datagram.begin(), datagram.end());
  ++injected_;
  lock.unlock();
  to_engine_cv_.notify_one();
}

std::optional<Bytes> SimTun::receive(std::chrono::steady_clock::time_point deadline) {
  std::unique_lock lock(mu_);
  to_app_cv_.wait_until(lock, deadline, [&] { return closed_ || receiver_woken_ || !to_app_.empty(); });
  if (!to_app_.empty()) {
    Bytes d = std::move(to_app_.front());
    to_app_.pop_front();
    return d;
  }
  if (closed_) throw Error(Errc::PortClosed, "tun closed");
  receiver_woken_ = false;
  return std::nullopt;
}

void SimTun::wake_receiver() {
  {
    std::lock_guard lock(mu_);
    receiver_woken_ = true;
  }
  to_app_cv_.notify_all();
}

std::uint64_t SimTun::injected() const {
  std::lock_guard lock(mu_);
  return injected_;
}

std::uint64_t SimTun::written() const {
  std::lock_guard lock(mu_);
  return written_;
}

OsTun::OsTun(const std::string& name, std::size_t mtu) : name_(name), mtu_(mtu) {
  fd_ = ::open("/dev/net/tun", O_RDWR | O_CLOEXEC);
  if (fd_ < 0) throw Error(Errc::TunUnavailable, std::string("/dev/net/tun: ") + std::strerror(errno));
  ifreq ifr{};
  ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
  std::strncpy(ifr.ifr_name, name.c_str(), IFNAMSIZ - 1);
  if (::ioctl(fd_, TUNSETIFF, &ifr) != 0) {
    const int err = errno;
    ::close(fd_);
    throw Error(Errc::TunUnavailable, std::string("TUNSETIFF: ") + std::strerror(err));
  }
  name_ = ifr.ifr_name;
  const int sock = ::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0);
  if (sock >= 0) {
    ifreq m{};
    std::strncpy(m.ifr_name, name_.c_str(), IFNAMSIZ - 1);
    m.ifr_mtu = static_cast<int>(mtu);
    ::ioctl(sock, SIOCSIFMTU, &m);
    ::close(sock);
  }
  wake_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
}

OsTun::~OsTun() { close(); }

std::size_t OsTun::read(std::span<std::uint8_t> buffer) {
  for (;;) {
    if (fd_ < 0) throw Error(Errc::PortClosed, "tun closed");
    pollfd fds[2] = {{fd_, POLLIN, 0}, {wake_fd_, POLLIN, 0}};
    if (::poll(fds, 2, -1) < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::IoFailure, std::strerror(errno));
    }
    if (fds[1].revents & POLLIN) {
      std::uint64_t v;
      [[maybe_unused]] auto n = ::read(wake_fd_, &v, sizeof v);
      return 0;
    }
    const ssize_t n = ::read(fd_, buffer.data(), buffer.size());
    if (n > 0) return static_cast<std::size_t>(n);
    if (n < 0 && (errno == EAGAIN || errno == EINTR)) continue;
    throw Error(Errc::PortClosed, "tun read failed");
  }
}

void OsTun::write(ByteView datagram) {
  if (datagram.size() > mtu_) throw Error(Errc::OversizeDatagram, "datagram exceeds mtu");
  if (fd_ < 0) throw Error(Errc::PortClosed, "tun closed");
  if (::write(fd_, datagram.data(), datagram.size()) < 0) throw Error(Errc::IoFailure, std::strerror(errno));
}

void OsTun::interrupt() {
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof one);
}

void OsTun::close() {
  if (fd_ >= 0) ::close(fd_);
  if (wake_fd_ >= 0) ::close(wake_fd_);
  fd_ = wake_fd_ = -1;
}

namespace {

std::uint32_t rd32(const Bytes& b, std::size_t o, bool swap) {
  std::uint32_t v;
  std::memcpy(&v, &b[o], 4);
  return swap ? __builtin_bswap32(v) : v;
}

std::uint16_t rd16(const Bytes& b, std::size_t o, bool swap) {
  std::uint16_t v;
  std::memcpy(&v, &b[o], 2);
  return swap ? __builtin_bswap16(v) : v;
}

void push_frame(std::vector<CapturedDatagram>& out, std::uint32_t linktype, const std::uint8_t* data,
                std::size_t len, std::int64_t ts) {
  std::size_t skip = 0;
  if (linktype == 1) {
    if (len < 14 || data[12] != 0x08 || data[13] != 0x00) return;
    skip = 14;
  } else if (linktype != 101 && linktype != 228) {
    return;
  }
  if (len <= skip || (data[skip] >> 4) != 4) return;
  out.push_back({ts, Bytes(data + skip, data + len), {}});
}

}  // namespace

std::vector<CapturedDatagram> read_capture_datagrams(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  const Bytes buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 24) throw Error(Errc::MalformedHeader, "capture too short");
  std::vector<CapturedDatagram> out;
  std::uint32_t magic;
  std::memcpy(&magic, buf.data(), 4);

  if (magic == 0xA1B2C3D4 || magic == 0xD4C3B2A1 || magic == 0xA1B23C4D || magic == 0x4D3CB2A1) {
    const bool swap = magic == 0xD4C3B2A1 || magic == 0x4D3CB2A1;
    const bool nanos = magic == 0xA1B23C4D || magic == 0x4D3CB2A1;
    const std::uint32_t linktype = rd32(buf, 20, swap);
    std::size_t off = 24;
    while (off + 16 <= buf.size()) {
      const std::int64_t sec = rd32(buf, off, swap);
      const std::int64_t frac = rd32(buf, off + 4, swap);
      const std::uint32_t incl = rd32(buf, off + 8, swap);
      if (off + 16 + incl > buf.size()) break;
      push_frame(out, linktype, &buf[off + 16], incl, sec * 1'000'000 + (nanos ? frac / 1000 : frac));
      off += 16 + incl;
    }
    return out;
  }

  if (magic != 0x0A0D0D0A) throw Error(Errc::MalformedHeader, "not a pcap or pcapng file");
  bool swap = false;
  std::vector<std::uint32_t> linktypes;
  std::size_t off = 0;
  while (off + 12 <= buf.size()) {
    std::uint32_t type = rd32(buf, off, false);
    if (type == 0x0A0D0D0A) {
      swap = rd32(buf, off + 8, false) != 0x1A2B3C4D;
      linktypes.clear();
    }
    const std::uint32_t len = rd32(buf, off + 4, swap);
    if (len < 12 || len % 4 || off + len > buf.size()) break;
    type = rd32(buf, off, swap);
    if (type == 1) {
      linktypes.push_back(rd16(buf, off + 8, swap));
    } else if (type == 6 && len >= 32) {
      const std::uint32_t iface = rd32(buf, off + 8, swap);
      const std::uint64_t ts = (std::uint64_t{rd32(buf, off + 12, swap)} << 32) | rd32(buf, off + 16, swap);
      const std::uint32_t caplen = rd32(buf, off + 20, swap);
      if (iface < linktypes.size() && 28 + caplen <= len) {
        const std::size_t before = out.size();
        push_frame(out, linktypes[iface], &buf[off + 28], caplen, static_cast<std::int64_t>(ts));
        if (out.size() > before) {
          std::size_t o = off + 28 + ((caplen + 3u) & ~3u);
          while (o + 4 <= off + len - 4) {
            const std::uint16_t code = rd16(buf, o, swap);
            const std::uint16_t olen = rd16(buf, o + 2, swap);
            if (code == 0 || o + 4 + olen > off + len - 4) break;
            if (code == 1) out.back().comments.emplace_back(reinterpret_cast<const char*>(&buf[o + 4]), olen);
            o += 4 + ((olen + 3u) & ~3u);
          }
        }
      }
    }
    off += len;
  }
  return out;
}

std::size_t replay_into(SimTun& tun, std::span<const CapturedDatagram> packets, double speed) {
  std::size_t n = 0;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& p : packets) {
    if (speed > 0 && !packets.empty()) {
      const double offset_us = static_cast<double>(p.timestamp_us - packets.front().timestamp_us) / speed;
      std::this_thread::sleep_until(start + std::chrono::microseconds(static_cast<std::int64_t>(offset_us)));
    }
    if (p.datagram.size() > tun.mtu()) continue;
    tun.inject(p.datagram);
    ++n;
  }
  return n;
}

}  // namespace antproxy
