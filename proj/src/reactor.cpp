#include "antproxy/reactor.h"

#include <sys/eventfd.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "antproxy/error.h"

namespace antproxy {

namespace {
constexpr std::uint64_t kWakeToken = 0;
}

Reactor::Reactor() : loop_thread_(std::this_thread::get_id()) {
  epfd_ = ::epoll_create1(EPOLL_CLOEXEC);
  wakefd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
  if (epfd_ < 0 || wakefd_ < 0) throw Error(Errc::IoFailure, std::string("reactor setup: ") + std::strerror(errno));
  epoll_event ev{};
  ev.events = EPOLLIN;
  ev.data.u64 = kWakeToken;
  ::epoll_ctl(epfd_, EPOLL_CTL_ADD, wakefd_, &ev);
}

Reactor::~Reactor() {
  ::close(wakefd_);
  ::close(epfd_);
}

void Reactor::add(int fd, std::uint32_t events, Handler handler) {
  const std::uint64_t token = next_token_++;
  epoll_event ev{};
  ev.events = events;
  ev.data.u64 = token;
  if (::epoll_ctl(epfd_, EPOLL_CTL_ADD, fd, &ev) != 0) {
    throw Error(Errc::IoFailure, std::string("epoll add: ") + std::strerror(errno));
  }
  fds_[fd] = Watch{token, std::make_shared<Handler>(std::move(handler))};
  tokens_[token] = fd;
}

void Reactor::modify(int fd, std::uint32_t events) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) return;
  epoll_event ev{};
  ev.events = events;
  ev.data.u64 = it->second.token;
  ::epoll_ctl(epfd_, EPOLL_CTL_MOD, fd, &ev);
}

void Reactor::remove(int fd) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) return;
  ::epoll_ctl(epfd_, EPOLL_CTL_DEL, fd, nullptr);
  tokens_.erase(it->second.token);
  fds_.erase(it);
}

Reactor::TimerId Reactor::call_after(Clock::duration delay, std::function<void()> fn) {
  const TimerId id = next_timer_++;
  const auto when = Clock::now() + delay;
  timer_order_.emplace(when, id);
  timers_.emplace(id, std::make_pair(when, std::move(fn)));
  return id;
}

void Reactor::cancel(TimerId id) {
  auto it = timers_.find(id);
  if (it == timers_.end()) return;
  auto [lo, hi] = timer_order_.equal_range(it->second.first);
  for (auto o = lo; o != hi; ++o) {
    if (o->second == id) {
      timer_order_.erase(o);
      break;
    }
  }
  timers_.erase(it);
}

void Reactor::post(std::function<void()> fn) {
  {
    std::lock_guard lock(post_mu_);
    posted_.push_back(std::move(fn));
  }
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wakefd_, &one, sizeof one);
}

void Reactor::drain_posted() {
  std::uint64_t count;
  while (::read(wakefd_, &count, sizeof count) > 0) {
  }
  std::vector<std::function<void()>> batch;
  {
    std::lock_guard lock(post_mu_);
    batch.swap(posted_);
  }
  for (auto& fn : batch) fn();
}

void Reactor::fire_timers() {
  const auto now = Clock::now();
  while (!timer_order_.empty() && timer_order_.begin()->first <= now) {
    const TimerId id = timer_order_.begin()->second;
    timer_order_.erase(timer_order_.begin());
    auto it = timers_.find(id);
    if (it == timers_.end()) continue;
    auto fn = std::move(it->second.second);
    timers_.erase(it);
    fn();
  }
}

void Reactor::run_once(Clock::duration max_wait) {
  int timeout_ms = static_cast<int>(std::chrono::ceil<std::chrono::milliseconds>(max_wait).count());
  if (!timer_order_.empty()) {
    const auto until = timer_order_.begin()->first - Clock::now();
    timeout_ms = std::min<int>(timeout_ms, std::max<int>(0, std::chrono::ceil<std::chrono::milliseconds>(until).count()));
  }
  epoll_event events[64];
  const int n = ::epoll_wait(epfd_, events, 64, timeout_ms);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t token = events[i].data.u64;
    if (token == kWakeToken) {
      drain_posted();
      continue;
    }
    auto t = tokens_.find(token);
    if (t == tokens_.end()) continue;  // removed earlier in this batch
    auto w = fds_.find(t->second);
    auto h = w->second.handler;
    (*h)(events[i].events);
  }
  fire_timers();
}

void Reactor::run() {
  loop_thread_ = std::this_thread::get_id();
  while (!stop_.load(std::memory_order_relaxed)) run_once(std::chrono::seconds(1));
}

void Reactor::stop() {
  stop_ = true;
  post([] {});
}

}  // namespace antproxy
