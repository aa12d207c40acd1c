#pragma once

#include <sys/epoll.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <vector>

namespace antproxy {

/// Single-threaded readiness loop over epoll. Everything except post() and
/// stop() must be called from the loop thread (or before run()).
class Reactor {
 public:
  using Handler = std::function<void(std::uint32_t events)>;
  using Clock = std::chrono::steady_clock;
  using TimerId = std::uint64_t;

  Reactor();
  ~Reactor();
  Reactor(const Reactor&) = delete;
  Reactor& operator=(const Reactor&) = delete;

  void add(int fd, std::uint32_t events, Handler handler);
  void modify(int fd, std::uint32_t events);
  /// Safe to call from inside any handler, including the fd's own.
  void remove(int fd);
  bool watching(int fd) const { return fds_.count(fd) != 0; }
  std::size_t watched() const { return fds_.size(); }

  TimerId call_after(Clock::duration delay, std::function<void()> fn);
  void cancel(TimerId id);

  /// Thread-safe; runs `fn` on the loop thread.
  void post(std::function<void()> fn);

  void run();
  /// One wait plus dispatch; returns after at most `max_wait`.
  void run_once(Clock::duration max_wait);
  void stop();
  bool in_loop_thread() const { return std::this_thread::get_id() == loop_thread_; }

 private:
  struct Watch {
    std::uint64_t token;
    std::shared_ptr<Handler> handler;
  };

  void drain_posted();
  void fire_timers();

  int epfd_ = -1;
  int wakefd_ = -1;
  std::uint64_t next_token_ = 1;
  std::unordered_map<int, Watch> fds_;
  std::unordered_map<std::uint64_t, int> tokens_;

  TimerId next_timer_ = 1;
  std::multimap<Clock::time_point, TimerId> timer_order_;
  std::unordered_map<TimerId, std::pair<Clock::time_point, std::function<void()>>> timers_;

  std::mutex post_mu_;
  std::vector<std::function<void()>> posted_;
  std::atomic<bool> stop_{false};
  std::thread::id loop_thread_;
};

}  // namespace antproxy
