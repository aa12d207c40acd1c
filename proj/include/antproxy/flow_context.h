#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "antproxy/flow_key.h"

namespace antproxy::flow {

inline constexpr std::string_view kUnknownApp = "unknown";

struct ProcfsRow {
  Endpoint local;
  Endpoint remote;
  std::uint32_t uid = 0;
};

struct ProcfsTable {
  std::vector<ProcfsRow> rows;
  std::size_t malformed = 0;
};

/// Tolerant parser for Linux /proc/net/{tcp,udp}. The header line is skipped
/// without counting; any other unparseable line counts as malformed.
ProcfsTable parse_procfs_table(std::string_view text);

/// Parses "0100007F:1F90" (little-endian address, big-endian port).
std::optional<Endpoint> parse_procfs_endpoint(std::string_view field);

enum class AppSourceKind { Procfs, Oracle };

/// Complete local-endpoint -> app mapping as reported by a source at one
/// instant. Throws on source failure.
using AppSourceFn = std::function<std::unordered_map<Endpoint, std::string>()>;

/// Ground-truth registry filled in by the simulated app stack.
class OracleRegistry {
 public:
  void assign(Endpoint local, std::string app_id);
  void remove(Endpoint local);
  std::unordered_map<Endpoint, std::string> snapshot() const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<Endpoint, std::string> map_;
};

AppSourceFn oracle_source(std::shared_ptr<OracleRegistry> registry);

/// Reads the given procfs files on every call. `uid_names` resolves uids to
/// application names; unmapped uids become "uid:<n>".
AppSourceFn procfs_source(std::vector<std::filesystem::path> files, std::map<std::uint32_t, std::string> uid_names = {});

/// Cache of app-side endpoint -> app name. Readers see an immutable snapshot;
/// refreshes replace it wholesale with the source content.
class AppMap {
 public:
  AppMap(AppSourceKind kind, AppSourceFn source);
  ~AppMap();
  AppMap(const AppMap&) = delete;
  AppMap& operator=(const AppMap&) = delete;

  AppSourceKind kind() const { return kind_; }

  /// Cache only; never refreshes.
  std::optional<std::string> peek(const FlowKey& key) const;

  /// Cache hit, else exactly one refresh, else "unknown".
  std::string lookup(const FlowKey& key);

  /// Runs lookup() on the map's own refresh thread and invokes `done` there.
  void lookup_async(const FlowKey& key, std::function<void(std::string)> done);

  void refresh();
  std::uint64_t refresh_count() const { return refreshes_.load(); }
  std::uint64_t source_failures() const { return failures_.load(); }

 private:
  using Table = std::unordered_map<Endpoint, std::string>;
  std::optional<std::string> find(const Table& t, const Endpoint& local) const;
  void run();

  AppSourceKind kind_;
  AppSourceFn source_;
  std::shared_ptr<const Table> table_;
  mutable std::mutex table_mu_;
  std::mutex refresh_mu_;
  std::atomic<std::uint64_t> refreshes_{0};
  std::atomic<std::uint64_t> failures_{0};

  std::mutex q_mu_;
  std::condition_variable q_cv_;
  std::deque<std::function<void()>> jobs_;
  bool stopping_ = false;
  std::thread worker_;
};

enum class FlowState { Connecting, Established, Closing, Closed, Active };

std::string_view flow_state_name(FlowState s);

struct FlowRecord {
  FlowKey key;
  std::string app_id{kUnknownApp};
  std::int64_t start_us = 0;
  std::int64_t end_us = 0;  // last activity
  std::uint64_t packets_up = 0;
  std::uint64_t packets_down = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  FlowState state = FlowState::Active;
};

}  // namespace antproxy::flow
