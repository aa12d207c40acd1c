#include "antproxy/flow_context.h"

#include <charconv>
#include <fstream>
#include <sstream>

#include "antproxy/error.h"

namespace antproxy::flow {
namespace {

template <typename T>
bool parse_hex(std::string_view s, T& out) {
  if (s.empty() || s.size() > sizeof(T) * 2) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, 16);
  return ec == std::errc{} && p == s.data() + s.size();
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

std::optional<Endpoint> parse_procfs_endpoint(std::string_view field) {
  const auto colon = field.find(':');
  if (colon != 8 || field.size() != 13) return std::nullopt;
  std::uint32_t raw = 0;
  std::uint16_t port = 0;
  if (!parse_hex(field.substr(0, 8), raw) || !parse_hex(field.substr(9), port)) return std::nullopt;
  // The kernel prints the network-order word as a little-endian integer.
  Endpoint e;
  e.ip = Ipv4Addr::from_octets(raw & 0xFF, (raw >> 8) & 0xFF, (raw >> 16) & 0xFF, raw >> 24);
  e.port = port;
  return e;
}

ProcfsTable parse_procfs_table(std::string_view text) {
  ProcfsTable table;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto cols = split_ws(text.substr(pos, end - pos));
    pos = end + 1;
    if (cols.empty()) continue;
    if (cols[0] == "sl") continue;
    if (cols.size() < 8 || cols[0].back() != ':') {
      ++table.malformed;
      continue;
    }
    auto local = parse_procfs_endpoint(cols[1]);
    auto remote = parse_procfs_endpoint(cols[2]);
    std::uint32_t uid = 0;
    auto [p, ec] = std::from_chars(cols[7].data(), cols[7].data() + cols[7].size(), uid);
    if (!local || !remote || ec != std::errc{} || p != cols[7].data() + cols[7].size()) {
      ++table.malformed;
      continue;
    }
    table.rows.push_back({*local, *remote, uid});
  }
  return table;
}

void OracleRegistry::assign(Endpoint local, std::string app_id) {
  std::lock_guard lock(mu_);
  map_[local] = std::move(app_id);
}

void OracleRegistry::remove(Endpoint local) {
  std::lock_guard lock(mu_);
  map_.erase(local);
}

std::unordered_map<Endpoint, std::string> OracleRegistry::snapshot() const {
  std::lock_guard lock(mu_);
  return map_;
}

AppSourceFn oracle_source(std::shared_ptr<OracleRegistry> registry) {
  return [registry] { return registry->snapshot(); };
}

AppSourceFn procfs_source(std::vector<std::filesystem::path> files, std::map<std::uint32_t, std::string> uid_names) {
  return [files = std::move(files), uid_names = std::move(uid_names)] {
    std::unordered_map<Endpoint, std::string> out;
    bool any = false;
    for (const auto& f : files) {
      std::ifstream in(f);
      if (!in) continue;
      any = true;
      std::stringstream ss;
      ss << in.rdbuf();
      for (const auto& row : parse_procfs_table(ss.str()).rows) {
        auto it = uid_names.find(row.uid);
        out[row.local] = it != uid_names.end() ? it->second : "uid:" + std::to_string(row.uid);
      }
    }
    if (!any) throw Error(Errc::IoFailure, "no readable procfs table");
    return out;
  };
}

AppMap::AppMap(AppSourceKind kind, AppSourceFn source)
    : kind_(kind), source_(std::move(source)), table_(std::make_shared<Table>()), worker_([this] { run(); }) {}

AppMap::~AppMap() {
  {
    std::lock_guard lock(q_mu_);
    stopping_ = true;
  }
  q_cv_.notify_all();
  worker_.join();
}

std::optional<std::string> AppMap::find(const Table& t, const Endpoint& local) const {
  if (auto it = t.find(local); it != t.end()) return it->second;
  // sockets bound to INADDR_ANY
  if (auto it = t.find(Endpoint{Ipv4Addr{0}, local.port}); it != t.end()) return it->second;
  return std::nullopt;
}

std::optional<std::string> AppMap::peek(const FlowKey& key) const {
  std::shared_ptr<const Table> t;
  {
    std::lock_guard lock(table_mu_);
    t = table_;
  }
  return find(*t, key.src);
}

void AppMap::refresh() {
  std::lock_guard serial(refresh_mu_);
  refreshes_.fetch_add(1);
  try {
    auto fresh = std::make_shared<const Table>(source_());
    std::lock_guard lock(table_mu_);
    table_ = std::move(fresh);
  } catch (const std::exception&) {
    failures_.fetch_add(1);
  }
}

std::string AppMap::lookup(const FlowKey& key) {
  if (auto hit = peek(key)) return *hit;
  refresh();
  if (auto hit = peek(key)) return *hit;
  return std::string(kUnknownApp);
}

void AppMap::lookup_async(const FlowKey& key, std::function<void(std::string)> done) {
  {
    std::lock_guard lock(q_mu_);
    jobs_.push_back([this, key, done = std::move(done)] { done(lookup(key)); });
  }
  q_cv_.notify_one();
}

void AppMap::run() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lock(q_mu_);
      q_cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
      if (jobs_.empty()) return;
      job = std::move(jobs_.front());
      jobs_.pop_front();
    }
    job();
  }
}

std::string_view flow_state_name(FlowState s) {
  switch (s) {
    case FlowState::Connecting: return "CONNECTING";
    case FlowState::Established: return "ESTABLISHED";
    case FlowState::Closing: return "CLOSING";
    case FlowState::Closed: return "CLOSED";
    case FlowState::Active: return "ACTIVE";
  }
  return "ACTIVE";
}

}  // namespace antproxy::flow
