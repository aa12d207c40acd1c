#include "antproxy/control_plane.h"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <tuple>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "antproxy/error.h"
#include "antproxy/json_codec.h"

namespace antproxy::control {

namespace {

std::int64_t wall_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::InvalidArgument, what);
}

/// Protocol and endpoints read straight from the headers; tolerates
/// truncated captures.
std::optional<std::tuple<IpProto, Endpoint, Endpoint>> endpoints_of(ByteView b) {
  if (b.size() < 20 || (b[0] >> 4) != 4) return std::nullopt;
  const std::size_t ihl = (b[0] & 0x0F) * 4u;
  if (b[9] != static_cast<std::uint8_t>(IpProto::TCP) && b[9] != static_cast<std::uint8_t>(IpProto::UDP))
    return std::nullopt;
  if (ihl < 20 || b.size() < ihl + 4) return std::nullopt;
  auto u32 = [&](std::size_t i) {
    return (std::uint32_t{b[i]} << 24) | (std::uint32_t{b[i + 1]} << 16) | (std::uint32_t{b[i + 2]} << 8) | b[i + 3];
  };
  auto u16 = [&](std::size_t i) { return static_cast<std::uint16_t>((b[i] << 8) | b[i + 1]); };
  return std::tuple{static_cast<IpProto>(b[9]), Endpoint{Ipv4Addr{u32(12)}, u16(ihl)},
                    Endpoint{Ipv4Addr{u32(16)}, u16(ihl + 2)}};
}

}  // namespace

void EngineConfig::validate() const {
  require(mtu >= 576 && mtu <= 65535, "mtu must be in [576, 65535], got " + std::to_string(mtu));
  require(queue_capacity > 0, "queue_capacity must be > 0");
  require(tap_queue_capacity > 0, "tap_queue_capacity must be > 0");
  require(pending_cap > 0, "pending_cap must be > 0");
  require(log_policy.rotation_bytes > 0, "rotation_bytes must be > 0");
  require(udp_idle_timeout.count() > 0, "udp_idle_timeout must be > 0");
  require(tcp_half_open_timeout.count() > 0, "tcp_half_open_timeout must be > 0");
  require(!windows.empty(), "at least one telemetry window is required");
  for (double w : windows) require(w > 0, "telemetry windows must be > 0");
  require(!tun_name.empty(), "tun_name must not be empty");
  parse_host_port(api_addr);
}

void EngineConfig::apply_env() {
  if (const char* a = std::getenv("ANTPROXY_API_ADDR"); a && *a) api_addr = a;
  if (const char* d = std::getenv("ANTPROXY_LOG_DIR"); d && *d) log_dir = std::filesystem::path(d);
}

fwd::EngineOptions EngineConfig::engine_options() const {
  fwd::EngineOptions o;
  o.queue_capacity = queue_capacity;
  o.pending_cap = pending_cap;
  o.udp_idle_timeout = udp_idle_timeout;
  o.tcp_half_open_timeout = tcp_half_open_timeout;
  o.dpi_enabled = dpi;
  o.scrub_seed = scrub_seed;
  return o;
}

std::pair<std::string, int> parse_host_port(std::string_view addr) {
  const auto colon = addr.rfind(':');
  require(colon != std::string_view::npos && colon > 0, "address must be host:port: " + std::string(addr));
  const std::string host(addr.substr(0, colon));
  const std::string port_s(addr.substr(colon + 1));
  require(!port_s.empty() && port_s.find_first_not_of("0123456789") == std::string::npos,
          "bad port in " + std::string(addr));
  const long port = std::stol(port_s);
  require(port >= 0 && port <= 65535, "port out of range in " + std::string(addr));
  return {host, static_cast<int>(port)};
}

nlohmann::json to_json(const fwd::Counters& c) {
  return {{"flows_active", c.flows_active},
          {"flows_total", c.flows_total},
          {"bytes_up", c.bytes_up},
          {"bytes_down", c.bytes_down},
          {"packets_up", c.packets_up},
          {"packets_down", c.packets_down},
          {"drops",
           {{"icmp", c.drops.icmp},
            {"protocol", c.drops.protocol},
            {"nomapping", c.drops.nomapping},
            {"overflow", c.drops.overflow},
            {"malformed", c.drops.malformed},
            {"budget", c.drops.budget},
            {"send_failure", c.drops.send_failure},
            {"blocked", c.drops.blocked}}},
          {"fd_in_use", c.fd_in_use},
          {"fd_peak", c.fd_peak},
          {"tcp_sockets", c.tcp_sockets},
          {"udp_sockets", c.udp_sockets},
          {"retransmissions", c.retransmissions},
          {"connect_failures", c.connect_failures}};
}

// --- Runtime ---

Runtime::Runtime(EngineConfig cfg, TunPort& tun, net::ExternalNet& net, std::shared_ptr<flow::OracleRegistry> oracle)
    : cfg_(std::move(cfg)), tun_(tun) {
  cfg_.validate();
  if (cfg_.pattern_file && cfg_.pattern_file->extension() == ".jsonl") {
    // Read-write store: API edits are persisted back to the file.
    dpi_ = std::make_unique<dpi::DpiStore>(*cfg_.pattern_file);
    dpi_->load();
  } else {
    dpi_ = std::make_unique<dpi::DpiStore>();
    if (cfg_.pattern_file) {
      for (auto& p : load_patterns(*cfg_.pattern_file)) dpi_->add_pattern(std::move(p));
    }
  }

  std::optional<std::filesystem::path> capture_path;
  if (cfg_.log_dir) {
    std::filesystem::create_directories(*cfg_.log_dir);
    if (!cfg_.leak_file) cfg_.leak_file = *cfg_.log_dir / "leaks.jsonl";
    if (cfg_.log_policy.mode != capture::LogMode::Off) capture_path = *cfg_.log_dir / "capture.pcapng";
  }
  leaks_ = cfg_.leak_file ? std::make_unique<dpi::LeakHistory>(*cfg_.leak_file) : std::make_unique<dpi::LeakHistory>();

  if (oracle) {
    app_map_ = std::make_unique<flow::AppMap>(flow::AppSourceKind::Oracle, flow::oracle_source(std::move(oracle)));
  } else {
    app_map_ = std::make_unique<flow::AppMap>(flow::AppSourceKind::Procfs,
                                              flow::procfs_source({"/proc/net/tcp", "/proc/net/udp"}));
  }

  monitor_ = std::make_unique<telemetry::ThroughputMonitor>(cfg_.windows);
  features_ = std::make_unique<telemetry::FlowFeatureCollector>();
  logger_ = std::make_unique<capture::CaptureLogger>(
      capture::CaptureLogger::Options{cfg_.tap_queue_capacity, capture_path, cfg_.log_policy});
  logger_->add_observer([m = monitor_.get()](const capture::TapRecord& r) { m->add(r); });
  logger_->add_observer([f = features_.get()](const capture::TapRecord& r) { f->add(r); });

  engine_ = std::make_unique<fwd::Engine>(tun, net, cfg_.engine_options(),
                                          fwd::Hooks{app_map_.get(), dpi_.get(), leaks_.get(), logger_.get()});
}

Runtime::~Runtime() {
  engine_->stop();
  logger_->stop();
}

void Runtime::start_engine() { engine_->start(); }

void Runtime::stop_engine() {
  engine_->stop();
  logger_->drain();
}

nlohmann::json Runtime::flows_json() {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : engine_->flows()) out.push_back(flow::to_json(r));
  return out;
}

nlohmann::json Runtime::stats_json() {
  auto j = nlohmann::json::parse(monitor_->stats_json());
  // Rates over the trailing window ending now; zero once traffic stops.
  const double now_s = static_cast<double>(wall_us()) / 1e6;
  const auto trace = monitor_->trace();
  nlohmann::json current = nlohmann::json::array();
  for (double w : cfg_.windows) {
    std::uint64_t up = 0, down = 0;
    for (const auto& e : trace) {
      if (e.timestamp < now_s - w) continue;
      (e.direction == capture::Direction::Up ? up : down) += e.bytes;
    }
    current.push_back({{"window", w},
                       {"mbps_up", static_cast<double>(up) * 8 / w / 1e6},
                       {"mbps_down", static_cast<double>(down) * 8 / w / 1e6}});
  }
  j["current"] = current;
  j["network"] = cfg_.backend == Backend::Sim ? "SIM" : "OS";
  j["counters"] = to_json(engine_->counters());
  j["running"] = engine_->running();
  j["log"] = {{"logged", logger_->logged()},
              {"dropped", logger_->dropped()},
              {"file", log_file() ? nlohmann::json(log_file()->string()) : nlohmann::json(nullptr)}};
  j["leaks"] = leaks_->size();
  j["snapshot_pause_us"] = engine_->last_snapshot_pause_us();
  return j;
}

// --- patterns ---

namespace {

dpi::Pattern pattern_from_json(const nlohmann::json& j) {
  require(j.is_object(), "pattern entries must be objects");
  dpi::Pattern p;
  p.id = j.value("id", std::string{});
  p.label = j.value("label", std::string{});
  if (j.contains("bytes")) {
    p.bytes = j.at("bytes").get<std::string>();
  } else {
    const std::string hex = j.value("hex", std::string{});
    require(hex.size() % 2 == 0, "hex must have even length");
    for (std::size_t i = 0; i < hex.size(); i += 2) p.bytes.push_back(static_cast<char>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  }
  require(!p.id.empty(), "pattern id missing");
  return p;
}

}  // namespace

std::vector<dpi::Pattern> load_patterns(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::IoFailure, "cannot read " + file.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<dpi::Pattern> out;
  try {
    const auto first = text.find_first_not_of(" \t\r\n");
    auto whole = nlohmann::json::parse(text, nullptr, false);
    if (first != std::string::npos && !whole.is_discarded()) {
      if (whole.is_object() && whole.contains("patterns")) whole = whole.at("patterns");
      if (whole.is_array()) {
        for (const auto& j : whole) out.push_back(pattern_from_json(j));
        return out;
      }
      if (whole.is_object() && whole.value("type", "pattern") == "pattern") return {pattern_from_json(whole)};
    }
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.value("type", "pattern") == "pattern") out.push_back(pattern_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, file.string() + ": " + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(Errc::InvalidArgument, file.string() + ": bad hex");
  }
  return out;
}

std::vector<dpi::Pattern> default_patterns() {
  return {
      {"imei", "356938035643809", "IMEI"},
      {"imsi", "310260000000000", "IMSI"},
      {"android-id", "9774d56d682e549c", "Android ID"},
      {"email", "alice@example.com", "Email address"},
      {"phone", "+15555550123", "Phone number"},
      {"gps-lat", "lat=42.3601", "Location"},
      {"gps-lon", "lon=-71.0589", "Location"},
      {"adid", "38400000-8cf0-11bd-b23e-10b96e40000d", "Advertising ID"},
      {"mac", "00:11:22:33:44:55", "MAC address"},
      {"password", "password=", "Credential"},
      {"ssn", "078-05-1120", "SSN"},
      {"zip", "zip=02139", "Location"},
  };
}

// --- offline helpers ---

std::vector<telemetry::LabeledFlow> features_from_capture(std::span<const CapturedDatagram> packets,
                                                          double burst_gap_s) {
  struct Entry {
    std::string app;
    std::vector<telemetry::PacketRecord> records;
  };
  std::vector<FlowKey> order;
  std::unordered_map<FlowKey, Entry> flows;

  for (const auto& p : packets) {
    std::optional<capture::Direction> dir;
    std::string app;
    for (const auto& c : p.comments) {
      if (c == "antmon.direction=up") dir = capture::Direction::Up;
      if (c == "antmon.direction=down") dir = capture::Direction::Down;
      if (c.starts_with("antmon.app=")) app = c.substr(11);
    }
    const auto ends = endpoints_of(p.datagram);
    if (!ends) continue;
    const auto& [proto, src, dst] = *ends;
    const FlowKey fwd_key{proto, src, dst};
    const FlowKey rev_key{proto, dst, src};
    FlowKey key;
    if (dir) {
      key = *dir == capture::Direction::Up ? fwd_key : rev_key;
    } else if (flows.contains(rev_key)) {
      key = rev_key;
      dir = capture::Direction::Down;
    } else {
      key = fwd_key;
      dir = capture::Direction::Up;
    }
    auto rec = telemetry::packet_record(p.datagram, static_cast<double>(p.timestamp_us) / 1e6, *dir);
    if (!rec) continue;
    auto [it, fresh] = flows.try_emplace(key);
    if (fresh) order.push_back(key);
    if (!app.empty() && (it->second.app.empty() || it->second.app == flow::kUnknownApp)) it->second.app = app;
    it->second.records.push_back(*rec);
  }

  std::vector<telemetry::LabeledFlow> out;
  out.reserve(order.size());

  for (const auto& k : order) {
    auto& e = flows[k];
    out.push_back({telemetry::extract_features(e.records, burst_gap_s),
                   e.app.empty() ? std::string(flow::kUnknownApp) : e.app});
  }
  return out;
}

std::vector<ReplayFlow> reconstruct_flows(std::span<const CapturedDatagram> packets) {
  struct Entry {
    ReplayFlow flow;
    std::optional<std::uint32_t> base;  // sequence number of stream byte 0
    std::map<std::uint32_t, Bytes> segments;
  };
  std::vector<FlowKey> order;
  std::unordered_map<FlowKey, Entry> flows;
  std::unordered_set<FlowKey> seen;

  for (const auto& p : packets) {
    std::optional<capture::Direction> dir;
    std::string app;
    for (const auto& c : p.comments) {
      if (c == "antmon.direction=up") dir = capture::Direction::Up;
      if (c == "antmon.direction=down") dir = capture::Direction::Down;
      if (c.starts_with("antmon.app=")) app = c.substr(11);
    }
    Datagram d;
    try {
      d = parse_datagram(p.datagram);
    } catch (const Error&) {
      continue;  // truncated or damaged: no usable payload
    }
    const IpProto proto = d.is_tcp() ? IpProto::TCP : IpProto::UDP;
    const FlowKey fwd_key{proto, d.source(), d.destination()};
    const FlowKey rev_key{proto, d.destination(), d.source()};
    if (!dir) dir = seen.contains(rev_key) ? capture::Direction::Down : capture::Direction::Up;
    seen.insert(*dir == capture::Direction::Up ? fwd_key : rev_key);
    if (*dir != capture::Direction::Up) continue;

    auto [it, fresh] = flows.try_emplace(fwd_key);
    auto& e = it->second;
    if (fresh) {
      order.push_back(fwd_key);
      e.flow.key = fwd_key;
    }
    if (!app.empty() && (e.flow.app_id.empty() || e.flow.app_id == flow::kUnknownApp)) e.flow.app_id = app;
    if (d.is_udp()) {
      e.flow.datagrams.push_back(d.payload);
      continue;
    }
    const auto& t = d.tcp();
    if (t.flags & tcp_flag::SYN) e.base = t.seq + 1;
    if (d.payload.empty()) continue;
    if (!e.base) e.base = t.seq;
    const std::uint32_t off = t.seq - *e.base;
    if (off > (1u << 31)) continue;  // before the stream start
    auto& slot = e.segments[off];
    if (d.payload.size() > slot.size()) slot = d.payload;
  }

  std::vector<ReplayFlow> out;
  for (const auto& k : order) {
    auto& e = flows[k];
    for (const auto& [off, bytes] : e.segments) {
      if (off > e.flow.stream.size()) break;  // hole: stop at the gap
      const std::size_t skip = e.flow.stream.size() - off;
      if (skip < bytes.size()) e.flow.stream.insert(e.flow.stream.end(), bytes.begin() + skip, bytes.end());
    }
    if (e.flow.app_id.empty()) e.flow.app_id = std::string(flow::kUnknownApp);
    out.push_back(std::move(e.flow));
  }
  return out;
}

nlohmann::json replay_flows(net::AppStack& app, std::span<const ReplayFlow> flows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : flows) {
    nlohmann::json r{{"flow", flow_key_to_json(f.key)}, {"app_id", f.app_id}};
    if (f.key.protocol == IpProto::UDP) {
      auto sock = app.open_udp(f.app_id);
      std::uint64_t bytes = 0;
      for (const auto& dg : f.datagrams) {
        sock->send_to(f.key.dst, dg);
        bytes += dg.size();
      }
      sock->close();
      r["bytes"] = bytes;
      r["datagrams"] = f.datagrams.size();
    } else {
      try {
        auto sock = app.connect(f.key.dst, f.app_id);
        sock->send_all(f.stream);
        sock->close();
        sock->wait_closed(std::chrono::seconds(10));
        r["bytes"] = f.stream.size();
        r["reset"] = sock->reset();
      } catch (const Error& e) {
        r["bytes"] = 0;
        r["error"] = e.what();
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace antproxy::control
