#include "antproxy/telemetry.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "antproxy/error.h"

namespace antproxy::telemetry {
namespace {

struct Summary {
  double min = 0, max = 0, mean = 0, std = 0;
};

Summary summarize(const std::vector<double>& xs) {
  Summary s;
  if (xs.empty()) return s;
  s.min = *std::min_element(xs.begin(), xs.end());
  s.max = *std::max_element(xs.begin(), xs.end());
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = std::clamp(sum / static_cast<double>(xs.size()), s.min, s.max);
  double sq = 0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(xs.size()));
  return s;
}

const char* kDirFields[kPerDirectionFeatures] = {
    "pkt_count",       "byte_count",      "payload_byte_count", "pkt_size_min",     "pkt_size_max",
    "pkt_size_mean",   "pkt_size_std",    "payload_size_min",   "payload_size_max", "payload_size_mean",
    "payload_size_std", "iat_min",        "iat_max",            "iat_mean",         "iat_std",
    "syn_count",       "ack_count",       "fin_count",          "rst_count",        "psh_count",
    "urg_count",       "ttl_min",         "ttl_max",            "ttl_mean",         "window_min",
    "window_max",      "window_mean",     "burst_count",        "burst_mean_size",  "burst_max_size",
    "pkts_per_second"};

const char* kFlowFields[4] = {"duration_s", "total_pkts", "total_bytes", "up_down_byte_ratio"};

std::string format_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double max_windowed_throughput(std::span<const TraceEntry> trace, double window_s, Direction direction) {
  if (!(window_s > 0)) throw Error(Errc::InvalidArgument, "window must be positive");
  std::vector<const TraceEntry*> pts;
  for (const auto& e : trace) {
    if (e.direction == direction) pts.push_back(&e);
  }
  std::uint64_t best = 0;
  std::uint64_t in_window = 0;
  std::size_t end = 0;
  for (std::size_t start = 0; start < pts.size(); ++start) {
    const double limit = pts[start]->timestamp + window_s;
    while (end < pts.size() && pts[end]->timestamp < limit) in_window += pts[end++]->bytes;
    best = std::max(best, in_window);
    in_window -= pts[start]->bytes;
  }
  return static_cast<double>(best) * 8.0 / window_s / 1e6;
}

double connect_latency_ms(const ConnTiming& t) {
  if (!t.syn_us || !t.synack_us) throw Error(Errc::NotConnected, "connection never completed its handshake");
  return static_cast<double>(*t.synack_us - *t.syn_us) / 1000.0;
}

std::optional<PacketRecord> packet_record(ByteView datagram, double timestamp, Direction direction) {
  // Header fields only, so truncated (headers-only) captures still yield records.
  if (datagram.size() < 20 || (datagram[0] >> 4) != 4) return std::nullopt;
  const std::size_t ihl = (datagram[0] & 0x0F) * 4u;
  const std::uint32_t total = (std::uint32_t{datagram[2]} << 8) | datagram[3];
  if (ihl < 20 || total < ihl) return std::nullopt;
  PacketRecord r;
  r.timestamp = timestamp;
  r.direction = direction;
  r.packet_bytes = total;
  r.ttl = datagram[8];
  std::size_t transport = 0;
  switch (datagram[9]) {
    case static_cast<std::uint8_t>(IpProto::TCP): {
      if (datagram.size() < ihl + 20) return std::nullopt;
      transport = (datagram[ihl + 12] >> 4) * 4u;
      r.tcp_flags = datagram[ihl + 13];
      r.window = static_cast<std::uint16_t>((datagram[ihl + 14] << 8) | datagram[ihl + 15]);
      break;
    }
    case static_cast<std::uint8_t>(IpProto::UDP):
      if (datagram.size() < ihl + 8) return std::nullopt;
      transport = 8;
      break;
    default:
      return std::nullopt;
  }
  if (transport < 8 || total < ihl + transport) return std::nullopt;
  r.payload_bytes = static_cast<std::uint32_t>(total - ihl - transport);
  return r;
}

const std::array<std::string, kFeatureCount>& FeatureVector::names() {
  static const std::array<std::string, kFeatureCount> names = [] {
    std::array<std::string, kFeatureCount> n;
    std::size_t i = 0;
    for (const char* dir : {"up_", "down_"}) {
      for (const char* f : kDirFields) n[i++] = std::string(dir) + f;
    }
    for (const char* f : kFlowFields) n[i++] = f;
    return n;
  }();
  return names;
}

std::size_t FeatureVector::index_of(std::string_view name) {
  const auto& n = names();
  auto it = std::find(n.begin(), n.end(), name);
  if (it == n.end()) throw Error(Errc::InvalidArgument, "unknown feature " + std::string(name));
  return static_cast<std::size_t>(it - n.begin());
}

FeatureVector extract_features(std::span<const PacketRecord> input, double burst_gap_s) {
  if (input.empty()) throw Error(Errc::EmptyFlow, "flow has no packets");
  std::vector<PacketRecord> pkts(input.begin(), input.end());
  std::stable_sort(pkts.begin(), pkts.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.timestamp < b.timestamp; });
  const double duration = pkts.back().timestamp - pkts.front().timestamp;

  // Bursts: maximal same-direction runs, consecutive gaps below the threshold,
  // at least two packets long.
  std::array<std::vector<double>, 2> burst_sizes;
  std::size_t run_start = 0;
  for (std::size_t i = 1; i <= pkts.size(); ++i) {
    const bool continues = i < pkts.size() && pkts[i].direction == pkts[i - 1].direction &&
                           pkts[i].timestamp - pkts[i - 1].timestamp < burst_gap_s;
    if (continues) continue;
    const std::size_t len = i - run_start;
    if (len >= 2) burst_sizes[static_cast<int>(pkts[run_start].direction)].push_back(static_cast<double>(len));
    run_start = i;
  }

  FeatureVector fv;
  std::size_t k = 0;
  std::array<double, 2> dir_bytes{};
  for (Direction dir : {Direction::Up, Direction::Down}) {
    std::vector<double> sizes, payloads, ttls, windows, iats;
    double bytes = 0, payload_bytes = 0;
    std::array<double, 6> flags{};
    const PacketRecord* prev = nullptr;
    for (const auto& p : pkts) {
      if (p.direction != dir) continue;
      sizes.push_back(p.packet_bytes);
      payloads.push_back(p.payload_bytes);
      ttls.push_back(p.ttl);
      windows.push_back(p.window);
      bytes += p.packet_bytes;
      payload_bytes += p.payload_bytes;
      const std::uint8_t masks[6] = {tcp_flag::SYN, tcp_flag::ACK, tcp_flag::FIN,
                                     tcp_flag::RST, tcp_flag::PSH, tcp_flag::URG};
      for (int f = 0; f < 6; ++f) flags[f] += (p.tcp_flags & masks[f]) ? 1 : 0;
      if (prev) iats.push_back(p.timestamp - prev->timestamp);
      prev = &p;
    }
    dir_bytes[static_cast<int>(dir)] = bytes;
    const Summary s = summarize(sizes), pl = summarize(payloads), ia = summarize(iats), tt = summarize(ttls),
                  wn = summarize(windows), bu = summarize(burst_sizes[static_cast<int>(dir)]);
    auto& v = fv.values;
    v[k++] = static_cast<double>(sizes.size());
    v[k++] = bytes;
    v[k++] = payload_bytes;
    for (double x : {s.min, s.max, s.mean, s.std, pl.min, pl.max, pl.mean, pl.std, ia.min, ia.max, ia.mean, ia.std}) {
      v[k++] = x;
    }
    for (double f : flags) v[k++] = f;
    for (double x : {tt.min, tt.max, tt.mean, wn.min, wn.max, wn.mean}) v[k++] = x;
    v[k++] = static_cast<double>(burst_sizes[static_cast<int>(dir)].size());
    v[k++] = bu.mean;
    v[k++] = bu.max;
    v[k++] = duration > 0 ? static_cast<double>(sizes.size()) / duration : 0.0;
  }
  fv.values[k++] = duration;
  fv.values[k++] = static_cast<double>(pkts.size());
  fv.values[k++] = dir_bytes[0] + dir_bytes[1];
  fv.values[k++] = dir_bytes[0] / std::max(dir_bytes[1], 1.0);
  return fv;
}

std::string export_features_csv(std::span<const LabeledFlow> flows) {
  std::string out;
  for (const auto& n : FeatureVector::names()) out += n + ",";
  out += "app_id\n";
  for (const auto& f : flows) {
    for (double v : f.features.values) out += format_exact(v) + ",";
    std::string label = f.app_id.empty() ? "unknown" : f.app_id;
    if (label.find_first_of(",\"\n") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : label) {
        if (c == '"') quoted += '"';
        quoted += c;
      }
      label = quoted + "\"";
    }
    out += label + "\n";
  }
  return out;
}

std::vector<LabeledFlow> parse_features_csv(std::string_view csv) {
  std::vector<LabeledFlow> out;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= csv.size()) return false;
    std::size_t end = csv.find('\n', pos);
    if (end == std::string_view::npos) end = csv.size();
    line.assign(csv.substr(pos, end - pos));
    pos = end + 1;
    return true;
  };
  std::string line;
  if (!next_line(line)) throw Error(Errc::InvalidArgument, "empty CSV");
  std::string expected;
  for (const auto& n : FeatureVector::names()) expected += n + ",";
  expected += "app_id";
  if (line != expected) throw Error(Errc::InvalidArgument, "unexpected CSV header");
  while (next_line(line)) {
    if (line.empty()) continue;
    LabeledFlow f;
    std::size_t p = 0;
    for (std::size_t i = 0; i < kFeatureCount; ++i) {
      const std::size_t comma = line.find(',', p);
      if (comma == std::string::npos) throw Error(Errc::InvalidArgument, "short CSV row");
      f.features.values[i] = std::strtod(line.substr(p, comma - p).c_str(), nullptr);
      p = comma + 1;
    }
    std::string label = line.substr(p);
    if (label.size() >= 2 && label.front() == '"' && label.back() == '"') {
      std::string un;
      for (std::size_t i = 1; i + 1 < label.size(); ++i) {
        if (label[i] == '"' && label[i + 1] == '"') ++i;
        un += label[i];
      }
      label = un;
    }
    f.app_id = label;
    out.push_back(std::move(f));
  }
  return out;
}

void FlowFeatureCollector::add(const capture::TapRecord& rec) {
  auto r = packet_record(rec.datagram, static_cast<double>(rec.timestamp_us) / 1e6, rec.direction);
  if (!r) return;
  std::lock_guard lock(mu_);
  auto [it, inserted] = flows_.try_emplace(rec.flow);
  if (inserted) order_.push_back(rec.flow);
  if (!rec.app_id.empty()) it->second.app_id = rec.app_id;
  it->second.packets.push_back(*r);
}

std::vector<LabeledFlow> FlowFeatureCollector::flows(double burst_gap_s) const {
  std::lock_guard lock(mu_);
  std::vector<LabeledFlow> out;
  for (const auto& key : order_) {
    const Entry& e = flows_.at(key);
    out.push_back({extract_features(e.packets, burst_gap_s), e.app_id.empty() ? "unknown" : e.app_id});
  }
  return out;
}

std::size_t FlowFeatureCollector::flow_count() const {
  std::lock_guard lock(mu_);
  return flows_.size();
}

ThroughputMonitor::ThroughputMonitor(std::vector<double> windows_s, double horizon_s)
    : windows_(std::move(windows_s)), horizon_(horizon_s) {
  for (double w : windows_) horizon_ = std::max(horizon_, w);
}

void ThroughputMonitor::add(const capture::TapRecord& rec) {
  add(static_cast<double>(rec.timestamp_us) / 1e6, rec.direction, rec.datagram.size(), rec.app_id);
}

void ThroughputMonitor::add(double timestamp_s, Direction d, std::uint64_t bytes, const std::string& app_id) {
  std::lock_guard lock(mu_);
  Sample s;
  s.entry.timestamp = timestamp_s;
  s.entry.direction = d;
  s.entry.bytes = bytes;
  s.app_id = app_id;
  samples_.push_back(std::move(s));
  while (!samples_.empty() && samples_.front().entry.timestamp < timestamp_s - horizon_) samples_.pop_front();
}

TrafficTrace ThroughputMonitor::trace() const {
  std::lock_guard lock(mu_);
  TrafficTrace t;
  for (const auto& s : samples_) t.push_back(s.entry);
  return t;
}

std::string ThroughputMonitor::stats_json() const {
  std::lock_guard lock(mu_);
  TrafficTrace all;
  std::map<std::string, TrafficTrace> per_app;
  for (const auto& s : samples_) {
    all.push_back(s.entry);
    per_app[s.app_id].push_back(s.entry);
  }
  nlohmann::json windows = nlohmann::json::array();
  for (double w : windows_) {
    nlohmann::json apps = nlohmann::json::object();
    for (const auto& [app, t] : per_app) {
      apps[app] = {{"mbps_up", max_windowed_throughput(t, w, Direction::Up)},
                   {"mbps_down", max_windowed_throughput(t, w, Direction::Down)}};
    }
    windows.push_back({{"window", w},
                       {"mbps_up", max_windowed_throughput(all, w, Direction::Up)},
                       {"mbps_down", max_windowed_throughput(all, w, Direction::Down)},
                       {"per_app", apps}});
  }
  return nlohmann::json{{"windows", windows}, {"network", "SIM"}}.dump();
}

}  // namespace antproxy::telemetry
