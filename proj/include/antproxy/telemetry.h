#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "antproxy/capture_log.h"
#include "antproxy/flow_key.h"
#include "antproxy/packet_codec.h"

namespace antproxy::telemetry {

using capture::Direction;

struct TraceEntry {
  double timestamp = 0;  // seconds
  Direction direction = Direction::Down;
  std::uint64_t bytes = 0;
  FlowKey flow;
};

/// Ordered by nondecreasing timestamp.
using TrafficTrace = std::vector<TraceEntry>;

/// Largest average rate over any window [t, t + W) whose start is a packet
/// timestamp of `direction`, in megabits per second.
double max_windowed_throughput(std::span<const TraceEntry> trace, double window_s, Direction direction);

enum class NetworkTag { Wifi, Cell, Sim };
enum class Scope { Device, PerApp, PerFlow };

struct PerfSample {
  double window_s = 0;
  double mbps = 0;
  Scope scope = Scope::Device;
  NetworkTag network = NetworkTag::Sim;
};

/// SYN arrival and SYN-ACK emission instants for one proxied connection.
struct ConnTiming {
  std::optional<std::int64_t> syn_us;
  std::optional<std::int64_t> synack_us;
};

/// Throws Error(NotConnected) if the SYN-ACK was never sent.
double connect_latency_ms(const ConnTiming& t);

// --- flow features ---

/// Header-level summary of one packet of a flow.
struct PacketRecord {
  double timestamp = 0;  // seconds
  Direction direction = Direction::Up;
  std::uint32_t packet_bytes = 0;   // IP total length
  std::uint32_t payload_bytes = 0;  // transport payload
  std::uint8_t tcp_flags = 0;
  std::uint8_t ttl = 0;
  std::uint16_t window = 0;
};

/// Header fields of a serialized datagram; nullopt if it does not parse.
std::optional<PacketRecord> packet_record(ByteView datagram, double timestamp, Direction direction);

inline constexpr std::size_t kFeatureCount = 66;
inline constexpr std::size_t kPerDirectionFeatures = 31;
inline constexpr double kDefaultBurstGap = 0.001;

struct FeatureVector {
  std::array<double, kFeatureCount> values{};

  static const std::array<std::string, kFeatureCount>& names();
  /// Index of a named feature; throws Error(InvalidArgument) if unknown.
  static std::size_t index_of(std::string_view name);
  double operator[](std::string_view name) const { return values[index_of(name)]; }
};

/// Throws Error(EmptyFlow) for an empty packet list. Records may be in any
/// order; they are sorted by timestamp (stable) before use.
FeatureVector extract_features(std::span<const PacketRecord> packets, double burst_gap_s = kDefaultBurstGap);

struct LabeledFlow {
  FeatureVector features;
  std::string app_id;  // "unknown" when attribution failed
};

/// Header row of the 66 feature names plus "app_id", one row per flow.
std::string export_features_csv(std::span<const LabeledFlow> flows);
/// Inverse of export_features_csv; throws Error(InvalidArgument) on a bad header.
std::vector<LabeledFlow> parse_features_csv(std::string_view csv);

/// Groups tap records by flow (both directions map to the app->net key).
class FlowFeatureCollector {
 public:
  void add(const capture::TapRecord& rec);
  std::vector<LabeledFlow> flows(double burst_gap_s = kDefaultBurstGap) const;
  std::size_t flow_count() const;

 private:
  struct Entry {
    std::string app_id;
    std::vector<PacketRecord> packets;
  };
  mutable std::mutex mu_;
  std::vector<FlowKey> order_;
  std::unordered_map<FlowKey, Entry> flows_;
};

/// Passive live-rate monitor fed from tap records; never sends anything.
class ThroughputMonitor {
 public:
  explicit ThroughputMonitor(std::vector<double> windows_s = {1.0, 5.0}, double horizon_s = 30.0);

  void add(const capture::TapRecord& rec);
  void add(double timestamp_s, Direction d, std::uint64_t bytes, const std::string& app_id);

  /// {"windows":[{"window","mbps_up","mbps_down","per_app":{app:{mbps_up,mbps_down}}}],"network":"SIM"}
  std::string stats_json() const;
  TrafficTrace trace() const;

 private:
  struct Sample {
    TraceEntry entry;
    std::string app_id;
  };
  std::vector<double> windows_;
  double horizon_;
  mutable std::mutex mu_;
  std::deque<Sample> samples_;
};

}  // namespace antproxy::telemetry
