#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "antproxy/app_stack.h"
#include "antproxy/capture_log.h"
#include "antproxy/dpi.h"
#include "antproxy/external_net.h"
#include "antproxy/flow_context.h"
#include "antproxy/forwarder.h"
#include "antproxy/telemetry.h"
#include "antproxy/tun.h"

namespace httplib {
class Server;
}

namespace antproxy::control {

enum class Backend { Sim, Os };

struct EngineConfig {
  std::size_t mtu = kDefaultMtu;
  Backend backend = Backend::Sim;
  std::string tun_name = "antproxy0";
  capture::LogPolicy log_policy;
  std::optional<std::filesystem::path> log_dir;  // no dir => nothing written
  bool dpi = false;
  std::optional<std::filesystem::path> pattern_file;
  std::optional<std::filesystem::path> leak_file;
  std::vector<double> windows{1.0, 5.0};
  std::string api_addr = "127.0.0.1:8787";
  std::size_t queue_capacity = 512;
  std::size_t tap_queue_capacity = 4096;
  std::size_t pending_cap = 1 << 20;
  std::chrono::milliseconds udp_idle_timeout{60'000};
  std::chrono::milliseconds tcp_half_open_timeout{30'000};
  std::uint64_t scrub_seed = 0;

  /// Throws Error(InvalidArgument) naming the offending field.
  void validate() const;
  /// Applies ANTPROXY_API_ADDR and ANTPROXY_LOG_DIR when set.
  void apply_env();
  fwd::EngineOptions engine_options() const;
};

/// "host:port" -> (host, port). Throws Error(InvalidArgument).
std::pair<std::string, int> parse_host_port(std::string_view addr);

nlohmann::json to_json(const fwd::Counters& c);

/// Engine plus everything it feeds: DPI store, leak history, capture log,
/// live throughput monitor and feature collector.
class Runtime {
 public:
  /// With an oracle registry, attribution uses it; otherwise /proc/net.
  Runtime(EngineConfig cfg, TunPort& tun, net::ExternalNet& net,
          std::shared_ptr<flow::OracleRegistry> oracle = nullptr);
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  void start_engine();
  void stop_engine();
  bool engine_running() const { return engine_->running(); }

  const EngineConfig& config() const { return cfg_; }
  fwd::Engine& engine() { return *engine_; }
  dpi::DpiStore& dpi() { return *dpi_; }
  dpi::LeakHistory& leaks() { return *leaks_; }
  flow::AppMap& app_map() { return *app_map_; }
  capture::CaptureLogger& logger() { return *logger_; }
  telemetry::ThroughputMonitor& monitor() { return *monitor_; }
  telemetry::FlowFeatureCollector& features() { return *features_; }
  std::optional<std::filesystem::path> log_file() const { return logger_->path(); }

  nlohmann::json flows_json();
  nlohmann::json stats_json();

 private:
  EngineConfig cfg_;
  TunPort& tun_;
  std::unique_ptr<dpi::DpiStore> dpi_;
  std::unique_ptr<dpi::LeakHistory> leaks_;
  std::unique_ptr<flow::AppMap> app_map_;
  std::unique_ptr<telemetry::ThroughputMonitor> monitor_;
  std::unique_ptr<telemetry::FlowFeatureCollector> features_;
  std::unique_ptr<capture::CaptureLogger> logger_;
  std::unique_ptr<fwd::Engine> engine_;
};

/// HTTP + server-sent-events API over a Runtime.
class ApiServer {
 public:
  explicit ApiServer(Runtime& rt);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port. Throws Error(IoFailure) if binding fails.
  int start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  void routes();

  Runtime& rt_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::atomic<bool> closing_{false};
  int port_ = 0;
};

// --- bench ---

enum class ScenarioKind { SingleFlowDown, SingleFlowUp, MultiFlow16, Idle, Latency };

std::string_view scenario_name(ScenarioKind k);
/// Accepts SINGLE_FLOW_DOWN or single_flow_down style names.
std::optional<ScenarioKind> parse_scenario(std::string_view name);

enum class BenchNetwork { Sim, Loopback };

struct BenchScenario {
  ScenarioKind kind = ScenarioKind::SingleFlowDown;
  BenchNetwork network = BenchNetwork::Sim;
  std::uint64_t size = 500'000'000;  // bytes per flow
  bool dpi = false;
  bool log = false;
  int flows = 16;
  int connections = 200;  // LATENCY
  std::chrono::milliseconds idle_duration{120'000};
  std::uint64_t seed = 1;
  std::size_t mtu = kDefaultMtu;
  std::optional<std::filesystem::path> log_dir;  // default: a temp dir
  bool keep_log = false;
  std::vector<dpi::Pattern> patterns;  // empty => built-in PII set
};

/// Patterns from a JSON array, a {"patterns": [...]} object, or JSON lines.
/// Entries carry "id", "bytes" (or "hex") and an optional "label".
/// Throws Error(InvalidArgument) or Error(IoFailure).
std::vector<dpi::Pattern> load_patterns(const std::filesystem::path& file);

/// Built-in inspection set used when a bench or run has no pattern file.
std::vector<dpi::Pattern> default_patterns();

/// Throws Error(ScenarioSetupFailure) if endpoints or the engine cannot be
/// provisioned.
nlohmann::json bench_run(const BenchScenario& scenario);

// --- offline helpers ---

/// Groups captured datagrams into flows and computes their features. An
/// "antmon.direction" comment decides direction when present; otherwise the
/// first packet of a 5-tuple is taken as app -> net. Labels come from
/// "antmon.app".
std::vector<telemetry::LabeledFlow> features_from_capture(std::span<const CapturedDatagram> packets,
                                                          double burst_gap_s = telemetry::kDefaultBurstGap);

/// App -> net content of one captured flow.
struct ReplayFlow {
  FlowKey key;
  std::string app_id;
  Bytes stream;                  // TCP: reassembled byte stream
  std::vector<Bytes> datagrams;  // UDP: payloads in capture order
};

/// Rebuilds per-flow app -> net payloads (direction as in
/// features_from_capture). TCP segments are placed by sequence number.
std::vector<ReplayFlow> reconstruct_flows(std::span<const CapturedDatagram> packets);

/// Sends each flow's content again from a fresh app socket through the
/// engine. Returns per-flow results: bytes sent and whether the app leg
/// was reset.
nlohmann::json replay_flows(net::AppStack& app, std::span<const ReplayFlow> flows);

}  // namespace antproxy::control
