#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <numeric>
#include <thread>

#include "antproxy/app_stack.h"
#include "antproxy/control_plane.h"
#include "antproxy/error.h"

namespace antproxy::control {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;
using namespace std::chrono_literals;

const Endpoint kServeAt{Ipv4Addr::from_octets(198, 51, 100, 10), 80};
const Endpoint kSinkAt{Ipv4Addr::from_octets(198, 51, 100, 11), 9000};
const Endpoint kEchoAt{Ipv4Addr::from_octets(198, 51, 100, 12), 7};
constexpr std::string_view kBenchApp = "bench";

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mbps(std::uint64_t bytes, double seconds) { return seconds > 0 ? static_cast<double>(bytes) * 8 / seconds / 1e6 : 0; }

/// The external side of a bench: SimNet, or real loopback listeners reached
/// through an address-rewriting OsNet.
class Topology {
 public:
  Topology(BenchNetwork kind, std::uint64_t seed) {
    if (kind == BenchNetwork::Sim) sim_ = std::make_unique<net::SimNet>(seed);
    else os_ = std::make_unique<net::OsNet>();
  }

  void add_tcp(const Endpoint& at, net::EndpointScript script) {
    try {
      if (sim_) return sim_->register_endpoint(IpProto::TCP, at, script);
      servers_.push_back(std::make_unique<net::LoopbackServer>(script, ledger_, at));
      os_->add_route(at, servers_.back()->address());
    } catch (const Error& e) {
      throw Error(Errc::ScenarioSetupFailure, std::string("cannot provision ") + at.to_string() + ": " + e.what());
    }
  }

  net::ExternalNet& net() { return sim_ ? static_cast<net::ExternalNet&>(*sim_) : *os_; }
  net::SinkLedger& ledger() { return sim_ ? sim_->ledger() : ledger_; }

 private:
  std::unique_ptr<net::SimNet> sim_;
  std::unique_ptr<net::OsNet> os_;
  net::SinkLedger ledger_;
  std::vector<std::unique_ptr<net::LoopbackServer>> servers_;
};

/// Polls the forwarding thread count while a scenario runs.
class WorkerSampler {
 public:
  WorkerSampler()
      : thread_([this] {
          while (!stop_) {
            const auto n = fwd::Engine::forwarding_threads();
            max_ = std::max<std::size_t>(max_, n);
            min_ = std::min<std::size_t>(min_, n);
            std::unique_lock lock(mu_);
            cv_.wait_for(lock, 50ms, [this] { return stop_.load(); });
          }
        }) {}
  ~WorkerSampler() { finish(); }
  void finish() {
    stop_ = true;
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
  }
  std::size_t max() const { return max_; }
  std::size_t min() const { const std::size_t m = min_; return m == SIZE_MAX ? 0 : m; }

 private:
  std::atomic<bool> stop_{false};
  std::atomic<std::size_t> max_{0};
  std::atomic<std::size_t> min_{SIZE_MAX};
  std::mutex mu_;
  std::condition_variable cv_;
  std::thread thread_;
};

struct Download {
  std::uint64_t bytes = 0;
  double seconds = 0;
  std::string sha256;
  bool hash_ok = false;
};

Download download(net::AppStack& app, std::uint64_t size, std::uint64_t seed) {
  Download r;
  const auto t0 = Clock::now();
  auto sock = app.connect(kServeAt, std::string(kBenchApp));
  net::Sha256 sha;
  std::vector<std::uint8_t> buf(256 * 1024);
  for (;;) {
    const auto n = sock->recv(buf);
    if (n == 0) break;
    sha.update(ByteView(buf.data(), n));
    r.bytes += n;
  }
  r.seconds = seconds_since(t0);
  sock->close();
  sock->wait_closed(5s);
  r.sha256 = sha.hex_digest();
  r.hash_ok = !sock->reset() && r.bytes == size && r.sha256 == net::content_sha256(seed, size);
  return r;
}

std::filesystem::path fresh_log_dir() {
  static std::atomic<int> counter{0};
  return std::filesystem::temp_directory_path() /
         ("antproxy-bench-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
}

}  // namespace

std::string_view scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::SingleFlowDown: return "SINGLE_FLOW_DOWN";
    case ScenarioKind::SingleFlowUp: return "SINGLE_FLOW_UP";
    case ScenarioKind::MultiFlow16: return "MULTI_FLOW_16";
    case ScenarioKind::Idle: return "IDLE";
    case ScenarioKind::Latency: return "LATENCY";
  }
  return "SINGLE_FLOW_DOWN";
}

std::optional<ScenarioKind> parse_scenario(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto k : {ScenarioKind::SingleFlowDown, ScenarioKind::SingleFlowUp, ScenarioKind::MultiFlow16,
                 ScenarioKind::Idle, ScenarioKind::Latency}) {
    if (scenario_name(k) == upper) return k;
  }
  return std::nullopt;
}

json bench_run(const BenchScenario& sc) {
  if (sc.kind == ScenarioKind::MultiFlow16 && sc.flows <= 0)
    throw Error(Errc::ScenarioSetupFailure, "flows must be > 0");
  if (sc.kind == ScenarioKind::Latency && sc.connections <= 0)
    throw Error(Errc::ScenarioSetupFailure, "connections must be > 0");

  Topology topo(sc.network, sc.seed);
  switch (sc.kind) {
    case ScenarioKind::SingleFlowDown:
    case ScenarioKind::MultiFlow16: topo.add_tcp(kServeAt, net::EndpointScript::serve(sc.size, sc.seed)); break;
    case ScenarioKind::SingleFlowUp: topo.add_tcp(kSinkAt, net::EndpointScript::sink()); break;
    case ScenarioKind::Latency: topo.add_tcp(kEchoAt, net::EndpointScript::echo()); break;
    case ScenarioKind::Idle: break;
  }

  EngineConfig cfg;
  cfg.mtu = sc.mtu;
  cfg.dpi = sc.dpi;
  cfg.log_policy.mode = sc.log ? capture::LogMode::Full : capture::LogMode::Off;
  std::optional<std::filesystem::path> log_dir;
  if (sc.log) log_dir = sc.log_dir.value_or(fresh_log_dir());
  cfg.log_dir = log_dir;

  SimTun tun(sc.mtu);
  auto oracle = std::make_shared<flow::OracleRegistry>();
  std::optional<Runtime> rt;
  try {
    rt.emplace(cfg, tun, topo.net(), oracle);
    if (sc.dpi) {
      for (auto& p : sc.patterns.empty() ? default_patterns() : sc.patterns) rt->dpi().add_pattern(p);
    }
    rt->start_engine();
  } catch (const Error& e) {
    throw Error(Errc::ScenarioSetupFailure, std::string("engine setup failed: ") + e.what());
  }

  json report{{"scenario", scenario_name(sc.kind)},
              {"network", sc.network == BenchNetwork::Sim ? "SIM" : "LOOPBACK"},
              {"seed", sc.seed},
              {"mtu", sc.mtu},
              {"dpi", sc.dpi},
              {"log", sc.log}};
  WorkerSampler workers;
  {
    net::AppStack app(tun, oracle);
    switch (sc.kind) {
      case ScenarioKind::SingleFlowDown: {
        const auto d = download(app, sc.size, sc.seed);
        report["bytes"] = d.bytes;
        report["seconds"] = d.seconds;
        report["mbps"] = mbps(d.bytes, d.seconds);
        report["sha256"] = d.sha256;
        report["hash_ok"] = d.hash_ok;
        break;
      }
      case ScenarioKind::SingleFlowUp: {
        const auto t0 = Clock::now();
        auto sock = app.connect(kSinkAt, std::string(kBenchApp));
        std::vector<std::uint8_t> chunk(1 << 20);
        for (std::uint64_t off = 0; off < sc.size; off += chunk.size()) {
          const auto n = std::min<std::uint64_t>(chunk.size(), sc.size - off);
          net::fill_content(sc.seed, off, std::span(chunk.data(), n));
          sock->send_all(ByteView(chunk.data(), n));
        }
        sock->close();
        const bool done = topo.ledger().wait_for(kSinkAt, 1, 600s);
        const double secs = seconds_since(t0);
        sock->wait_closed(5s);
        const auto results = topo.ledger().results(kSinkAt);
        const auto got = results.empty() ? net::SinkResult{} : results.front();
        report["bytes"] = got.bytes;
        report["seconds"] = secs;
        report["mbps"] = mbps(got.bytes, secs);
        report["sha256"] = got.sha256;
        report["hash_ok"] = done && got.bytes == sc.size && got.sha256 == net::content_sha256(sc.seed, sc.size);
        break;
      }
      case ScenarioKind::MultiFlow16: {
        std::vector<Download> results(static_cast<std::size_t>(sc.flows));
        std::vector<std::string> errors;
        std::mutex err_mu;
        const auto t0 = Clock::now();
        std::vector<std::thread> threads;
        for (int i = 0; i < sc.flows; ++i) {
          threads.emplace_back([&, i] {
            try {
              results[i] = download(app, sc.size, sc.seed);
            } catch (const std::exception& e) {
              std::lock_guard lock(err_mu);
              errors.emplace_back(e.what());
            }
          });
        }
        for (auto& t : threads) t.join();
        const double wall = seconds_since(t0);
        json per_flow = json::array();
        std::uint64_t total = 0;
        bool all_ok = errors.empty();
        std::vector<double> rates;
        for (const auto& r : results) {
          rates.push_back(mbps(r.bytes, r.seconds));
          per_flow.push_back({{"bytes", r.bytes}, {"seconds", r.seconds}, {"mbps", rates.back()}, {"hash_ok", r.hash_ok}});
          total += r.bytes;
          all_ok = all_ok && r.hash_ok;
        }
        const auto [lo, hi] = std::minmax_element(rates.begin(), rates.end());
        report["flows"] = sc.flows;
        report["per_flow"] = per_flow;
        report["mean_mbps"] = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
        report["min_mbps"] = *lo;
        report["max_mbps"] = *hi;
        report["ratio"] = *lo > 0 ? *hi / *lo : 0.0;
        report["bytes"] = total;
        report["seconds"] = wall;
        report["mbps"] = mbps(total, wall);
        report["hash_ok"] = all_ok;
        report["errors"] = errors;
        break;
      }
      case ScenarioKind::Idle: {
        const auto t0 = Clock::now();
        std::this_thread::sleep_for(sc.idle_duration);
        const auto c = rt->engine().counters();
        report["seconds"] = seconds_since(t0);
        report["bytes"] = c.bytes_up + c.bytes_down;
        report["packets"] = c.packets_up + c.packets_down;
        report["mbps"] = mbps(c.bytes_up + c.bytes_down, report["seconds"].get<double>());
        break;
      }
      case ScenarioKind::Latency: {
        std::vector<double> app_ms;
        const std::string ping = "ping";
        const auto t0 = Clock::now();
        for (int i = 0; i < sc.connections; ++i) {
          auto sock = app.connect(kEchoAt, std::string(kBenchApp));
          app_ms.push_back(std::chrono::duration<double, std::milli>(sock->handshake_time()).count());
          sock->send_all(ByteView(reinterpret_cast<const std::uint8_t*>(ping.data()), ping.size()));
          std::array<std::uint8_t, 16> buf{};
          std::size_t got = 0;
          while (got < ping.size()) {
            const auto n = sock->recv(std::span(buf).subspan(got));
            if (n == 0) break;
            got += n;
          }
          sock->close();
          sock->wait_closed(5s);
        }
        std::vector<double> engine_ms;
        for (const auto& t : rt->engine().handshake_timings()) {
          if (t.syn_us && t.synack_us) engine_ms.push_back(telemetry::connect_latency_ms(t));
        }
        auto summary = [](std::vector<double> v) {
          if (v.empty()) return json{{"count", 0}};
          std::sort(v.begin(), v.end());
          auto pct = [&](double p) { return v[std::min(v.size() - 1, static_cast<std::size_t>(p * (v.size() - 1) + 0.5))]; };
          return json{{"count", v.size()},
                      {"mean_ms", std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size())},
                      {"p50_ms", pct(0.5)},
                      {"p95_ms", pct(0.95)},
                      {"max_ms", v.back()}};
        };
        report["connections"] = sc.connections;
        report["seconds"] = seconds_since(t0);
        report["engine_synack"] = summary(engine_ms);
        report["app_handshake"] = summary(app_ms);
        report["bytes"] = static_cast<std::uint64_t>(ping.size()) * 2 * static_cast<std::uint64_t>(sc.connections);
        break;
      }
    }
    report["app_retransmissions"] = app.retransmissions();
  }
  workers.finish();

  rt->stop_engine();
  const auto c = rt->engine().counters();
  report["workers"] = workers.max();
  report["workers_min"] = workers.min();
  report["fd_peak"] = c.fd_peak;
  report["udp_sockets"] = c.udp_sockets;
  report["counters"] = to_json(c);
  report["drops"] = report["counters"]["drops"];
  report["leaks"] = rt->leaks().size();
  if (sc.log) {
    const auto file = rt->log_file();
    report["logged"] = rt->logger().logged();
    report["log_dropped"] = rt->logger().dropped();
    if (file) {
      const auto v = capture::validate_pcapng(*file);
      report["capture_valid"] = v.valid;
      report["capture_packets"] = v.packets;
      report["log_file"] = file->string();
    }
  }
  rt.reset();
  if (log_dir && !sc.keep_log && !sc.log_dir) {
    std::error_code ec;
    std::filesystem::remove_all(*log_dir, ec);
  }
  return report;
}

}  // namespace antproxy::control
