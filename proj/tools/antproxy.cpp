// antproxy: engine runner, bench harness and capture utilities.

#include <signal.h>

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "antproxy/app_stack.h"
#include "antproxy/control_plane.h"
#include "antproxy/error.h"
#include "antproxy/json_codec.h"

namespace {

using namespace antproxy;
using namespace antproxy::control;
using nlohmann::json;
using namespace std::chrono_literals;

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

void print(const json& j) { std::cout << j.dump(2, ' ', false, json::error_handler_t::replace) << std::endl; }

/// Blocks until SIGINT/SIGTERM or the deadline (0 = none).
void wait_for_signal(double seconds) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  if (seconds > 0) {
    const auto ns = static_cast<long long>(seconds * 1e9);
    timespec ts{static_cast<time_t>(ns / 1'000'000'000), static_cast<long>(ns % 1'000'000'000)};
    while (sigtimedwait(&set, nullptr, &ts) < 0 && errno == EINTR) {
    }
  } else {
    int sig = 0;
    sigwait(&set, &sig);
  }
}

void block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

const Endpoint kDemoTracker{Ipv4Addr::from_octets(93, 184, 216, 34), 80};
const Endpoint kDemoCdn{Ipv4Addr::from_octets(151, 101, 1, 69), 443};
const Endpoint kDemoDns{Ipv4Addr::from_octets(8, 8, 8, 8), 53};

void provision_demo(net::SimNet& net) {
  net.register_endpoint(IpProto::TCP, kDemoTracker, net::EndpointScript::sink());
  net.register_endpoint(IpProto::TCP, kDemoCdn, net::EndpointScript::serve(2'000'000, 7));
  net.register_endpoint(IpProto::UDP, kDemoDns, net::EndpointScript::echo());
}

/// Background apps producing a little traffic, one of them leaking an IMEI.
void demo_traffic(net::AppStack& app, const std::atomic<bool>& stop) {
  const std::string leak = "GET /collect?imei=356938035643809&lat=42.3601 HTTP/1.1\r\nHost: tracker\r\n\r\n";
  std::vector<std::uint8_t> buf(64 * 1024);
  while (!stop) {
    try {
      auto dns = app.open_udp("com.example.browser");
      const std::string q = "query example.com";
      dns->send_to(kDemoDns, ByteView(reinterpret_cast<const std::uint8_t*>(q.data()), q.size()));
      dns->recv(500ms);
      dns->close();

      auto t = app.connect(kDemoTracker, "com.example.weather");
      t->send_all(ByteView(reinterpret_cast<const std::uint8_t*>(leak.data()), leak.size()));
      t->close();

      auto c = app.connect(kDemoCdn, "com.example.video");
      while (c->recv(buf) > 0) {
      }
      c->close();
      t->wait_closed(2s);
      c->wait_closed(2s);
    } catch (const std::exception& e) {
      std::cerr << "demo: " << e.what() << "\n";
    }
    for (int i = 0; i < 20 && !stop; ++i) std::this_thread::sleep_for(100ms);
  }
}

struct RunArgs {
  bool sim = false;
  bool os = false;
  std::size_t mtu = kDefaultMtu;
  bool dpi = false;
  std::string patterns;
  std::string log_mode = "off";
  std::string log_dir;
  std::string api;
  bool no_api = false;
  bool demo = false;
  double duration = 0;
  std::string tun_name = "antproxy0";
};

int cmd_run(const RunArgs& a) {
  EngineConfig cfg;
  cfg.apply_env();
  if (!a.api.empty()) cfg.api_addr = a.api;
  if (!a.log_dir.empty()) cfg.log_dir = a.log_dir;
  cfg.mtu = a.mtu;
  cfg.backend = a.os ? Backend::Os : Backend::Sim;
  cfg.tun_name = a.tun_name;
  cfg.dpi = a.dpi;
  if (!a.patterns.empty()) cfg.pattern_file = a.patterns;
  cfg.log_policy.mode = *capture::parse_log_mode(a.log_mode);
  cfg.validate();

  block_signals();
  std::unique_ptr<TunPort> tun;
  std::unique_ptr<net::ExternalNet> ext;
  net::SimNet* sim_net = nullptr;
  if (cfg.backend == Backend::Os) {
    tun = std::make_unique<OsTun>(cfg.tun_name, cfg.mtu);
    ext = std::make_unique<net::OsNet>();
  } else {
    tun = std::make_unique<SimTun>(cfg.mtu);
    auto s = std::make_unique<net::SimNet>();
    sim_net = s.get();
    ext = std::move(s);
  }
  std::shared_ptr<flow::OracleRegistry> oracle;
  if (sim_net) oracle = std::make_shared<flow::OracleRegistry>();

  Runtime rt(cfg, *tun, *ext, oracle);
  if (cfg.dpi && rt.dpi().patterns().empty()) {
    for (auto& p : default_patterns()) rt.dpi().add_pattern(p);
  }
  rt.start_engine();

  std::optional<ApiServer> api;
  json status{{"status", "running"},
              {"backend", cfg.backend == Backend::Os ? "OS" : "SIM"},
              {"mtu", cfg.mtu},
              {"dpi", cfg.dpi},
              {"log_mode", capture::log_mode_name(cfg.log_policy.mode)}};
  if (!a.no_api) {
    const auto [host, port] = parse_host_port(cfg.api_addr);
    api.emplace(rt);
    status["api"] = host + ":" + std::to_string(api->start(host, port));
  }
  if (rt.log_file()) status["log_file"] = rt.log_file()->string();
  print(status);

  std::atomic<bool> stop{false};
  std::unique_ptr<net::AppStack> app;
  std::thread demo;
  if (a.demo && sim_net) {
    provision_demo(*sim_net);
    app = std::make_unique<net::AppStack>(static_cast<SimTun&>(*tun), oracle);
    demo = std::thread([&] { demo_traffic(*app, stop); });
  }

  wait_for_signal(a.duration);
  stop = true;
  if (demo.joinable()) demo.join();
  if (api) api->stop();
  rt.stop_engine();
  app.reset();
  print({{"status", "stopped"}, {"counters", to_json(rt.engine().counters())}, {"leaks", rt.leaks().size()}});
  return 0;
}

struct BenchArgs {
  std::string scenario;
  std::uint64_t size = 500'000'000;
  bool dpi = false;
  bool log = false;
  std::string network = "sim";
  int flows = 16;
  int connections = 200;
  double idle_seconds = 120;
  std::uint64_t seed = 1;
  std::size_t mtu = kDefaultMtu;
  std::string log_dir;
  std::string patterns;
};

int cmd_bench(const BenchArgs& a) {
  BenchScenario sc;
  sc.kind = *parse_scenario(a.scenario);
  sc.network = a.network == "loopback" ? BenchNetwork::Loopback : BenchNetwork::Sim;
  sc.size = a.size;
  sc.dpi = a.dpi;
  sc.log = a.log;
  sc.flows = a.flows;
  sc.connections = a.connections;
  sc.idle_duration = std::chrono::milliseconds(static_cast<std::int64_t>(a.idle_seconds * 1000));
  sc.seed = a.seed;
  sc.mtu = a.mtu;
  if (!a.log_dir.empty()) {
    sc.log_dir = a.log_dir;
    sc.keep_log = true;
  }
  if (!a.patterns.empty()) sc.patterns = load_patterns(a.patterns);
  print(bench_run(sc));
  return 0;
}

struct ReplayArgs {
  std::string capture;
  std::size_t mtu = kDefaultMtu;
  bool dpi = false;
  std::string patterns;
  std::string log_dir;
  std::string log_mode = "full";
};

int cmd_replay(const ReplayArgs& a) {
  const auto packets = read_capture_datagrams(a.capture);
  const auto flows = reconstruct_flows(packets);

  SimTun tun(a.mtu);
  net::SimNet sim;
  for (const auto& f : flows) {
    if (!sim.has_endpoint(f.key.protocol, f.key.dst)) {
      sim.register_endpoint(f.key.protocol, f.key.dst,
                            f.key.protocol == IpProto::TCP ? net::EndpointScript::sink() : net::EndpointScript::echo());
    }
  }
  EngineConfig cfg;
  cfg.mtu = a.mtu;
  cfg.dpi = a.dpi;
  if (!a.patterns.empty()) cfg.pattern_file = a.patterns;
  if (!a.log_dir.empty()) cfg.log_dir = a.log_dir;
  cfg.log_policy.mode = *capture::parse_log_mode(a.log_mode);
  auto oracle = std::make_shared<flow::OracleRegistry>();
  Runtime rt(cfg, tun, sim, oracle);
  if (cfg.dpi && rt.dpi().patterns().empty()) {
    for (auto& p : default_patterns()) rt.dpi().add_pattern(p);
  }
  rt.start_engine();
  json results;
  {
    net::AppStack app(tun, oracle);
    results = replay_flows(app, flows);
  }
  rt.stop_engine();
  json leaks = json::array();
  for (const auto& e : rt.leaks().since(0)) leaks.push_back(dpi::to_json(e));
  json out{{"capture", a.capture},
           {"packets", packets.size()},
           {"flows", results},
           {"leaks", leaks},
           {"counters", to_json(rt.engine().counters())}};
  if (rt.log_file()) out["log_file"] = rt.log_file()->string();
  print(out);
  return 0;
}

int cmd_export(const std::string& capture, const std::string& out, double burst_gap) {
  const auto packets = read_capture_datagrams(capture);
  const auto flows = features_from_capture(packets, burst_gap);
  const auto csv = telemetry::export_features_csv(flows);
  std::ofstream f(out, std::ios::binary);
  if (!f || !f.write(csv.data(), static_cast<std::streamsize>(csv.size())))
    throw Error(Errc::IoFailure, "cannot write " + out);
  print({{"capture", capture},
         {"packets", packets.size()},
         {"flows", flows.size()},
         {"features", telemetry::kFeatureCount},
         {"out", out}});
  return 0;
}

int cmd_validate(const std::string& file) {
  const auto r = capture::validate_pcapng(file);
  print({{"file", file}, {"valid", r.valid}, {"blocks", r.blocks}, {"packets", r.packets}, {"error", r.error}});
  return r.valid ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"antproxy: user-space traffic monitor and forwarding engine"};
  cli.require_subcommand(1);

  auto log_mode_check = CLI::IsMember({"full", "headers", "off"});

  RunArgs run;
  auto* run_cmd = cli.add_subcommand("run", "Run the engine until SIGINT/SIGTERM");
  auto* sim_flag = run_cmd->add_flag("--sim", run.sim, "Simulated TUN and network (default)");
  run_cmd->add_flag("--os", run.os, "Real TUN device and sockets (needs CAP_NET_ADMIN)")->excludes(sim_flag);
  run_cmd->add_option("--mtu", run.mtu, "TUN MTU")->check(CLI::Range(576, 65535));
  run_cmd->add_option("--tun-name", run.tun_name, "TUN interface name (--os)");
  run_cmd->add_flag("--dpi", run.dpi, "Inspect outgoing payloads");
  run_cmd->add_option("--patterns", run.patterns, "Pattern file (.json array or .jsonl store)")->check(CLI::ExistingFile);
  run_cmd->add_option("--log-mode", run.log_mode, "Capture mode")->check(log_mode_check);
  run_cmd->add_option("--log-dir", run.log_dir, "Capture and leak history directory");
  run_cmd->add_option("--api", run.api, "API bind address host:port");
  run_cmd->add_flag("--no-api", run.no_api, "Do not serve the HTTP API");
  run_cmd->add_flag("--demo", run.demo, "Generate sample app traffic (--sim only)");
  run_cmd->add_option("--duration", run.duration, "Stop after this many seconds")->check(CLI::NonNegativeNumber);

  BenchArgs bench;
  auto* bench_cmd = cli.add_subcommand("bench", "Run one bench scenario; prints a JSON report");
  bench_cmd->add_option("--scenario", bench.scenario, "single_flow_down|single_flow_up|multi_flow_16|idle|latency")
      ->required()
      ->check([](const std::string& s) { return parse_scenario(s) ? std::string{} : "unknown scenario " + s; });
  bench_cmd->add_option("--size", bench.size, "Bytes per flow")->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--dpi", bench.dpi, "Enable DPI");
  bench_cmd->add_flag("--log", bench.log, "Enable full-packet logging");
  bench_cmd->add_option("--network", bench.network, "sim|loopback")->check(CLI::IsMember({"sim", "loopback"}));
  bench_cmd->add_option("--flows", bench.flows, "Concurrent flows (multi_flow_16)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--connections", bench.connections, "Connections (latency)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--idle-seconds", bench.idle_seconds, "Idle duration")->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--seed", bench.seed, "Content and network seed");
  bench_cmd->add_option("--mtu", bench.mtu, "TUN MTU")->check(CLI::Range(576, 65535));
  bench_cmd->add_option("--log-dir", bench.log_dir, "Keep the capture in this directory");
  bench_cmd->add_option("--patterns", bench.patterns, "Pattern file")->check(CLI::ExistingFile);

  ReplayArgs replay;
  auto* replay_cmd = cli.add_subcommand("replay", "Replay captured app flows through the engine");
  replay_cmd->add_option("capture", replay.capture, "pcap or pcapng file")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--mtu", replay.mtu, "TUN MTU")->check(CLI::Range(576, 65535));
  replay_cmd->add_flag("--dpi", replay.dpi, "Enable DPI");
  replay_cmd->add_option("--patterns", replay.patterns, "Pattern file")->check(CLI::ExistingFile);
  replay_cmd->add_option("--log-dir", replay.log_dir, "Write a capture of the replay here");
  replay_cmd->add_option("--log-mode", replay.log_mode, "Capture mode")->check(log_mode_check);

  std::string export_in, export_out;
  double burst_gap = telemetry::kDefaultBurstGap;
  auto* export_cmd = cli.add_subcommand("export-features", "Write per-flow feature vectors as CSV");
  export_cmd->add_option("capture", export_in, "pcap or pcapng file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", export_out, "CSV output path")->required();
  export_cmd->add_option("--burst-gap", burst_gap, "Burst gap in seconds")->check(CLI::PositiveNumber);

  std::string validate_in;
  auto* validate_cmd = cli.add_subcommand("validate-capture", "Structural PCAPNG check; exit 0 iff valid");
  validate_cmd->add_option("file", validate_in, "pcapng file")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    cli.exit(e);
    return kUsageError;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*bench_cmd) return cmd_bench(bench);
    if (*replay_cmd) return cmd_replay(replay);
    if (*export_cmd) return cmd_export(export_in, export_out, burst_gap);
    if (*validate_cmd) return cmd_validate(validate_in);
  } catch (const antproxy::Error& e) {
    print({{"error", e.what()}, {"code", std::string(antproxy::errc_name(e.code()))}});
    return e.code() == Errc::InvalidArgument ? kUsageError : kRuntimeError;
  } catch (const std::exception& e) {
    print({{"error", e.what()}});
    return kRuntimeError;
  }
  return kUsageError;
}
