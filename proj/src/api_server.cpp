#include <httplib.h>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>

#include "antproxy/control_plane.h"
#include "antproxy/error.h"
#include "antproxy/json_codec.h"

namespace antproxy::control {

namespace {

using nlohmann::json;
using namespace std::chrono_literals;

constexpr auto kFlowPushInterval = 1s;
constexpr auto kHeartbeatInterval = 15s;

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(dump(body), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) { reply(res, status, {{"error", message}}); }

std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
  auto j = json::parse(req.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    fail(res, 400, "body must be a JSON object");
    return std::nullopt;
  }
  return j;
}

std::optional<std::string> string_field(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

std::optional<std::string> from_hex(const std::string& hex) {
  if (hex.size() % 2) return std::nullopt;
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int v = 0;
    for (char c : hex.substr(i, 2)) {
      v <<= 4;
      if (c >= '0' && c <= '9') v |= c - '0';
      else if (c >= 'a' && c <= 'f') v |= c - 'a' + 10;
      else if (c >= 'A' && c <= 'F') v |= c - 'A' + 10;
      else return std::nullopt;
    }
    out.push_back(static_cast<char>(v));
  }
  return out;
}

std::string sse_frame(const std::string& event, const json& data) {
  return "event: " + event + "\ndata: " + dump(data) + "\n\n";
}

/// Per-connection event queue fed by the leak history listener.
struct SseStream {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::string> frames;
  std::size_t token = 0;
  std::string last_flows;
  std::chrono::steady_clock::time_point next_flows{};
  std::chrono::steady_clock::time_point next_beat{};
};

}  // namespace

ApiServer::ApiServer(Runtime& rt) : rt_(rt), server_(std::make_unique<httplib::Server>()) { routes(); }

ApiServer::~ApiServer() { stop(); }

int ApiServer::start(const std::string& host, int port) {
  closing_ = false;
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(Errc::IoFailure, "cannot bind API to " + host + ":" + std::to_string(port));
  port_ = bound;
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void ApiServer::stop() {
  closing_ = true;
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

void ApiServer::routes() {
  auto& s = *server_;

  s.Get("/flows", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, {{"flows", rt_.flows_json()}});
  });

  s.Get("/leaks", [this](const httplib::Request& req, httplib::Response& res) {
    std::int64_t since = 0;
    if (req.has_param("since")) {
      const auto v = req.get_param_value("since");
      try {
        std::size_t used = 0;
        since = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        return fail(res, 400, "since must be an integer timestamp in microseconds");
      }
    }
    json out = json::array();
    for (const auto& e : rt_.leaks().since(since)) out.push_back(dpi::to_json(e));
    reply(res, 200, {{"leaks", out}});
  });

  s.Get("/stats", [this](const httplib::Request&, httplib::Response& res) { reply(res, 200, rt_.stats_json()); });

  s.Get("/patterns", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& p : rt_.dpi().patterns()) out.push_back(dpi::to_json(p));
    reply(res, 200, {{"patterns", out}});
  });

  s.Post("/patterns", [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    const auto id = string_field(*body, "id");
    auto bytes = string_field(*body, "bytes");
    if (!bytes) {
      if (const auto hex = string_field(*body, "hex")) {
        bytes = from_hex(*hex);
        if (!bytes) return fail(res, 400, "hex must be an even-length hex string");
      }
    }
    if (!id || id->empty()) return fail(res, 400, "id must be a non-empty string");
    if (!bytes) return fail(res, 400, "bytes (or hex) is required");
    dpi::Pattern p{*id, *bytes, string_field(*body, "label").value_or("")};
    try {
      rt_.dpi().add_pattern(p);
    } catch (const Error& e) {
      return fail(res, e.code() == Errc::DuplicatePatternId ? 409 : 400, e.what());
    }
    reply(res, 201, dpi::to_json(p));
  });

  auto remove_pattern = [this](const std::string& id, httplib::Response& res) {
    if (id.empty()) return fail(res, 400, "pattern id required");
    if (!rt_.dpi().remove_pattern(id)) return fail(res, 404, "no pattern " + id);
    res.status = 204;
  };
  s.Delete(R"(/patterns/(.+))", [remove_pattern](const httplib::Request& req, httplib::Response& res) {
    remove_pattern(req.matches[1], res);
  });
  s.Delete("/patterns", [remove_pattern](const httplib::Request& req, httplib::Response& res) {
    remove_pattern(req.get_param_value("id"), res);
  });

  s.Get("/policy", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& [k, a] : rt_.dpi().policies()->entries())
      out.push_back({{"app_id", k.first}, {"pattern_id", k.second}, {"action", std::string(dpi::action_name(a))}});
    reply(res, 200, {{"policies", out}});
  });

  s.Post("/policy", [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    const auto app = string_field(*body, "app_id");
    const auto pattern = string_field(*body, "pattern_id");
    const auto action_s = string_field(*body, "action");
    if (!app || app->empty()) return fail(res, 400, "app_id must be a non-empty string");
    if (!pattern || pattern->empty()) return fail(res, 400, "pattern_id must be a non-empty string");
    const auto action = action_s ? dpi::parse_action(*action_s) : std::nullopt;
    if (!action) return fail(res, 400, "action must be one of ALLOW, BLOCK, SCRUB, ASK");
    bool known = false;
    for (const auto& p : rt_.dpi().patterns()) known = known || p.id == *pattern;
    if (!known) return fail(res, 404, "no pattern " + *pattern);
    // set_policy publishes the new table before returning, so the reply
    // happens-after every later inspection's snapshot load.
    rt_.dpi().set_policy(*app, *pattern, *action);
    reply(res, 200, {{"app_id", *app}, {"pattern_id", *pattern}, {"action", std::string(dpi::action_name(*action))}});
  });

  s.Post("/engine/start", [this](const httplib::Request&, httplib::Response& res) {
    try {
      rt_.start_engine();
    } catch (const Error& e) {
      return fail(res, 409, e.what());
    }
    reply(res, 200, {{"running", rt_.engine_running()}});
  });

  s.Post("/engine/stop", [this](const httplib::Request&, httplib::Response& res) {
    rt_.stop_engine();
    reply(res, 200, {{"running", rt_.engine_running()}});
  });

  s.Get("/events", [this](const httplib::Request&, httplib::Response& res) {
    auto st = std::make_shared<SseStream>();
    st->token = rt_.leaks().subscribe([st](const dpi::LeakEvent& e) {
      {
        std::lock_guard lock(st->mu);
        st->frames.push_back(sse_frame("leak", dpi::to_json(e)));
      }
      st->cv.notify_one();
    });
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, st](std::size_t, httplib::DataSink& sink) {
          if (closing_) return false;
          const auto now = std::chrono::steady_clock::now();
          std::deque<std::string> out;
          if (now >= st->next_flows) {
            st->next_flows = now + kFlowPushInterval;
            auto flows = dump(json{{"flows", rt_.flows_json()}});
            if (flows != st->last_flows) {
              st->last_flows = flows;
              out.push_back("event: flows\ndata: " + flows + "\n\n");
            }
          }
          {
            std::unique_lock lock(st->mu);
            if (out.empty() && st->frames.empty()) st->cv.wait_until(lock, std::min(st->next_flows, now + 250ms));
            while (!st->frames.empty()) {
              out.push_back(std::move(st->frames.front()));
              st->frames.pop_front();
            }
          }
          if (out.empty() && now >= st->next_beat) out.push_back(": keepalive\n\n");
          for (const auto& f : out) {
            if (!sink.write(f.data(), f.size())) return false;
          }
          if (!out.empty()) st->next_beat = now + kHeartbeatInterval;
          return !closing_ && sink.is_writable();
        },
        [this, st](bool) { rt_.leaks().unsubscribe(st->token); });
  });

  s.Get("/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"ok", true}}); });

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      fail(res, 500, e.what());
    } catch (...) {
      fail(res, 500, "internal error");
    }
  });
}

}  // namespace antproxy::control
