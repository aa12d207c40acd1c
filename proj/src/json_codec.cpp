#include "antproxy/json_codec.h"

#include "antproxy/error.h"

namespace antproxy {

nlohmann::json flow_key_to_json(const FlowKey& k) {
  return {{"protocol", k.protocol == IpProto::TCP ? "tcp" : "udp"},
          {"src_ip", k.src.ip.to_string()},
          {"src_port", k.src.port},
          {"dst_ip", k.dst.ip.to_string()},
          {"dst_port", k.dst.port}};
}

FlowKey flow_key_from_json(const nlohmann::json& j) {
  FlowKey k;
  k.protocol = j.at("protocol").get<std::string>() == "tcp" ? IpProto::TCP : IpProto::UDP;
  k.src = {Ipv4Addr::parse(j.at("src_ip").get<std::string>()), j.at("src_port").get<std::uint16_t>()};
  k.dst = {Ipv4Addr::parse(j.at("dst_ip").get<std::string>()), j.at("dst_port").get<std::uint16_t>()};
  return k;
}

namespace flow {

nlohmann::json to_json(const FlowRecord& r) {
  return {{"flow", flow_key_to_json(r.key)},
          {"app_id", r.app_id},
          {"dst", r.key.dst.to_string()},
          {"start_us", r.start_us},
          {"end_us", r.end_us},
          {"packets_up", r.packets_up},
          {"packets_down", r.packets_down},
          {"bytes_up", r.bytes_up},
          {"bytes_down", r.bytes_down},
          {"state", std::string(flow_state_name(r.state))}};
}

}  // namespace flow

namespace dpi {

nlohmann::json to_json(const LeakEvent& e) {
  return {{"seq", e.seq},
          {"timestamp", static_cast<double>(e.timestamp_us) / 1e6},
          {"timestamp_us", e.timestamp_us},
          {"app_id", e.app_id},
          {"flow", flow_key_to_json(e.flow)},
          {"pattern_id", e.pattern_id},
          {"label", e.label},
          {"offset", e.offset},
          {"action", std::string(action_name(e.action))},
          {"needs_decision", e.needs_decision}};
}

LeakEvent leak_event_from_json(const nlohmann::json& j) {
  LeakEvent e;
  e.seq = j.value("seq", std::uint64_t{0});
  e.timestamp_us = j.at("timestamp_us").get<std::int64_t>();
  e.app_id = j.at("app_id").get<std::string>();
  e.flow = flow_key_from_json(j.at("flow"));
  e.pattern_id = j.at("pattern_id").get<std::string>();
  e.label = j.value("label", std::string{});
  e.offset = j.at("offset").get<std::size_t>();
  const auto action = parse_action(j.at("action").get<std::string>());
  if (!action) throw Error(Errc::InvalidArgument, "bad action in leak event");
  e.action = *action;
  e.needs_decision = j.value("needs_decision", false);
  return e;
}

nlohmann::json to_json(const Pattern& p) { return {{"id", p.id}, {"bytes", p.bytes}, {"label", p.label}}; }

}  // namespace dpi
}  // namespace antproxy
