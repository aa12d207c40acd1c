#pragma once

#include <json.hpp>

#include "antproxy/dpi.h"
#include "antproxy/flow_context.h"
#include "antproxy/flow_key.h"

namespace antproxy {

nlohmann::json flow_key_to_json(const FlowKey& k);
FlowKey flow_key_from_json(const nlohmann::json& j);

namespace flow {
nlohmann::json to_json(const FlowRecord& r);
}  // namespace flow

namespace dpi {
nlohmann::json to_json(const LeakEvent& e);
LeakEvent leak_event_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Pattern& p);
}  // namespace dpi

}  // namespace antproxy
