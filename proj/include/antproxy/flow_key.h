#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "antproxy/packet_codec.h"

namespace antproxy {

/// 5-tuple in canonical app -> internet direction.
struct FlowKey {
  IpProto protocol = IpProto::TCP;
  Endpoint src;  // app side
  Endpoint dst;  // internet side

  std::string to_string() const {
    return std::string(protocol == IpProto::TCP ? "tcp " : "udp ") + src.to_string() + " -> " + dst.to_string();
  }
  friend bool operator==(const FlowKey&, const FlowKey&) = default;
};

}  // namespace antproxy

template <>
struct std::hash<antproxy::FlowKey> {
  std::size_t operator()(const antproxy::FlowKey& k) const noexcept {
    std::size_t h = std::hash<antproxy::Endpoint>{}(k.src);
    h ^= std::hash<antproxy::Endpoint>{}(k.dst) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h ^ static_cast<std::size_t>(k.protocol);
  }
};
