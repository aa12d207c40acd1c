#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace antproxy {

enum class Errc {
  // packet codec
  MalformedHeader,
  FragmentUnsupported,
  BadChecksum,
  UnsupportedVersion,
  UnsupportedProtocol,
  FieldOverflow,
  MtuTooSmall,
  // tun / harness
  PortClosed,
  OversizeDatagram,
  DuplicateEndpoint,
  TunUnavailable,
  // forwarder
  NotConnected,
  // dpi
  EmptyPattern,
  DuplicatePatternId,
  UnknownPattern,
  // telemetry
  EmptyFlow,
  // generic
  IoFailure,
  NetworkFailure,
  InvalidArgument,
  ScenarioSetupFailure,
};

std::string_view errc_name(Errc code);

/// Library-wide exception. `detail` carries an optional numeric payload,
/// e.g. the raw IP protocol number for UnsupportedProtocol.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, int detail = 0)
      : std::runtime_error(what), code_(code), detail_(detail) {}

  Errc code() const noexcept { return code_; }
  int detail() const noexcept { return detail_; }

 private:
  Errc code_;
  int detail_;
};

}  // namespace antproxy
