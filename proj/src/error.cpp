#include "antproxy/error.h"

namespace antproxy {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::FragmentUnsupported: return "FragmentUnsupported";
    case Errc::BadChecksum: return "BadChecksum";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::UnsupportedProtocol: return "UnsupportedProtocol";
    case Errc::FieldOverflow: return "FieldOverflow";
    case Errc::MtuTooSmall: return "MtuTooSmall";
    case Errc::PortClosed: return "PortClosed";
    case Errc::OversizeDatagram: return "OversizeDatagram";
    case Errc::DuplicateEndpoint: return "DuplicateEndpoint";
    case Errc::TunUnavailable: return "TunUnavailable";
    case Errc::NotConnected: return "NotConnected";
    case Errc::EmptyPattern: return "EmptyPattern";
    case Errc::DuplicatePatternId: return "DuplicatePatternId";
    case Errc::UnknownPattern: return "UnknownPattern";
    case Errc::EmptyFlow: return "EmptyFlow";
    case Errc::IoFailure: return "IoFailure";
    case Errc::NetworkFailure: return "NetworkFailure";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ScenarioSetupFailure: return "ScenarioSetupFailure";
  }
  return "Unknown";
}

}  // namespace antproxy
