#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace antproxy {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// IPv4 address, host byte order.
struct Ipv4Addr {
  std::uint32_t value = 0;

  static Ipv4Addr from_octets(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
    return Ipv4Addr{(std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d};
  }
  /// Throws Error(InvalidArgument) on anything that is not a dotted quad.
  static Ipv4Addr parse(const std::string& dotted);
  std::string to_string() const;

  friend bool operator==(Ipv4Addr, Ipv4Addr) = default;
  friend auto operator<=>(Ipv4Addr, Ipv4Addr) = default;
};

struct Endpoint {
  Ipv4Addr ip;
  std::uint16_t port = 0;

  std::string to_string() const;
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
  friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

enum class IpProto : std::uint8_t { ICMP = 1, TCP = 6, UDP = 17 };

namespace tcp_flag {
inline constexpr std::uint8_t FIN = 0x01;
inline constexpr std::uint8_t SYN = 0x02;
inline constexpr std::uint8_t RST = 0x04;
inline constexpr std::uint8_t PSH = 0x08;
inline constexpr std::uint8_t ACK = 0x10;
inline constexpr std::uint8_t URG = 0x20;
}  // namespace tcp_flag

inline constexpr std::size_t kIpv4MinHeader = 20;
inline constexpr std::size_t kTcpMinHeader = 20;
inline constexpr std::size_t kUdpHeader = 8;
inline constexpr std::uint16_t kIpFlagDF = 0x4000;
inline constexpr std::uint16_t kIpFlagMF = 0x2000;
inline constexpr std::uint16_t kIpFragOffsetMask = 0x1FFF;

struct Ipv4Header {
  std::uint8_t version = 4;
  std::uint8_t ihl = 5;  // 32-bit words
  std::uint8_t tos = 0;
  std::uint16_t total_length = 0;
  std::uint16_t id = 0;
  std::uint16_t flags_fragment = kIpFlagDF;
  std::uint8_t ttl = 64;
  std::uint8_t protocol = 0;
  std::uint16_t checksum = 0;
  Ipv4Addr src;
  Ipv4Addr dst;
  Bytes options;  // opaque, (ihl - 5) * 4 bytes

  std::size_t header_length() const { return std::size_t{ihl} * 4; }
  friend bool operator==(const Ipv4Header&, const Ipv4Header&) = default;
};

struct TcpHeader {
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t data_offset = 5;  // 32-bit words
  std::uint8_t flags = 0;
  std::uint16_t window = 0;
  std::uint16_t checksum = 0;
  std::uint16_t urgent = 0;
  Bytes options;  // (data_offset - 5) * 4 bytes, only MSS is interpreted

  bool has(std::uint8_t flag) const { return (flags & flag) != 0; }
  std::size_t header_length() const { return std::size_t{data_offset} * 4; }
  /// Value of the MSS option (kind 2), if present.
  std::optional<std::uint16_t> mss() const;
  /// Replaces or appends the MSS option; pads options to a 4-byte multiple.
  void set_mss(std::uint16_t mss);

  friend bool operator==(const TcpHeader&, const TcpHeader&) = default;
};

struct UdpHeader {
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint16_t length = kUdpHeader;
  std::uint16_t checksum = 0;  // 0 on the wire means "absent"

  friend bool operator==(const UdpHeader&, const UdpHeader&) = default;
};

struct Datagram {
  Ipv4Header ip;
  std::variant<TcpHeader, UdpHeader> transport;
  Bytes payload;

  bool is_tcp() const { return std::holds_alternative<TcpHeader>(transport); }
  bool is_udp() const { return std::holds_alternative<UdpHeader>(transport); }
  TcpHeader& tcp() { return std::get<TcpHeader>(transport); }
  const TcpHeader& tcp() const { return std::get<TcpHeader>(transport); }
  UdpHeader& udp() { return std::get<UdpHeader>(transport); }
  const UdpHeader& udp() const { return std::get<UdpHeader>(transport); }

  Endpoint source() const;
  Endpoint destination() const;

  friend bool operator==(const Datagram&, const Datagram&) = default;
};

/// RFC 1071 ones-complement checksum of `data`, already complemented.
std::uint16_t internet_checksum(ByteView data);

/// Running 32-bit ones-complement accumulator; handles odd-length chunks.
class ChecksumAccumulator {
 public:
  void add(ByteView data);
  void add_u16(std::uint16_t v);
  void add_u32(std::uint32_t v);
  std::uint16_t finish() const;

 private:
  std::uint64_t sum_ = 0;
  bool odd_ = false;
};

/// Parses and fully validates one IPv4 datagram (checksums included).
/// Throws Error with MalformedHeader, FragmentUnsupported, BadChecksum,
/// UnsupportedVersion or UnsupportedProtocol (detail = protocol number).
Datagram parse_datagram(ByteView bytes);

/// Emits wire bytes with recomputed lengths and checksums.
/// Throws Error(FieldOverflow) when a field cannot hold the value.
Bytes serialize_datagram(const Datagram& d);

/// Fills in ihl, data_offset, lengths and checksums so that `d` equals
/// parse_datagram(serialize_datagram(d)) field-wise.
void finalize_datagram(Datagram& d);

/// MSS advertised for a link MTU: MTU minus fixed IPv4 and TCP headers.
std::uint16_t mss_for_mtu(std::size_t mtu);

/// Header fields for a TCP datagram assembled straight into wire bytes.
struct TcpSegmentSpec {
  Endpoint src;
  Endpoint dst;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t flags = 0;
  std::uint16_t window = 0;
  std::uint16_t ip_id = 0;
  std::uint8_t ttl = 64;
  std::optional<std::uint16_t> mss;
};

/// Builds a TCP/IPv4 datagram (DF set) around `payload` in one pass.
Bytes build_tcp_datagram(const TcpSegmentSpec& spec, ByteView payload);

/// Builds a UDP/IPv4 datagram (DF set, TTL 64) around `payload`.
Bytes build_udp_datagram(Endpoint src, Endpoint dst, std::uint16_t ip_id, ByteView payload);

/// Peeks at the protocol number of a raw datagram without validating it.
std::optional<std::uint8_t> peek_protocol(ByteView bytes);

}  // namespace antproxy

template <>
struct std::hash<antproxy::Endpoint> {
  std::size_t operator()(const antproxy::Endpoint& e) const noexcept {
    return std::hash<std::uint64_t>{}((std::uint64_t{e.ip.value} << 16) | e.port);
  }
};
