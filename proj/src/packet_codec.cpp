#include "antproxy/packet_codec.h"

#include <arpa/inet.h>

#include <algorithm>
#include <cstdio>
#include <cstring>

#include "antproxy/error.h"

namespace antproxy {
namespace {

std::uint16_t load16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}
std::uint32_t load32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}
void store16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 8);
  p[1] = static_cast<std::uint8_t>(v);
}
void store32(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 24);
  p[1] = static_cast<std::uint8_t>(v >> 16);
  p[2] = static_cast<std::uint8_t>(v >> 8);
  p[3] = static_cast<std::uint8_t>(v);
}

[[noreturn]] void fail(Errc code, const char* what, int detail = 0) {
  throw Error(code, what, detail);
}

std::uint16_t transport_checksum(Ipv4Addr src, Ipv4Addr dst, std::uint8_t proto, ByteView segment) {
  ChecksumAccumulator acc;
  acc.add_u32(src.value);
  acc.add_u32(dst.value);
  acc.add_u16(proto);
  acc.add_u16(static_cast<std::uint16_t>(segment.size()));
  acc.add(segment);
  return acc.finish();
}

void write_ip_header(std::uint8_t* p, const Ipv4Header& ip, std::uint16_t total_length) {
  p[0] = static_cast<std::uint8_t>((4 << 4) | (ip.ihl & 0x0F));
  p[1] = ip.tos;
  store16(p + 2, total_length);
  store16(p + 4, ip.id);
  store16(p + 6, ip.flags_fragment);
  p[8] = ip.ttl;
  p[9] = ip.protocol;
  store16(p + 10, 0);
  store32(p + 12, ip.src.value);
  store32(p + 16, ip.dst.value);
  if (!ip.options.empty()) std::memcpy(p + 20, ip.options.data(), ip.options.size());
  store16(p + 10, internet_checksum(ByteView(p, ip.header_length())));
}

}  // namespace

Ipv4Addr Ipv4Addr::parse(const std::string& dotted) {
  in_addr a{};
  if (inet_pton(AF_INET, dotted.c_str(), &a) != 1) {
    throw Error(Errc::InvalidArgument, "not an IPv4 address: " + dotted);
  }
  return Ipv4Addr{ntohl(a.s_addr)};
}

std::string Ipv4Addr::to_string() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", (value >> 24) & 0xFF, (value >> 16) & 0xFF,
                (value >> 8) & 0xFF, value & 0xFF);
  return buf;
}

std::string Endpoint::to_string() const { return ip.to_string() + ":" + std::to_string(port); }

void ChecksumAccumulator::add(ByteView data) {
  std::size_t i = 0;
  const std::size_t n = data.size();
  if (odd_ && n > 0) {
    sum_ += data[0];
    odd_ = false;
    i = 1;
  }
  for (; i + 1 < n; i += 2) sum_ += (std::uint32_t{data[i]} << 8) | data[i + 1];
  if (i < n) {
    sum_ += std::uint32_t{data[i]} << 8;
    odd_ = true;
  }
}

void ChecksumAccumulator::add_u16(std::uint16_t v) {
  std::uint8_t b[2];
  store16(b, v);
  add(ByteView(b, 2));
}

void ChecksumAccumulator::add_u32(std::uint32_t v) {
  std::uint8_t b[4];
  store32(b, v);
  add(ByteView(b, 4));
}

std::uint16_t ChecksumAccumulator::finish() const {
  std::uint64_t s = sum_;
  while (s >> 16) s = (s & 0xFFFF) + (s >> 16);
  return static_cast<std::uint16_t>(~s & 0xFFFF);
}

std::uint16_t internet_checksum(ByteView data) {
  ChecksumAccumulator acc;
  acc.add(data);
  return acc.finish();
}

std::optional<std::uint16_t> TcpHeader::mss() const {
  std::size_t i = 0;
  while (i < options.size()) {
    const std::uint8_t kind = options[i];
    if (kind == 0) break;
    if (kind == 1) {
      ++i;
      continue;
    }
    if (i + 1 >= options.size()) break;
    const std::uint8_t len = options[i + 1];
    if (len < 2 || i + len > options.size()) break;
    if (kind == 2 && len == 4) return load16(&options[i + 2]);
    i += len;
  }
  return std::nullopt;
}

void TcpHeader::set_mss(std::uint16_t value) {
  std::size_t i = 0;
  while (i < options.size()) {
    const std::uint8_t kind = options[i];
    if (kind == 0) break;
    if (kind == 1) {
      ++i;
      continue;
    }
    if (i + 1 >= options.size()) break;
    const std::uint8_t len = options[i + 1];
    if (len < 2 || i + len > options.size()) break;
    if (kind == 2 && len == 4) {
      store16(&options[i + 2], value);
      return;
    }
    i += len;
  }
  Bytes opt{2, 4, 0, 0};
  store16(&opt[2], value);
  options.insert(options.begin(), opt.begin(), opt.end());
  while (options.size() % 4 != 0) options.push_back(0);
  data_offset = static_cast<std::uint8_t>(5 + options.size() / 4);
}

Endpoint Datagram::source() const {
  const std::uint16_t port = is_tcp() ? tcp().src_port : udp().src_port;
  return Endpoint{ip.src, port};
}

Endpoint Datagram::destination() const {
  const std::uint16_t port = is_tcp() ? tcp().dst_port : udp().dst_port;
  return Endpoint{ip.dst, port};
}

std::optional<std::uint8_t> peek_protocol(ByteView bytes) {
  if (bytes.size() < kIpv4MinHeader || (bytes[0] >> 4) != 4) return std::nullopt;
  return bytes[9];
}

Datagram parse_datagram(ByteView bytes) {
  if (bytes.size() < kIpv4MinHeader) fail(Errc::MalformedHeader, "datagram shorter than IPv4 header");
  const std::uint8_t* p = bytes.data();
  if ((p[0] >> 4) != 4) fail(Errc::UnsupportedVersion, "not an IPv4 datagram", p[0] >> 4);

  Datagram d;
  Ipv4Header& ip = d.ip;
  ip.ihl = p[0] & 0x0F;
  if (ip.ihl < 5) fail(Errc::MalformedHeader, "IHL below 5");
  if (ip.header_length() > bytes.size()) fail(Errc::MalformedHeader, "truncated IPv4 options");
  if (internet_checksum(bytes.first(ip.header_length())) != 0) fail(Errc::BadChecksum, "IPv4 header checksum");

  ip.tos = p[1];
  ip.total_length = load16(p + 2);
  ip.id = load16(p + 4);
  ip.flags_fragment = load16(p + 6);
  ip.ttl = p[8];
  ip.protocol = p[9];
  ip.checksum = load16(p + 10);
  ip.src.value = load32(p + 12);
  ip.dst.value = load32(p + 16);
  ip.options.assign(p + 20, p + ip.header_length());

  if (ip.total_length != bytes.size() || ip.total_length < ip.header_length()) {
    fail(Errc::MalformedHeader, "IPv4 total length does not match datagram size");
  }
  if ((ip.flags_fragment & kIpFlagMF) || (ip.flags_fragment & kIpFragOffsetMask)) {
    fail(Errc::FragmentUnsupported, "IP fragments are not supported");
  }

  const ByteView segment = bytes.subspan(ip.header_length());
  if (ip.protocol == static_cast<std::uint8_t>(IpProto::TCP)) {
    if (segment.size() < kTcpMinHeader) fail(Errc::MalformedHeader, "truncated TCP header");
    if (transport_checksum(ip.src, ip.dst, ip.protocol, segment) != 0) fail(Errc::BadChecksum, "TCP checksum");
    const std::uint8_t* t = segment.data();
    TcpHeader tcp;
    tcp.src_port = load16(t);
    tcp.dst_port = load16(t + 2);
    tcp.seq = load32(t + 4);
    tcp.ack = load32(t + 8);
    tcp.data_offset = t[12] >> 4;
    tcp.flags = t[13] & 0x3F;
    tcp.window = load16(t + 14);
    tcp.checksum = load16(t + 16);
    tcp.urgent = load16(t + 18);
    if (tcp.data_offset < 5 || tcp.header_length() > segment.size()) {
      fail(Errc::MalformedHeader, "bad TCP data offset");
    }
    tcp.options.assign(t + kTcpMinHeader, t + tcp.header_length());
    d.payload.assign(t + tcp.header_length(), t + segment.size());
    d.transport = std::move(tcp);
  } else if (ip.protocol == static_cast<std::uint8_t>(IpProto::UDP)) {
    if (segment.size() < kUdpHeader) fail(Errc::MalformedHeader, "truncated UDP header");
    const std::uint8_t* u = segment.data();
    UdpHeader udp;
    udp.src_port = load16(u);
    udp.dst_port = load16(u + 2);
    udp.length = load16(u + 4);
    udp.checksum = load16(u + 6);
    if (udp.length != segment.size()) fail(Errc::MalformedHeader, "UDP length mismatch");
    if (udp.checksum != 0 && transport_checksum(ip.src, ip.dst, ip.protocol, segment) != 0) {
      fail(Errc::BadChecksum, "UDP checksum");
    }
    d.payload.assign(u + kUdpHeader, u + segment.size());
    d.transport = udp;
  } else {
    fail(Errc::UnsupportedProtocol, "unsupported IP protocol", ip.protocol);
  }
  return d;
}

void finalize_datagram(Datagram& d) {
  if (d.ip.options.size() % 4 != 0 || d.ip.options.size() > 40) {
    fail(Errc::FieldOverflow, "IPv4 options must be a multiple of 4 bytes, at most 40");
  }
  d.ip.version = 4;
  d.ip.ihl = static_cast<std::uint8_t>(5 + d.ip.options.size() / 4);
  std::size_t transport_len = 0;
  if (auto* tcp = std::get_if<TcpHeader>(&d.transport)) {
    if (tcp->options.size() % 4 != 0 || tcp->options.size() > 40) {
      fail(Errc::FieldOverflow, "TCP options must be a multiple of 4 bytes, at most 40");
    }
    tcp->data_offset = static_cast<std::uint8_t>(5 + tcp->options.size() / 4);
    d.ip.protocol = static_cast<std::uint8_t>(IpProto::TCP);
    transport_len = tcp->header_length() + d.payload.size();
  } else {
    auto& udp = std::get<UdpHeader>(d.transport);
    d.ip.protocol = static_cast<std::uint8_t>(IpProto::UDP);
    transport_len = kUdpHeader + d.payload.size();
    if (transport_len > 0xFFFF) fail(Errc::FieldOverflow, "UDP payload too large");
    udp.length = static_cast<std::uint16_t>(transport_len);
  }
  const std::size_t total = d.ip.header_length() + transport_len;
  if (total > 0xFFFF) fail(Errc::FieldOverflow, "datagram exceeds 65535 bytes");
  d.ip.total_length = static_cast<std::uint16_t>(total);

  // Checksums come from the serialized form so both stay consistent.
  const Bytes wire = serialize_datagram(d);
  d.ip.checksum = load16(&wire[10]);
  const std::uint8_t* t = wire.data() + d.ip.header_length();
  if (auto* tcp = std::get_if<TcpHeader>(&d.transport)) {
    tcp->checksum = load16(t + 16);
  } else {
    d.udp().checksum = load16(t + 6);
  }
}

Bytes serialize_datagram(const Datagram& d) {
  if (d.ip.options.size() % 4 != 0 || d.ip.options.size() > 40) {
    fail(Errc::FieldOverflow, "IPv4 options must be a multiple of 4 bytes, at most 40");
  }
  const std::size_t ip_len = kIpv4MinHeader + d.ip.options.size();
  std::size_t transport_header = kUdpHeader;
  const auto* tcp = std::get_if<TcpHeader>(&d.transport);
  if (tcp) {
    if (tcp->options.size() % 4 != 0 || tcp->options.size() > 40) {
      fail(Errc::FieldOverflow, "TCP options must be a multiple of 4 bytes, at most 40");
    }
    transport_header = kTcpMinHeader + tcp->options.size();
  }
  const std::size_t total = ip_len + transport_header + d.payload.size();
  if (total > 0xFFFF) fail(Errc::FieldOverflow, "datagram exceeds 65535 bytes");

  Bytes out(total);
  Ipv4Header ip = d.ip;
  ip.ihl = static_cast<std::uint8_t>(ip_len / 4);
  ip.protocol = static_cast<std::uint8_t>(tcp ? IpProto::TCP : IpProto::UDP);
  write_ip_header(out.data(), ip, static_cast<std::uint16_t>(total));

  std::uint8_t* t = out.data() + ip_len;
  if (tcp) {
    store16(t, tcp->src_port);
    store16(t + 2, tcp->dst_port);
    store32(t + 4, tcp->seq);
    store32(t + 8, tcp->ack);
    t[12] = static_cast<std::uint8_t>((transport_header / 4) << 4);
    t[13] = tcp->flags & 0x3F;
    store16(t + 14, tcp->window);
    store16(t + 16, 0);
    store16(t + 18, tcp->urgent);
    if (!tcp->options.empty()) std::memcpy(t + 20, tcp->options.data(), tcp->options.size());
  } else {
    const auto& udp = std::get<UdpHeader>(d.transport);
    store16(t, udp.src_port);
    store16(t + 2, udp.dst_port);
    store16(t + 4, static_cast<std::uint16_t>(transport_header + d.payload.size()));
    store16(t + 6, 0);
  }
  if (!d.payload.empty()) std::memcpy(t + transport_header, d.payload.data(), d.payload.size());

  const ByteView segment(t, total - ip_len);
  std::uint16_t sum = transport_checksum(ip.src, ip.dst, ip.protocol, segment);
  if (tcp) {
    store16(t + 16, sum);
  } else {
    if (sum == 0) sum = 0xFFFF;
    store16(t + 6, sum);
  }
  return out;
}

Bytes build_tcp_datagram(const TcpSegmentSpec& spec, ByteView payload) {
  const std::size_t opt_len = spec.mss ? 4 : 0;
  const std::size_t header = kIpv4MinHeader + kTcpMinHeader + opt_len;
  const std::size_t total = header + payload.size();
  if (total > 0xFFFF) fail(Errc::FieldOverflow, "datagram exceeds 65535 bytes");
  Bytes out(total);
  Ipv4Header ip;
  ip.id = spec.ip_id;
  ip.ttl = spec.ttl;
  ip.protocol = static_cast<std::uint8_t>(IpProto::TCP);
  ip.src = spec.src.ip;
  ip.dst = spec.dst.ip;
  write_ip_header(out.data(), ip, static_cast<std::uint16_t>(total));

  std::uint8_t* t = out.data() + kIpv4MinHeader;
  store16(t, spec.src.port);
  store16(t + 2, spec.dst.port);
  store32(t + 4, spec.seq);
  store32(t + 8, spec.ack);
  t[12] = static_cast<std::uint8_t>(((kTcpMinHeader + opt_len) / 4) << 4);
  t[13] = spec.flags & 0x3F;
  store16(t + 14, spec.window);
  if (spec.mss) {
    t[20] = 2;
    t[21] = 4;
    store16(t + 22, *spec.mss);
  }
  if (!payload.empty()) std::memcpy(out.data() + header, payload.data(), payload.size());
  store16(t + 16, transport_checksum(ip.src, ip.dst, ip.protocol, ByteView(t, total - kIpv4MinHeader)));
  return out;
}

Bytes build_udp_datagram(Endpoint src, Endpoint dst, std::uint16_t ip_id, ByteView payload) {
  const std::size_t total = kIpv4MinHeader + kUdpHeader + payload.size();
  if (total > 0xFFFF) fail(Errc::FieldOverflow, "datagram exceeds 65535 bytes");
  Bytes out(total);
  Ipv4Header ip;
  ip.id = ip_id;
  ip.protocol = static_cast<std::uint8_t>(IpProto::UDP);
  ip.src = src.ip;
  ip.dst = dst.ip;
  write_ip_header(out.data(), ip, static_cast<std::uint16_t>(total));
  std::uint8_t* u = out.data() + kIpv4MinHeader;
  store16(u, src.port);
  store16(u + 2, dst.port);
  store16(u + 4, static_cast<std::uint16_t>(kUdpHeader + payload.size()));
  if (!payload.empty()) std::memcpy(u + kUdpHeader, payload.data(), payload.size());
  std::uint16_t sum = transport_checksum(ip.src, ip.dst, ip.protocol, ByteView(u, total - kIpv4MinHeader));
  store16(u + 6, sum == 0 ? 0xFFFF : sum);
  return out;
}

std::uint16_t mss_for_mtu(std::size_t mtu) {
  if (mtu < 60) fail(Errc::MtuTooSmall, "MTU below 60 bytes");
  return static_cast<std::uint16_t>(std::min<std::size_t>(mtu - 40, 0xFFFF));
}

}  // namespace antproxy
