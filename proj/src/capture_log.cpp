#include "antproxy/capture_log.h"

#include <httplib.h>

#include <chrono>
#include <cstring>
#include <regex>

#include "antproxy/error.h"

namespace antproxy::capture {
namespace {

constexpr std::size_t kWriteBuffer = 1 << 20;

void put32(Bytes& b, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  b.insert(b.end(), p, p + 4);
}
void put16(Bytes& b, std::uint16_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  b.insert(b.end(), p, p + 2);
}
void pad4(Bytes& b) {
  while (b.size() % 4 != 0) b.push_back(0);
}
void put_option(Bytes& b, std::uint16_t code, std::string_view value) {
  put16(b, code);
  put16(b, static_cast<std::uint16_t>(value.size()));
  b.insert(b.end(), value.begin(), value.end());
  pad4(b);
}
void finish_block(Bytes& b) {
  const auto total = static_cast<std::uint32_t>(b.size() + 4);
  std::memcpy(b.data() + 4, &total, 4);
  put32(b, total);
}

std::int64_t now_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

std::optional<LogMode> parse_log_mode(std::string_view s) {
  if (s == "full") return LogMode::Full;
  if (s == "headers") return LogMode::HeadersOnly;
  if (s == "off") return LogMode::Off;
  return std::nullopt;
}

std::string_view log_mode_name(LogMode m) {
  switch (m) {
    case LogMode::Full: return "full";
    case LogMode::HeadersOnly: return "headers";
    case LogMode::Off: return "off";
  }
  return "off";
}

std::size_t header_bytes(ByteView d) {
  if (d.size() < kIpv4MinHeader) return d.size();
  const std::size_t ihl = std::size_t{d[0] & 0x0Fu} * 4;
  if (ihl < kIpv4MinHeader || ihl > d.size()) return d.size();
  std::size_t transport = 0;
  if (d[9] == static_cast<std::uint8_t>(IpProto::TCP)) {
    if (d.size() < ihl + kTcpMinHeader) return d.size();
    transport = std::size_t{d[ihl + 12] >> 4} * 4;
  } else if (d[9] == static_cast<std::uint8_t>(IpProto::UDP)) {
    transport = kUdpHeader;
  }
  return std::min(d.size(), ihl + transport);
}

Bytes encode_section_header() {
  Bytes b;
  put32(b, kBlockSHB);
  put32(b, 0);
  put32(b, kByteOrderMagic);
  put16(b, 1);
  put16(b, 0);
  put32(b, 0xFFFFFFFF);  // section length unknown (-1, 64 bit)
  put32(b, 0xFFFFFFFF);
  put_option(b, 4, "antproxy");  // shb_userappl
  put16(b, kOptEndOfOpt);
  put16(b, 0);
  finish_block(b);
  return b;
}

Bytes encode_interface_description(std::uint16_t link_type, std::uint32_t snaplen) {
  Bytes b;
  put32(b, kBlockIDB);
  put32(b, 0);
  put16(b, link_type);
  put16(b, 0);
  put32(b, snaplen);
  const char tsresol = 6;  // microseconds
  put_option(b, 9, std::string_view(&tsresol, 1));
  put16(b, kOptEndOfOpt);
  put16(b, 0);
  finish_block(b);
  return b;
}

Bytes encode_enhanced_packet(ByteView data, std::uint32_t original_length, std::int64_t timestamp_us,
                             const std::vector<Annotation>& annotations) {
  Bytes b;
  b.reserve(32 + data.size() + 64 * annotations.size() + 8);
  put32(b, kBlockEPB);
  put32(b, 0);
  put32(b, 0);  // interface id
  const auto ts = static_cast<std::uint64_t>(timestamp_us);
  put32(b, static_cast<std::uint32_t>(ts >> 32));
  put32(b, static_cast<std::uint32_t>(ts));
  put32(b, static_cast<std::uint32_t>(data.size()));
  put32(b, original_length);
  b.insert(b.end(), data.begin(), data.end());
  pad4(b);
  if (!annotations.empty()) {
    for (const auto& a : annotations) {
      put_option(b, kOptComment, std::string(kAnnotationPrefix) + a.key + "=" + a.value);
    }
    put16(b, kOptEndOfOpt);
    put16(b, 0);
  }
  finish_block(b);
  return b;
}

std::filesystem::path rotated_name(const std::filesystem::path& path, std::int64_t stamp_us) {
  auto name = path.stem().string() + "-" + std::to_string(stamp_us) + path.extension().string();
  auto candidate = path.parent_path() / name;
  for (int i = 1; std::filesystem::exists(candidate); ++i) {
    candidate = path.parent_path() /
                (path.stem().string() + "-" + std::to_string(stamp_us) + "." + std::to_string(i) + path.extension().string());
  }
  return candidate;
}

PcapngWriter::PcapngWriter(std::filesystem::path path, LogPolicy policy, std::uint16_t link_type)
    : path_(std::move(path)), policy_(std::move(policy)), link_type_(link_type) {
  buffer_.resize(kWriteBuffer);
  std::error_code ec;
  if (std::filesystem::exists(path_, ec)) {
    const auto old = rotated_name(path_, now_us());
    std::filesystem::rename(path_, old, ec);
    if (ec) throw Error(Errc::IoFailure, "cannot rotate " + path_.string() + ": " + ec.message());
    rotated_.push_back(old);
  }
  open_fresh();
}

PcapngWriter::~PcapngWriter() {
  try {
    close();
  } catch (...) {
  }
}

void PcapngWriter::open_fresh() {
  out_ = std::ofstream();
  out_.rdbuf()->pubsetbuf(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
  out_.open(path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error(Errc::IoFailure, "cannot create capture file " + path_.string());
  file_bytes_ = 0;
  write_block(encode_section_header());
  write_block(encode_interface_description(link_type_, 0x40000));
}

void PcapngWriter::write_block(ByteView block) {
  out_.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size()));
  if (!out_) throw Error(Errc::IoFailure, "write failed on " + path_.string());
  file_bytes_ += block.size();
}

bool PcapngWriter::log_packet(ByteView datagram, const std::vector<Annotation>& annotations,
                              std::int64_t timestamp_us) {
  std::string app;
  for (const auto& a : annotations) {
    if (a.key == "app") app = a.value;
  }
  if (!policy_.enabled_for(app)) return false;
  const std::size_t captured = policy_.mode == LogMode::HeadersOnly ? header_bytes(datagram) : datagram.size();
  if (policy_.rotation_bytes > 0 && file_bytes_ >= policy_.rotation_bytes) rotate();
  write_block(encode_enhanced_packet(datagram.first(captured), static_cast<std::uint32_t>(datagram.size()),
                                     timestamp_us, annotations));
  ++packets_;
  return true;
}

void PcapngWriter::flush() {
  if (out_.is_open()) out_.flush();
}

void PcapngWriter::close() {
  if (out_.is_open()) {
    out_.flush();
    out_.close();
  }
}

void PcapngWriter::rotate() {
  close();
  const auto old = rotated_name(path_, now_us());
  std::error_code ec;
  std::filesystem::rename(path_, old, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot rotate " + path_.string() + ": " + ec.message());
  rotated_.push_back(old);
  open_fresh();
}

// --- CaptureLogger ---

CaptureLogger::CaptureLogger(Options opts) : opts_(std::move(opts)) {
  if (opts_.path && opts_.policy.mode != LogMode::Off) {
    writer_ = std::make_unique<PcapngWriter>(*opts_.path, opts_.policy);
  }
  annotator_ = [](const TapRecord& r, std::vector<Annotation>& out) {
    out.push_back({"app", r.app_id});
    out.push_back({"direction", r.direction == Direction::Up ? "up" : "down"});
  };
  encoder_ = std::thread([this] { encode_loop(); });
  writer_thread_ = std::thread([this] { write_loop(); });
}

CaptureLogger::~CaptureLogger() { stop(); }

void CaptureLogger::add_observer(Observer fn) {
  std::lock_guard lock(mu_);
  observers_.push_back(std::move(fn));
}

void CaptureLogger::set_annotator(Annotator fn) {
  std::lock_guard lock(mu_);
  annotator_ = std::move(fn);
}

bool CaptureLogger::submit(TapRecord rec) {
  {
    std::lock_guard lock(mu_);
    if (stopping_ || queue_.size() >= opts_.queue_capacity) {
      dropped_.fetch_add(1, std::memory_order_relaxed);
      return false;
    }
    queue_.push_back(std::move(rec));
    ++in_flight_;
  }
  cv_.notify_all();
  return true;
}

void CaptureLogger::encode_loop() {
  std::vector<Annotation> annotations;
  for (;;) {
    TapRecord rec;
    std::vector<Observer> observers;
    Annotator annotator;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      rec = std::move(queue_.front());
      queue_.pop_front();
      observers = observers_;
      annotator = annotator_;
    }
    for (const auto& fn : observers) fn(rec);

    Bytes block;
    if (writer_) {
      annotations.clear();
      if (annotator) annotator(rec, annotations);
      const LogPolicy& pol = writer_->policy();
      if (pol.enabled_for(rec.app_id)) {
        const std::size_t cap = pol.mode == LogMode::HeadersOnly ? header_bytes(rec.datagram) : rec.datagram.size();
        block = encode_enhanced_packet(ByteView(rec.datagram).first(cap),
                                       static_cast<std::uint32_t>(rec.datagram.size()), rec.timestamp_us, annotations);
      }
    }
    {
      std::lock_guard lock(mu_);
      if (block.empty()) {
        --in_flight_;
      } else {
        blocks_.push_back(std::move(block));
      }
    }
    cv_.notify_all();
    idle_cv_.notify_all();
  }
}

void CaptureLogger::write_loop() {
  for (;;) {
    std::deque<Bytes> batch;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return !blocks_.empty() || (stopping_ && queue_.empty() && in_flight_ == 0); });
      if (blocks_.empty()) return;
      batch.swap(blocks_);
    }
    for (const auto& b : batch) {
      try {
        if (writer_->policy().rotation_bytes > 0 && writer_->file_bytes() >= writer_->policy().rotation_bytes) {
          writer_->rotate();
        }
        writer_->write_block(b);
        logged_.fetch_add(1, std::memory_order_relaxed);
      } catch (const Error&) {
        dropped_.fetch_add(1, std::memory_order_relaxed);
      }
    }
    {
      std::lock_guard lock(mu_);
      in_flight_ -= batch.size();
      if (in_flight_ == 0) writer_->flush();
    }
    idle_cv_.notify_all();
    cv_.notify_all();
  }
}

void CaptureLogger::drain() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return in_flight_ == 0; });
  if (writer_) writer_->flush();
}

void CaptureLogger::stop() {
  {
    std::lock_guard lock(mu_);
    if (stopping_ && !encoder_.joinable()) return;
    stopping_ = true;
  }
  cv_.notify_all();
  if (encoder_.joinable()) encoder_.join();
  cv_.notify_all();
  if (writer_thread_.joinable()) writer_thread_.join();
  if (writer_) writer_->close();
}

// --- upload ---

UploadReport upload_logs(const std::filesystem::path& log_dir, const std::optional<std::filesystem::path>& active,
                         const std::string& url, const UploadConditions& conditions) {
  UploadReport report;
  if (!conditions.satisfied()) return report;

  std::vector<std::filesystem::path> closed;
  for (const auto& entry : std::filesystem::directory_iterator(log_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".pcapng") continue;
    if (active && std::filesystem::equivalent(entry.path(), *active)) continue;
    closed.push_back(entry.path());
  }
  std::sort(closed.begin(), closed.end());
  if (closed.empty()) return report;

  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, kUrl)) throw Error(Errc::InvalidArgument, "bad upload URL: " + url);
  const std::string base = m[1];
  const std::string target = m[2].matched ? std::string(m[2]) : "/";

  httplib::Client client(base);
  client.set_connection_timeout(5);
  client.set_read_timeout(30);
  const auto archive = log_dir / "archived";
  std::filesystem::create_directories(archive);

  report.attempted = true;
  for (const auto& file : closed) {
    std::ifstream in(file, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    httplib::MultipartFormDataItems items = {
        {"file", content, file.filename().string(), "application/x-pcapng"}};
    auto res = client.Post(target, items);
    if (res && res->status >= 200 && res->status < 300) {
      report.last_status = res->status;
      const auto dest = archive / file.filename();
      std::filesystem::rename(file, dest);
      report.archived.push_back(dest);
    } else {
      report.last_status = res ? res->status : 0;
      report.retained.push_back(file);
      report.retryable = true;
    }
  }
  return report;
}

// --- validation ---

ValidationReport validate_pcapng(const std::filesystem::path& file) {
  ValidationReport r;
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    r.error = "cannot open file";
    return r;
  }
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto rd32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, &data[off], 4);
    return v;
  };
  std::size_t off = 0;
  bool in_section = false;
  std::size_t interfaces = 0;
  while (off < data.size()) {
    if (data.size() - off < 12) {
      r.error = "truncated block at offset " + std::to_string(off);
      return r;
    }
    const std::uint32_t type = rd32(off);
    const std::uint32_t len = rd32(off + 4);
    if (len < 12 || len % 4 != 0 || off + len > data.size()) {
      r.error = "bad block length at offset " + std::to_string(off);
      return r;
    }
    if (rd32(off + len - 4) != len) {
      r.error = "trailing length mismatch at offset " + std::to_string(off);
      return r;
    }
    if (type == kBlockSHB) {
      if (len < 28 || rd32(off + 8) != kByteOrderMagic) {
        r.error = "bad section header";
        return r;
      }
      in_section = true;
      interfaces = 0;
    } else if (!in_section) {
      r.error = "block before section header";
      return r;
    } else if (type == kBlockIDB) {
      if (len < 20) {
        r.error = "short interface description";
        return r;
      }
      ++interfaces;
    } else if (type == kBlockEPB) {
      if (len < 32) {
        r.error = "short enhanced packet block";
        return r;
      }
      const std::uint32_t iface = rd32(off + 8);
      if (iface >= interfaces) {
        r.error = "packet references undeclared interface";
        return r;
      }
      const std::uint32_t cap = rd32(off + 20);
      const std::uint32_t orig = rd32(off + 24);
      if (cap > orig || 28 + ((cap + 3) & ~3u) + 4 > len) {
        r.error = "captured length inconsistent at offset " + std::to_string(off);
        return r;
      }
      ++r.packets;
    }
    ++r.blocks;
    off += len;
  }
  if (!in_section) {
    r.error = "missing section header";
    return r;
  }
  r.valid = true;
  return r;
}

}  // namespace antproxy::capture
