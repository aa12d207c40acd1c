#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "antproxy/flow_key.h"
#include "antproxy/packet_codec.h"

namespace antproxy::capture {

inline constexpr std::uint32_t kBlockSHB = 0x0A0D0D0A;
inline constexpr std::uint32_t kBlockIDB = 0x00000001;
inline constexpr std::uint32_t kBlockEPB = 0x00000006;
inline constexpr std::uint32_t kByteOrderMagic = 0x1A2B3C4D;
inline constexpr std::uint16_t kLinkTypeRaw = 101;
inline constexpr std::uint16_t kOptEndOfOpt = 0;
inline constexpr std::uint16_t kOptComment = 1;
inline constexpr std::string_view kAnnotationPrefix = "antmon.";
inline constexpr std::uint64_t kDefaultRotationBytes = 64ull << 20;

enum class LogMode { Full, HeadersOnly, Off };

std::optional<LogMode> parse_log_mode(std::string_view s);  // full|headers|off
std::string_view log_mode_name(LogMode m);

/// Context stored next to a packet as an "antmon.<key>=<value>" comment.
struct Annotation {
  std::string key;  // app, netstate, rssi, location, direction
  std::string value;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct LogPolicy {
  LogMode mode = LogMode::Full;
  std::map<std::string, bool> app_enabled;  // absent => enabled
  std::uint64_t rotation_bytes = kDefaultRotationBytes;

  bool enabled_for(const std::string& app) const {
    if (mode == LogMode::Off) return false;
    auto it = app_enabled.find(app);
    return it == app_enabled.end() || it->second;
  }
};

/// Bytes of IPv4 + TCP/UDP headers at the front of `datagram` (whole
/// datagram if it cannot be parsed that far).
std::size_t header_bytes(ByteView datagram);

Bytes encode_section_header();
Bytes encode_interface_description(std::uint16_t link_type, std::uint32_t snaplen);
Bytes encode_enhanced_packet(ByteView data, std::uint32_t original_length, std::int64_t timestamp_us,
                             const std::vector<Annotation>& annotations);

/// Single-owner PCAPNG file writer with size-based rotation.
class PcapngWriter {
 public:
  /// An existing file at `path` is first renamed with a timestamp suffix.
  /// Throws Error(IoFailure) if the file cannot be created.
  PcapngWriter(std::filesystem::path path, LogPolicy policy, std::uint16_t link_type = kLinkTypeRaw);
  ~PcapngWriter();

  PcapngWriter(const PcapngWriter&) = delete;
  PcapngWriter& operator=(const PcapngWriter&) = delete;

  /// Returns false when the policy excludes the packet.
  bool log_packet(ByteView datagram, const std::vector<Annotation>& annotations, std::int64_t timestamp_us);
  /// Appends an already-encoded EPB.
  void write_block(ByteView block);

  void flush();
  void close();
  /// Closes the current file under a timestamped name and starts a new one.
  void rotate();

  const std::filesystem::path& path() const { return path_; }
  const LogPolicy& policy() const { return policy_; }
  std::uint64_t packets_written() const { return packets_; }
  std::uint64_t file_bytes() const { return file_bytes_; }
  const std::vector<std::filesystem::path>& rotated_files() const { return rotated_; }

 private:
  void open_fresh();

  std::filesystem::path path_;
  LogPolicy policy_;
  std::uint16_t link_type_;
  std::ofstream out_;
  std::vector<char> buffer_;
  std::uint64_t packets_ = 0;
  std::uint64_t file_bytes_ = 0;
  std::vector<std::filesystem::path> rotated_;
};

/// Renamed path used when rotating `path` at `now_us`.
std::filesystem::path rotated_name(const std::filesystem::path& path, std::int64_t now_us);

enum class Direction : std::uint8_t { Up, Down };

/// One packet observed by the forwarder, handed to storage-side consumers.
struct TapRecord {
  std::int64_t timestamp_us = 0;
  Direction direction = Direction::Up;
  FlowKey flow;
  std::string app_id;
  Bytes datagram;
};

/// Bounded hand-off from the forwarder to two storage workers: the first
/// runs observers (telemetry) and encodes blocks, the second does file I/O.
/// A full queue drops the record from logging only and counts it.
class CaptureLogger {
 public:
  using Observer = std::function<void(const TapRecord&)>;
  using Annotator = std::function<void(const TapRecord&, std::vector<Annotation>&)>;

  struct Options {
    std::size_t queue_capacity = 4096;
    std::optional<std::filesystem::path> path;  // no path => observers only
    LogPolicy policy;
  };

  explicit CaptureLogger(Options opts);
  ~CaptureLogger();

  CaptureLogger(const CaptureLogger&) = delete;
  CaptureLogger& operator=(const CaptureLogger&) = delete;

  void add_observer(Observer fn);
  void set_annotator(Annotator fn);

  /// Non-blocking; returns false and counts a drop when the queue is full.
  bool submit(TapRecord rec);
  /// Blocks until every submitted record has reached the file.
  void drain();
  void stop();

  std::uint64_t dropped() const { return dropped_.load(); }
  std::uint64_t logged() const { return logged_.load(); }
  std::optional<std::filesystem::path> path() const { return opts_.path; }

 private:
  void encode_loop();
  void write_loop();

  Options opts_;
  std::unique_ptr<PcapngWriter> writer_;
  std::vector<Observer> observers_;
  Annotator annotator_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<TapRecord> queue_;
  std::deque<Bytes> blocks_;
  std::size_t in_flight_ = 0;
  bool stopping_ = false;

  std::atomic<std::uint64_t> dropped_{0};
  std::atomic<std::uint64_t> logged_{0};
  std::thread encoder_;
  std::thread writer_thread_;
};

struct UploadConditions {
  bool on_demand = false;
  bool charging = false;
  bool on_wifi = false;

  bool satisfied() const { return on_demand || (charging && on_wifi); }
};

struct UploadReport {
  bool attempted = false;
  std::vector<std::filesystem::path> archived;
  std::vector<std::filesystem::path> retained;
  bool retryable = false;
  int last_status = 0;
};

/// Sends every closed .pcapng file in `log_dir` (all but `active`) as one
/// multipart/form-data part to `url`; acknowledged files move to
/// `log_dir/archived`.
UploadReport upload_logs(const std::filesystem::path& log_dir, const std::optional<std::filesystem::path>& active,
                         const std::string& url, const UploadConditions& conditions);

struct ValidationReport {
  bool valid = false;
  std::size_t blocks = 0;
  std::size_t packets = 0;
  std::string error;
};

/// Structural check: block alignment, matching lengths, SHB/IDB ordering,
/// EPB interface references and captured lengths.
ValidationReport validate_pcapng(const std::filesystem::path& file);

}  // namespace antproxy::capture
