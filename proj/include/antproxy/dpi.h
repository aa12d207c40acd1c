#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "antproxy/aho_corasick.h"
#include "antproxy/flow_key.h"
#include "antproxy/packet_codec.h"

namespace antproxy::dpi {

inline constexpr std::size_t kMaxPatternBytes = 1024;

enum class Action { Allow, Block, Scrub, Ask };

std::string_view action_name(Action a);
std::optional<Action> parse_action(std::string_view name);

struct Pattern {
  std::string id;
  std::string bytes;
  std::string label;

  friend bool operator==(const Pattern&, const Pattern&) = default;
};

using Match = AhoCorasick::Match;

/// Immutable compiled pattern set. Mutations build a new one.
class Ruleset {
 public:
  /// Throws Error(EmptyPattern), Error(DuplicatePatternId), or
  /// Error(InvalidArgument) for patterns longer than kMaxPatternBytes.
  static std::shared_ptr<const Ruleset> compile(std::vector<Pattern> patterns);

  const std::vector<Pattern>& patterns() const { return patterns_; }
  const Pattern& pattern(std::uint32_t index) const { return patterns_[index]; }
  bool empty() const { return patterns_.empty(); }

  /// Single pass over the buffer in place; every occurrence is reported.
  std::vector<Match> inspect(ByteView payload) const { return automaton_.find_all(payload); }

  template <typename Sink>
  void scan(ByteView payload, Sink&& sink) const {
    automaton_.scan(payload, std::forward<Sink>(sink));
  }

 private:
  std::vector<Pattern> patterns_;
  AhoCorasick automaton_;
};

/// Remembered per-(app, pattern) decisions. Unseen pairs resolve to Ask.
class PolicyTable {
 public:
  Action lookup(const std::string& app_id, const std::string& pattern_id) const;
  void set(const std::string& app_id, const std::string& pattern_id, Action action);
  bool erase(const std::string& app_id, const std::string& pattern_id);
  void erase_pattern(const std::string& pattern_id);
  const std::map<std::pair<std::string, std::string>, Action>& entries() const { return entries_; }

 private:
  std::map<std::pair<std::string, std::string>, Action> entries_;
};

struct LeakEvent {
  std::uint64_t seq = 0;
  std::int64_t timestamp_us = 0;
  std::string app_id;
  FlowKey flow;
  std::string pattern_id;
  std::string label;
  std::size_t offset = 0;
  Action action = Action::Ask;
  bool needs_decision = false;
};

enum class VerdictKind { Forward, Drop };

struct Verdict {
  VerdictKind kind = VerdictKind::Forward;
  bool modified = false;
  std::vector<LeakEvent> events;
};

/// Context the policy step needs besides the packet itself.
struct PolicyContext {
  std::string app_id;
  FlowKey flow;
  std::uint64_t scrub_seed = 0;
  std::int64_t now_us = 0;
};

/// Deterministic printable replacement of exactly `length` bytes.
std::string scrub_replacement(std::size_t length, std::uint64_t seed);

/// Decides the fate of `payload` given matches from Ruleset::inspect.
/// Scrubbed spans are rewritten in place with same-length replacements and
/// re-checked until no Scrub/Ask/Block pattern occurs in the result.
Verdict apply_policy_to_payload(std::span<std::uint8_t> payload, std::span<const Match> matches,
                                const Ruleset& rules, const PolicyTable& policies, const PolicyContext& ctx);

/// Datagram form: on modification, lengths are unchanged and checksums are
/// recomputed so the datagram stays wire-valid.
Verdict apply_policy(Datagram& d, std::span<const Match> matches, const Ruleset& rules,
                     const PolicyTable& policies, const PolicyContext& ctx);

/// Patterns plus remembered decisions, with atomically swapped snapshots
/// and an optional JSON-lines backing file.
class DpiStore {
 public:
  DpiStore();
  explicit DpiStore(std::filesystem::path file);

  void add_pattern(Pattern p);
  bool remove_pattern(const std::string& id);
  std::vector<Pattern> patterns() const;

  void set_policy(const std::string& app_id, const std::string& pattern_id, Action action);

  std::shared_ptr<const Ruleset> ruleset() const;
  std::shared_ptr<const PolicyTable> policies() const;

  /// Replaces in-memory state with the backing file's content, if any.
  void load();
  void save() const;

 private:
  void publish_locked();
  void save_locked() const;

  mutable std::mutex mu_;
  std::optional<std::filesystem::path> file_;
  std::vector<Pattern> patterns_;
  PolicyTable table_;
  std::shared_ptr<const Ruleset> ruleset_;
  std::shared_ptr<const PolicyTable> policies_;
};

/// Append-only leak history with live listeners.
class LeakHistory {
 public:
  using Listener = std::function<void(const LeakEvent&)>;

  LeakHistory() = default;
  explicit LeakHistory(std::filesystem::path jsonl);

  void record(LeakEvent e);
  std::vector<LeakEvent> since(std::int64_t timestamp_us) const;
  std::size_t size() const;

  std::size_t subscribe(Listener fn);
  void unsubscribe(std::size_t token);

  static std::vector<LeakEvent> read_file(const std::filesystem::path& jsonl);

 private:
  mutable std::mutex mu_;
  std::optional<std::filesystem::path> file_;
  std::vector<LeakEvent> events_;
  std::map<std::size_t, Listener> listeners_;
  std::size_t next_token_ = 1;
  std::uint64_t next_seq_ = 1;
};

}  // namespace antproxy::dpi
