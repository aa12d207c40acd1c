#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace antproxy::dpi {

/// Byte-oriented Aho-Corasick automaton.
///
/// Patterns are added by index; `build()` computes failure and dictionary
/// links. Scanning walks the caller's buffer in place and reports every
/// occurrence (overlapping and nested ones included) as (pattern, start).
class AhoCorasick {
 public:
  struct Match {
    std::uint32_t pattern;
    std::size_t offset;  // start of the occurrence in the scanned buffer

    friend bool operator==(const Match&, const Match&) = default;
    friend auto operator<=>(const Match&, const Match&) = default;
  };

  AhoCorasick() = default;
  explicit AhoCorasick(const std::vector<std::string>& patterns);

  /// Returns the index assigned to `pattern`. Empty patterns are ignored by
  /// the matcher; callers validate before adding.
  std::uint32_t add(std::span<const std::uint8_t> pattern);
  std::uint32_t add(const std::string& pattern);
  void build();

  std::size_t pattern_count() const { return lengths_.size(); }
  std::size_t state_count() const { return nodes_.size(); }

  template <typename Sink>
  void scan(std::span<const std::uint8_t> text, Sink&& sink) const {
    if (!dense_.empty()) {
      // Entries are row offsets (state * classes_) with kTerminal set when
      // the target state has output.
      const std::uint32_t* table = dense_.data();
      const std::uint8_t* data = text.data();
      const std::size_t size = text.size();
      std::uint32_t row = 0;
      for (std::size_t i = 0; i < size; ++i) {
        if (row == 0) {
          while (i < size && !starts_[data[i]]) ++i;
          if (i == size) break;
        }
        const std::uint32_t next = table[row + class_of_[data[i]]];
        row = next & ~kTerminal;
        if (next & kTerminal) report(static_cast<std::int32_t>(row / classes_), i + 1, sink);
      }
      return;
    }
    std::int32_t state = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
      state = step(state, text[i]);
      report(state, i + 1, sink);
    }
  }

  std::vector<Match> find_all(std::span<const std::uint8_t> text) const;

 private:
  struct Node {
    std::int32_t fail = 0;
    std::int32_t output = -1;         // self if terminal, else nearest terminal via fail chain
    std::int32_t dict_link = -1;      // next terminal along the fail chain
    std::int32_t first_pattern = -1;  // head of the list of patterns ending here
    std::uint32_t edge_begin = 0;     // range into edges_ after build()
    std::uint32_t edge_count = 0;
  };
  struct Edge {
    std::uint8_t byte;
    std::int32_t target;
  };

  static constexpr std::uint32_t kTerminal = 0x80000000u;
  /// Upper bound on dense table entries; larger automata use the sparse walk.
  static constexpr std::size_t kDenseLimit = 8u << 20;

  template <typename Sink>
  void report(std::int32_t state, std::size_t end, Sink& sink) const {
    for (std::int32_t out = nodes_[state].output; out >= 0; out = nodes_[out].dict_link) {
      for (std::int32_t p = nodes_[out].first_pattern; p >= 0; p = next_same_[p]) {
        sink(Match{static_cast<std::uint32_t>(p), end - lengths_[p]});
      }
    }
  }

  void build_dense(const std::vector<std::int32_t>& bfs_order);
  std::int32_t child(std::int32_t node, std::uint8_t byte) const;
  std::int32_t step(std::int32_t state, std::uint8_t byte) const {
    if (state == 0) return root_next_[byte];
    for (;;) {
      const std::int32_t next = child(state, byte);
      if (next >= 0) return next;
      state = nodes_[state].fail;
      if (state == 0) return root_next_[byte];
    }
  }

  std::vector<Node> nodes_{Node{}};
  std::vector<std::vector<Edge>> pending_edges_{{}};
  std::vector<Edge> edges_;
  std::int32_t root_next_[256]{};
  std::vector<std::size_t> lengths_;
  std::vector<std::int32_t> next_same_;
  std::vector<std::uint32_t> dense_;
  std::uint16_t class_of_[256]{};
  bool starts_[256]{};  // bytes leaving the root
  std::uint32_t classes_ = 1;
  bool built_ = false;
};

}  // namespace antproxy::dpi
