#pragma once

// Brute-force reference matchers used as oracles by the DPI tests.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

namespace antproxy::testing {

/// Every (pattern index, start offset) occurrence, sorted.
inline std::vector<std::pair<std::uint32_t, std::size_t>> naive_scan(const std::string& text,
                                                                      const std::vector<std::string>& patterns) {
  std::vector<std::pair<std::uint32_t, std::size_t>> out;
  for (std::uint32_t p = 0; p < patterns.size(); ++p) {
    const std::string& pat = patterns[p];
    if (pat.empty() || pat.size() > text.size()) continue;
    for (std::size_t pos = text.find(pat); pos != std::string::npos; pos = text.find(pat, pos + 1)) {
      out.emplace_back(p, pos);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline bool contains(const std::vector<std::uint8_t>& haystack, const std::string& needle) {
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

}  // namespace antproxy::testing
