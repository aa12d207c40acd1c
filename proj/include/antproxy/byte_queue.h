#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace antproxy {

/// FIFO of bytes with cheap front consumption and random-access peeking.
class ByteQueue {
 public:
  std::size_t size() const { return buf_.size() - head_; }
  bool empty() const { return size() == 0; }

  void append(std::span<const std::uint8_t> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

  /// Copies up to out.size() bytes starting `offset` bytes past the front.
  std::size_t peek(std::size_t offset, std::span<std::uint8_t> out) const {
    if (offset >= size()) return 0;
    const std::size_t n = std::min(out.size(), size() - offset);
    std::memcpy(out.data(), buf_.data() + head_ + offset, n);
    return n;
  }

  std::span<const std::uint8_t> view(std::size_t offset, std::size_t len) const {
    if (offset >= size()) return {};
    return {buf_.data() + head_ + offset, std::min(len, size() - offset)};
  }

  void consume(std::size_t n) {
    head_ += std::min(n, size());
    if (head_ == buf_.size()) {
      buf_.clear();
      head_ = 0;
    } else if (head_ >= (256u << 10) && head_ * 2 >= buf_.size()) {
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(head_));
      head_ = 0;
    }
  }

  void clear() {
    buf_.clear();
    head_ = 0;
  }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t head_ = 0;
};

}  // namespace antproxy
