#pragma once

#include <cstdint>

namespace antproxy {

/// TCP sequence number with modulo-2^32 comparison.
class Seq32 {
 public:
  constexpr Seq32() = default;
  constexpr explicit Seq32(std::uint32_t v) : v_(v) {}

  constexpr std::uint32_t value() const { return v_; }

  constexpr Seq32 operator+(std::uint32_t n) const { return Seq32(v_ + n); }
  constexpr Seq32& operator+=(std::uint32_t n) {
    v_ += n;
    return *this;
  }
  /// Signed distance from `other` to this; valid while |distance| < 2^31.
  constexpr std::int32_t operator-(Seq32 other) const {
    return static_cast<std::int32_t>(v_ - other.v_);
  }

  constexpr bool operator==(const Seq32&) const = default;
  constexpr bool before(Seq32 other) const { return (*this - other) < 0; }
  constexpr bool after(Seq32 other) const { return (*this - other) > 0; }
  constexpr bool at_or_before(Seq32 other) const { return (*this - other) <= 0; }
  constexpr bool at_or_after(Seq32 other) const { return (*this - other) >= 0; }

 private:
  std::uint32_t v_ = 0;
};

}  // namespace antproxy
