#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace rehabridge {

namespace detail {

constexpr std::array<std::uint16_t, 256> make_crc16_table(std::uint16_t poly) {
  std::array<std::uint16_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    auto crc = static_cast<std::uint16_t>(i << 8);
    for (int bit = 0; bit < 8; ++bit) {
      crc = (crc & 0x8000U) ? static_cast<std::uint16_t>((crc << 1) ^ poly) : static_cast<std::uint16_t>(crc << 1);
    }
    table[i] = crc;
  }
  return table;
}

inline constexpr auto kCrc16Table = make_crc16_table(0x1021);

}  // namespace detail

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xor-out.
class Crc16 {
 public:
  static constexpr std::uint16_t kInitial = 0xFFFF;
  static constexpr std::uint16_t kPolynomial = 0x1021;

  constexpr void update(std::uint8_t byte) noexcept {
    value_ = static_cast<std::uint16_t>((value_ << 8) ^ detail::kCrc16Table[((value_ >> 8) ^ byte) & 0xFFU]);
  }

  constexpr void update(std::span<const std::uint8_t> bytes) noexcept {
    for (const auto b : bytes) {
      update(b);
    }
  }

  constexpr std::uint16_t get() const noexcept { return value_; }

 private:
  std::uint16_t value_ = kInitial;
};

constexpr std::uint16_t crc16_ccitt_false(std::span<const std::uint8_t> bytes) noexcept {
  Crc16 crc;
  crc.update(bytes);
  return crc.get();
}

}  // namespace rehabridge
