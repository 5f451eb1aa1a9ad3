#pragma once

#include <array>
#include <cstdint>
#include <cstring>

#include "deltasync/common.hpp"

namespace deltasync {

// CRC-32C (Castagnoli, reflected polynomial 0x82F63B78), as used in segment frames.
namespace detail {

inline const std::array<std::uint32_t, 256>& crc32c_table() {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? (c >> 1) ^ 0x82F63B78u : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

inline std::uint32_t crc32c_sw(std::uint32_t crc, const std::uint8_t* p, std::size_t n) {
  const auto& t = crc32c_table();
  while (n--) crc = t[(crc ^ *p++) & 0xFF] ^ (crc >> 8);
  return crc;
}

#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
__attribute__((target("sse4.2"))) inline std::uint32_t crc32c_hw(std::uint32_t crc, const std::uint8_t* p,
                                                                  std::size_t n) {
  std::uint64_t c = crc;
  while (n >= 8) {
    std::uint64_t word;
    std::memcpy(&word, p, 8);
    c = __builtin_ia32_crc32di(c, word);
    p += 8;
    n -= 8;
  }
  auto c32 = static_cast<std::uint32_t>(c);
  while (n--) c32 = __builtin_ia32_crc32qi(c32, *p++);
  return c32;
}

inline bool have_sse42() {
  static const bool ok = __builtin_cpu_supports("sse4.2");
  return ok;
}
#endif

}  // namespace detail

inline std::uint32_t crc32c_extend(std::uint32_t crc, ByteSpan data) {
  std::uint32_t c = ~crc;
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  if (detail::have_sse42()) return ~detail::crc32c_hw(c, data.data(), data.size());
#endif
  return ~detail::crc32c_sw(c, data.data(), data.size());
}

inline std::uint32_t crc32c(ByteSpan data) { return crc32c_extend(0, data); }

}  // namespace deltasync
