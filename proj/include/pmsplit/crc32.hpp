// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace pmsplit {

// Standard CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320). Used by the
// journal commit records and the 64-byte operation-log entries.
namespace detail {
inline std::array<uint32_t, 256> make_crc32_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    }
    table[i] = c;
  }
  return table;
}
}  // namespace detail

inline uint32_t crc32(std::span<const uint8_t> data, uint32_t seed = 0) {
  static const std::array<uint32_t, 256> table = detail::make_crc32_table();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (uint8_t b : data) {
    c = table[(c ^ b) & 0xFFu] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

}  // namespace pmsplit
