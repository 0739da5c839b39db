// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmsplit/status.hpp"

namespace pmsplit {

// Workload script, one operation per line:
//   open <name>
//   write <fd> <off|@cur> <len> <seed>
//   read <fd> <off|@cur> <len>
//   fsync <fd>
//   close <fd>
//   unlink <name>
//   rename <a> <b>
//   mark <label>
// fd numbers count opens in order (the first open is fd 0). Lines starting
// with '#' and blank lines are ignored. Write payloads derive
// deterministically from <seed> and the absolute file offset.
struct ScriptOp {
  enum class Kind { kOpen, kWrite, kRead, kFsync, kClose, kUnlink, kRename, kMark };

  Kind kind = Kind::kMark;
  int fd = -1;
  bool at_cursor = false;
  uint64_t off = 0;
  uint64_t len = 0;
  uint64_t seed = 0;
  std::string name;
  std::string name2;
  std::string label;
};

Result<std::vector<ScriptOp>> parse_script(std::string_view text);
std::string format_script(std::span<const ScriptOp> ops);

// Deterministic payload bytes for (seed, absolute offset). Stable across
// calls: the byte at a given offset depends only on seed and offset.
void fill_payload(uint64_t seed, uint64_t file_off, std::span<uint8_t> out);
std::vector<uint8_t> make_payload(uint64_t seed, uint64_t file_off, uint64_t len);

}  // namespace pmsplit
