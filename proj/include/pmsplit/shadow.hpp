// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmsplit/script.hpp"
#include "pmsplit/status.hpp"
#include "pmsplit/usplit.hpp"

namespace pmsplit {

// Flat in-memory files: the equivalence oracle for the library file system.
// `files` is the logical view every read sees; `durable_files` is what a
// crash would leave behind: appends (and any write that extends the file)
// stage wholesale and reach durability only at fsync, while plain overwrites
// land on durable bytes immediately.
struct ShadowFs {
  std::map<std::string, std::vector<uint8_t>> files;
  std::map<std::string, std::vector<uint8_t>> durable_files;

  void open_create(const std::string& name) {
    if (!files.contains(name)) {
      files[name] = {};
      durable_files[name] = {};
    }
  }
  void write(const std::string& name, uint64_t off, std::span<const uint8_t> data) {
    auto& f = files[name];
    const uint64_t old_size = f.size();
    if (off + data.size() > f.size()) f.resize(off + data.size(), 0);
    std::copy(data.begin(), data.end(), f.begin() + static_cast<ptrdiff_t>(off));
    // The sub-range landing on already-durable bytes is an in-place
    // overwrite and becomes durable immediately; anything beyond stages
    // until fsync. (Strict mode recovers the full logical view from its log,
    // so this only feeds the posix/sync oracle.)
    (void)old_size;
    auto& d = durable_files[name];
    const uint64_t end = std::min<uint64_t>(off + data.size(), d.size());
    for (uint64_t i = off; i < end; ++i) d[i] = data[i - off];
  }
  std::vector<uint8_t> read(const std::string& name, uint64_t off, uint64_t len) const {
    auto it = files.find(name);
    if (it == files.end() || off >= it->second.size()) return {};
    len = std::min(len, it->second.size() - off);
    return {it->second.begin() + static_cast<ptrdiff_t>(off),
            it->second.begin() + static_cast<ptrdiff_t>(off + len)};
  }
  void fsync(const std::string& name) {
    auto it = files.find(name);
    if (it != files.end()) durable_files[name] = it->second;
  }
  void unlink(const std::string& name) {
    files.erase(name);
    durable_files.erase(name);
  }
  void rename(const std::string& a, const std::string& b) {
    auto it = files.find(a);
    if (it == files.end()) return;
    files[b] = std::move(it->second);
    files.erase(a);
    durable_files[b] = std::move(durable_files[a]);
    durable_files.erase(a);
  }
};

// Drives a Usplit instance and the shadow model in lockstep from one script,
// keeping a single source of truth for cursors so both sides see identical
// absolute offsets. Read results are compared byte-for-byte on the way.
class ScriptRunner {
 public:
  struct Options {
    bool compare_reads = true;
    bool compare_sizes = true;
  };

  explicit ScriptRunner(Usplit& us) : us_(&us) {}
  ScriptRunner(Usplit& us, Options options) : us_(&us), options_(options) {}

  // Applies one op; returns error on any divergence or file-system error.
  Status step(const ScriptOp& op);
  Status run(std::span<const ScriptOp> ops);

  const ShadowFs& shadow() const { return shadow_; }
  ShadowFs& shadow() { return shadow_; }
  uint64_t mismatches() const { return mismatches_; }

  // Which file and resolved absolute range the last step touched (writes,
  // reads, fsyncs); used by the crash checker's golden timeline.
  struct LastOp {
    std::string name;
    uint64_t off = 0;
    uint64_t len = 0;
    bool is_append = false;
  };
  const LastOp& last_op() const { return last_op_; }

  // Full byte-level comparison of every live user file via the usplit view.
  Status compare_all();

 private:
  struct Cursor {
    int us_fd = -1;
    std::string name;
    uint64_t offset = 0;
    bool closed = false;
    bool dead = false;  // file unlinked or displaced; close still works
  };

  Usplit* us_;
  Options options_;
  ShadowFs shadow_;
  std::vector<Cursor> fds_;  // script fd -> cursor
  uint64_t mismatches_ = 0;
  LastOp last_op_;
};

}  // namespace pmsplit
