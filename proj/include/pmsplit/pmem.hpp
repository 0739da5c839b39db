// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pmsplit {

inline constexpr uint64_t kCacheLine = 64;   // persistence unit (clwb granularity)
inline constexpr uint64_t kGranule = 8;      // store atomicity unit, 8-byte aligned
inline constexpr uint64_t kPage = 4096;

struct IoCounters {
  uint64_t bytes_stored = 0;        // temporal store payload bytes
  uint64_t bytes_stored_nt = 0;     // non-temporal store payload bytes
  uint64_t flush_count = 0;         // cache lines covered by flush calls
  uint64_t fence_count = 0;
  uint64_t bytes_persisted = 0;     // granule bytes committed to the persistent image
  uint64_t journal_commit_count = 0;
  uint64_t log_entries_written = 0;
  uint64_t relink_data_bytes_copied = 0;
};

// One trace event per store granule: payloads are split so that no event
// straddles an 8-byte-aligned boundary. Flush events cover exactly one line.
struct TraceEvent {
  enum class Kind : uint8_t { kStore, kStoreNt, kFlush, kFence };

  uint64_t seq = 0;
  uint64_t addr = 0;             // unused for Fence
  Kind kind = Kind::kStore;
  uint8_t len = 0;               // payload bytes (stores), 0 otherwise
  std::array<uint8_t, 8> data{}; // store payload

  bool is_store() const { return kind == Kind::kStore || kind == Kind::kStoreNt; }
};

// Byte-addressable persistent-memory emulation with x86-like persistence
// semantics: a volatile image observed by loads, a persistent image holding
// what survives a crash under the strict-epoch policy, and per-cache-line
// lists of pending granule writes in program order.
//
// Persistence rule: fence() commits, per line, the pending prefix up to the
// last granule flagged flushed or non-temporal. Committing the whole prefix
// (rather than flagged granules only) models line-granularity write-back and
// keeps program order per granule; pending suffixes stay eligible for the
// adversarial crash policy.
//
// Concurrency contract: callers serialize mutating calls externally; loads
// may run concurrently with loads. The device does no internal locking.
class PmemDevice {
 public:
  enum class ImageKind { kVolatile, kPersistent };

  explicit PmemDevice(uint64_t capacity, bool tracing = true);

  // Builds a clean device (volatile == persistent, nothing pending) from a
  // previously captured persistent image. Used for crash-state replay.
  static PmemDevice from_image(std::vector<uint8_t> image, bool tracing = true);

  uint64_t capacity() const { return capacity_; }

  void store(uint64_t addr, std::span<const uint8_t> data);
  void store_nt(uint64_t addr, std::span<const uint8_t> data);
  // Convenience for bulk patterns (zeroing); equivalent to chunked store_nt.
  void store_nt_fill(uint64_t addr, uint8_t value, uint64_t len);
  void flush(uint64_t addr, uint64_t len);
  void fence();

  void load(uint64_t addr, std::span<uint8_t> out) const;
  std::vector<uint8_t> load(uint64_t addr, uint64_t len) const;

  std::vector<uint8_t> snapshot(ImageKind kind) const;
  std::span<const uint8_t> image(ImageKind kind) const;

  // Persistent image with an adversarial choice applied on top: for each
  // line, the first `line_prefix[line]` pending granules also persist.
  // Missing lines persist nothing. Granules apply atomically (8-byte rule).
  std::vector<uint8_t> crash_image(const std::map<uint64_t, size_t>& line_prefix) const;

  // Pending granule count per dirty line, for enumerating crash choices.
  std::map<uint64_t, size_t> pending_line_counts() const;
  bool has_pending() const { return !dirty_lines_.empty(); }

  const IoCounters& counters() const { return counters_; }
  // Upper layers account their own events (journal commits, log entries,
  // relink copies) through the shared counter block.
  IoCounters& counters_mut() { return counters_; }
  // Counters reset only at named checkpoint boundaries (bench warm starts).
  void reset_counters(std::string_view checkpoint_label);
  const std::string& last_counter_checkpoint() const { return counter_checkpoint_; }

  const std::vector<TraceEvent>& trace() const { return trace_; }
  void reset_trace();
  void set_tracing(bool enabled) { tracing_ = enabled; }
  bool tracing() const { return tracing_; }

  // Text dump, one event per line:
  //   S <addr> <len> <hex>   temporal store granule
  //   N <addr> <len> <hex>   non-temporal store granule
  //   F <line_addr>          cache line flush
  //   M                      memory fence
  void dump_trace(std::ostream& out) const;

 private:
  // Pending writes are kept as runs of consecutive same-flag granules within
  // one line (a bulk store adds one run per line, not eight). Runs either
  // start 8-aligned with a multiple-of-8 length, or hold a single partial
  // granule, so slicing a run at granule boundaries stays trivial and the
  // per-granule crash semantics are unchanged.
  struct PendingWrite {
    uint64_t addr = 0;
    uint8_t len = 0;
    bool flushed = false;
    bool non_temporal = false;
    std::array<uint8_t, kCacheLine> data{};

    size_t granules() const {
      return (addr % kGranule == 0 && len % kGranule == 0) ? len / kGranule : 1;
    }
  };

  void check_range(uint64_t addr, uint64_t len) const;
  void record_store(uint64_t addr, std::span<const uint8_t> data, bool non_temporal);

  uint64_t capacity_ = 0;
  std::vector<uint8_t> volatile_image_;
  std::vector<uint8_t> persistent_image_;
  // Ordered by line address for deterministic iteration.
  std::map<uint64_t, std::vector<PendingWrite>> dirty_lines_;
  std::vector<TraceEvent> trace_;
  IoCounters counters_;
  uint64_t next_seq_ = 0;
  bool tracing_ = true;
  std::string counter_checkpoint_ = "init";
};

}  // namespace pmsplit
