// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmsplit/faults.hpp"
#include "pmsplit/kfs.hpp"
#include "pmsplit/pmem.hpp"
#include "pmsplit/status.hpp"

namespace pmsplit {

enum class Mode { kPosix, kSync, kStrict };

std::string_view mode_name(Mode mode);
Result<Mode> mode_from_name(std::string_view name);

struct UsplitConfig {
  uint64_t map_size = 2ull * 1024 * 1024;      // region granularity for mappings
  uint32_t staging_count = 10;                 // staging files pre-allocated at startup
  uint64_t staging_size = 4ull * 1024 * 1024;  // per staging file
  uint64_t log_size = 8ull * 1024 * 1024;      // strict-mode operation log
};

// 64-byte operation-log entry. Wire layout (little-endian, byte offsets):
//   0  opcode      u16
//   2  flags       u16
//   4  reserved    u32 (zero; alignment)
//   8  target_ino  u64
//   16 target_off  u64
//   24 staging_ino u64
//   32 staging_off u64
//   40 size        u64
//   48 seq         u64
//   56 pad         u32 (zero)
//   60 checksum    u32, CRC-32 over bytes [0, 60)
// An all-zero slot is unused; a nonzero slot is valid iff the checksum
// matches. Valid entries carry strictly increasing seq in slot order.
struct LogEntry {
  enum Opcode : uint16_t {
    kData = 1,          // staged append or strict overwrite
    kCreate = 2,
    kUnlink = 3,        // tombstone: drop earlier data entries for target_ino
    kRenameIntent = 4,
    kRenameApply = 5,   // tombstone for the displaced inode (target_ino, may be 0)
    kFsyncDone = 6,     // marker: earlier data entries for target_ino are applied
    kLogInit = 7,       // slot 0 header; log is ignored without it
    kUnlinkIntent = 8,  // informational; the barrier is written post-commit
  };
  enum Flags : uint16_t {
    kFlagAppend = 1,
  };

  uint16_t opcode = 0;
  uint16_t flags = 0;
  uint64_t target_ino = 0;
  uint64_t target_off = 0;
  uint64_t staging_ino = 0;
  uint64_t staging_off = 0;
  uint64_t size = 0;
  uint64_t seq = 0;

  static constexpr size_t kBytes = 64;
  void serialize(std::span<uint8_t, kBytes> out) const;
  // Parses and checks the checksum; nullopt for invalid (torn) slots.
  static std::optional<LogEntry> parse(std::span<const uint8_t, kBytes> in);
  static bool slot_is_zero(std::span<const uint8_t, kBytes> in);
};

struct StagedRange {
  uint64_t target_off = 0;
  uint64_t len = 0;
  uint32_t staging_index = 0;  // into the staging pool
  uint64_t staging_off = 0;
  bool strict_overwrite = false;
};

// The user-space library file system: POSIX-like calls served from mapped
// regions, staging for appends (and strict overwrites), relink on fsync, and
// the strict-mode operation log. Thread-safe within one instance; the log
// tail is advanced by compare-and-swap so concurrent writers take disjoint
// slots. Cross-instance coordination happens only through kfs.
class Usplit {
 public:
  static Result<std::unique_ptr<Usplit>> init(PmemDevice& dev, Kfs& kfs, Mode mode,
                                              UsplitConfig config = {});

  struct RecoverStats {
    uint64_t logs_found = 0;
    uint64_t entries_replayed = 0;
    uint64_t relink_calls = 0;
  };

  // Crash recovery: mounts the file system, replays every valid operation
  // log in seq order (idempotent), then removes stale internal files. Makes
  // no allocations, so repeated recovery leaves an identical image.
  static Result<Kfs> recover_fs(PmemDevice& dev, RecoverStats* stats = nullptr);

  // recover_fs plus a fresh instance over the recovered fs. The staging pool
  // and log are created lazily on first write.
  static Result<std::unique_ptr<Usplit>> recover(PmemDevice& dev, Mode mode,
                                                 UsplitConfig config = {});

  ~Usplit();

  Result<int> open(std::string_view name, bool create_if_missing = true);
  Status close(int fd);
  Result<int> dup(int fd);
  enum class Whence { kSet, kCur, kEnd };
  Result<uint64_t> lseek(int fd, int64_t offset, Whence whence);

  Result<std::vector<uint8_t>> read(int fd, uint64_t len);
  Result<std::vector<uint8_t>> pread(int fd, uint64_t off, uint64_t len);
  Result<uint64_t> write(int fd, std::span<const uint8_t> data);
  Result<uint64_t> pwrite(int fd, uint64_t off, std::span<const uint8_t> data);
  Status fsync(int fd);
  Status unlink(std::string_view name);
  Status rename(std::string_view old_name, std::string_view new_name);
  Result<KfsStat> stat(int fd);

  // Relinks every open file with staged data, then zeroes and reuses the log.
  Status checkpoint();

  // Serialized instance state (fd table, offsets, staged ranges, pool and log
  // positions); models survival across an address-space replacement.
  std::string save_context() const;
  static Result<std::unique_ptr<Usplit>> load_context(PmemDevice& dev, Kfs& kfs,
                                                      const std::string& context);

  Mode mode() const { return mode_; }
  const UsplitConfig& config() const { return config_; }
  uint32_t instance_id() const { return instance_id_; }
  Kfs& kfs() { return *kfs_; }

  uint64_t staged_bytes() const;
  uint64_t staging_capacity_left() const;
  uint64_t log_tail() const { return log_tail_.load(std::memory_order_relaxed); }
  uint64_t log_capacity_slots() const;

  void set_faults(const FaultInjection* faults) { faults_ = faults; }

  static constexpr char kInternalPrefix = '#';
  static bool is_internal_name(std::string_view name) {
    return !name.empty() && name[0] == kInternalPrefix;
  }

 private:
  struct StagingFile {
    uint64_t ino = 0;
    uint32_t index = 0;
    uint64_t capacity = 0;
    uint64_t cursor = 0;
    std::vector<Segment> segments;  // resolved once at pre-allocation
  };

  struct MappedSeg {
    uint64_t len = 0;
    uint64_t device_addr = 0;
    bool from_staging = false;
  };

  struct StagedSeg {
    uint64_t len = 0;
    uint32_t staging_index = 0;
    uint64_t staging_off = 0;
    bool strict_overwrite = false;
  };

  struct FileState {
    uint64_t ino = 0;
    std::string name;
    uint64_t kfs_size = 0;    // size the kernel side publishes
    uint64_t local_size = 0;  // kfs_size plus staged appends (instance view)
    uint64_t generation = 0;
    std::map<uint64_t, MappedSeg> mapping;  // file_off -> segment, disjoint
    std::map<uint64_t, StagedSeg> staged;   // file_off -> staged data, disjoint
    // Staging file currently checked out to this file; keeping writes of one
    // file together keeps its relinked extents mergeable.
    int staging_affinity = -1;
    bool dead = false;
  };

  struct OpenFile {
    uint64_t ino = 0;
    uint64_t offset = 0;  // shared by dup'ed descriptors
    int refcount = 1;
  };

  Usplit(PmemDevice& dev, Kfs& kfs, Mode mode, UsplitConfig config);

  Status setup_pool_and_log();
  Status ensure_pool_ready();
  Status add_staging_file();
  Result<std::pair<uint32_t, uint64_t>> stage_reserve(FileState& f, uint64_t len, uint64_t phase);
  uint64_t staging_device_addr(const StagingFile& sf, uint64_t off) const;
  void staging_store(const StagingFile& sf, uint64_t off, std::span<const uint8_t> data);
  void staging_load(const StagingFile& sf, uint64_t off, std::span<uint8_t> out) const;

  std::shared_ptr<FileState> file_state(uint64_t ino);
  Result<std::shared_ptr<FileState>> resolve(int fd, OpenFile** open_out);
  Status ensure_mapped(FileState& f, uint64_t off, uint64_t len);
  void insert_mapping(FileState& f, uint64_t off, uint64_t len, uint64_t device_addr,
                      bool from_staging, bool override_existing);
  void erase_mapping(FileState& f, uint64_t off, uint64_t len);
  void insert_staged(FileState& f, uint64_t off, StagedSeg seg);

  Result<uint64_t> write_locked(FileState& f, uint64_t off, std::span<const uint8_t> data);
  Result<std::vector<uint8_t>> read_locked(FileState& f, uint64_t off, uint64_t len);
  Status fsync_locked(FileState& f, bool log_marker);

  Status checkpoint_locked();
  Status log_setup();
  Status log_append(const LogEntry& entry);
  uint64_t log_slot_addr(uint64_t slot) const;

  static Status replay_log(Kfs& kfs, uint64_t log_ino, RecoverStats* stats);

  PmemDevice* dev_;
  Kfs* kfs_;
  std::unique_ptr<Kfs> owned_kfs_;  // recover() path
  Mode mode_;
  UsplitConfig config_;
  uint32_t instance_id_ = 0;
  bool pool_ready_ = false;

  mutable std::shared_mutex mu_;
  std::map<int, std::shared_ptr<OpenFile>> fds_;
  int next_fd_ = 0;
  std::map<uint64_t, std::shared_ptr<FileState>> files_;      // by ino
  std::map<std::string, KfsStat> attr_cache_;                 // survives close
  std::vector<StagingFile> pool_;
  uint32_t next_staging_index_ = 0;

  uint64_t log_ino_ = 0;
  std::vector<Segment> log_segments_;
  std::atomic<uint64_t> log_tail_{1};  // slot 0 is the init header

  const FaultInjection* faults_ = nullptr;
};

}  // namespace pmsplit
