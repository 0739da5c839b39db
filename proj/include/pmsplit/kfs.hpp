// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmsplit/faults.hpp"
#include "pmsplit/pmem.hpp"
#include "pmsplit/status.hpp"

namespace pmsplit {

// On-device layout (byte-exact details in docs/ondisk_layout.md):
//   block 0        superblock
//   journal        epoch cell + redo journal (byte-range records, 64B commits)
//   bitmap         one bit per device block
//   inode table    one 4096B slot per inode
//   overflow       chained extent-overflow slots, one block each
//   namespace      flat table of 64B {ino, name} entries
//   data           everything else
struct Geometry {
  uint64_t block_size = kPage;
  uint64_t total_blocks = 0;
  uint64_t journal_blocks = 0;
  uint64_t inode_slots = 0;      // inode table blocks, one slot per block
  uint64_t overflow_slots = 0;   // extent-overflow blocks, one slot per block
  uint64_t namespace_blocks = 0;

  static Geometry for_capacity(uint64_t capacity_bytes);

  uint64_t bitmap_blocks() const {
    return (total_blocks + block_size * 8 - 1) / (block_size * 8);
  }
  uint64_t journal_start() const { return 1; }
  uint64_t bitmap_start() const { return journal_start() + journal_blocks; }
  uint64_t inode_table_start() const { return bitmap_start() + bitmap_blocks(); }
  uint64_t overflow_start() const { return inode_table_start() + inode_slots; }
  uint64_t namespace_start() const { return overflow_start() + overflow_slots; }
  uint64_t data_start() const { return namespace_start() + namespace_blocks; }
  uint64_t namespace_entries() const { return namespace_blocks * (block_size / 64); }
  uint64_t metadata_blocks() const { return data_start(); }
};

struct Extent {
  uint64_t file_block = 0;
  uint64_t device_block = 0;
  uint64_t length = 0;  // blocks, capped at kMaxExtentBlocks

  bool operator==(const Extent&) const = default;
};

inline constexpr uint64_t kMaxExtentBlocks = 512;   // 2 MB at 4K blocks
inline constexpr uint64_t kInlineExtents = 168;     // extents in the inode slot
inline constexpr uint64_t kOverflowExtents = 170;   // extents per overflow slot
inline constexpr uint64_t kMaxNameLen = 55;

struct InodeInfo {
  uint64_t ino = 0;
  uint64_t size = 0;
  uint64_t generation = 0;
  std::vector<Extent> extents;          // sorted by file_block, non-overlapping
  std::vector<uint32_t> overflow_chain; // overflow slot indexes holding the tail
};

struct KfsStat {
  uint64_t size = 0;
  uint64_t generation = 0;
};

// A contiguous device byte range backing part of a file range.
struct Segment {
  uint64_t device_addr = 0;
  uint64_t length = 0;

  bool operator==(const Segment&) const = default;
};

struct StructureReport {
  uint64_t free_blocks = 0;
  uint64_t live_extent_blocks = 0;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
};

// How relink moves the block-aligned body. Native swaps extents and frees the
// replaced destination blocks in one transaction. The fallback mirrors the
// allocate-at-destination / swap / de-allocate composition real swap_extents
// requires, as three transactions.
enum class RelinkStrategy { kNative, kAllocSwapDealloc };

// One source range landing at a destination offset. Batched pieces commit in
// a single journal transaction so an fsync's staged ranges apply atomically.
struct RelinkPiece {
  uint64_t src_ino = 0;
  uint64_t src_off = 0;
  uint64_t dst_off = 0;
  uint64_t size = 0;
};

// Minimal journaled extent file system over a PmemDevice: flat namespace,
// per-op redo transactions, a direct (kernel-path style) write path, and the
// relink primitive. Mutating calls must be serialized by the caller; queries
// may run concurrently with each other but not with a mutation.
class Kfs {
 public:
  static Status mkfs(PmemDevice& dev, const Geometry& geo);
  // Replays committed journal transactions in txn order, discards the rest,
  // zeroes the journal tail. Safe to call repeatedly (idempotent).
  static Result<Kfs> mount(PmemDevice& dev);

  // Structural scan over a raw image, independent of any mounted state:
  // superblock sanity, allocator conservation, double-ownership, extent and
  // namespace validity.
  static Result<StructureReport> verify_image(std::span<const uint8_t> image);

  Result<uint64_t> create(std::string_view name);
  Result<uint64_t> lookup(std::string_view name) const;
  Status unlink(std::string_view name);
  Status rename(std::string_view old_name, std::string_view new_name);

  Status allocate(uint64_t ino, uint64_t off, uint64_t len);
  Status truncate(uint64_t ino, uint64_t size);
  Result<uint64_t> write_direct(uint64_t ino, uint64_t off, std::span<const uint8_t> data);
  Result<std::vector<uint8_t>> read_direct(uint64_t ino, uint64_t off, uint64_t len) const;
  Result<std::vector<Segment>> map_extents(uint64_t ino, uint64_t off, uint64_t len) const;
  Status relink(uint64_t src_ino, uint64_t src_off, uint64_t dst_ino, uint64_t dst_off,
                uint64_t size, RelinkStrategy strategy = RelinkStrategy::kNative);
  // All pieces move into dst_ino in one transaction; pieces must not overlap
  // in destination space.
  Status relink_batch(uint64_t dst_ino, std::span<const RelinkPiece> pieces);
  Status fsync_meta(uint64_t ino);
  Result<KfsStat> stat(uint64_t ino) const;

  // Persists pending applications and zeroes the journal region, leaving the
  // image in the same canonical state a fresh mount produces. Recovery ends
  // with this so repeated recovery is image-identical.
  void reset_journal();

  const Geometry& geometry() const { return geo_; }
  PmemDevice& device() { return *dev_; }
  uint64_t free_blocks() const { return free_blocks_; }
  std::vector<std::string> list_names() const;
  Result<InodeInfo> inode(uint64_t ino) const;

  // Cumulative count of public operations, the stand-in for kernel traps.
  uint64_t call_count() const { return calls_->load(std::memory_order_relaxed); }

  void set_faults(const FaultInjection* faults) { faults_ = faults; }

 private:
  struct Record {
    uint64_t addr = 0;
    std::vector<uint8_t> bytes;
  };

  Kfs(PmemDevice& dev, Geometry geo) : dev_(&dev), geo_(geo) {}

  Status load_state();  // rebuild caches from the device image

  // Journal machinery.
  Status journal_commit(std::vector<Record> records);
  void journal_reset();
  void bump_epoch();

  // Serialization helpers (device byte offsets). Ordinary metadata ops
  // journal whole blocks the way stock ext4 does; relink uses byte-granular
  // records, modeling the patched metadata-only swap path.
  uint64_t inode_addr(uint64_t ino) const;
  uint64_t overflow_addr(uint32_t slot) const;
  uint64_t namespace_entry_addr(uint64_t index) const;
  // Serializes `next` (reusing, growing, or shrinking its overflow chain) and
  // appends the inode-slot and overflow-block records. Mutates the in-memory
  // overflow allocation; callers roll that back on transaction failure.
  Status append_inode_records(InodeInfo& next, std::vector<Record>* out, bool whole_block);
  void append_freed_inode_records(const InodeInfo& prev, std::vector<Record>* out,
                                  bool whole_block);
  Record make_namespace_block_record(uint64_t index, uint64_t ino, std::string_view name) const;
  std::vector<Record> make_bitmap_records(const std::vector<uint64_t>& changed_blocks) const;
  std::vector<Record> make_bitmap_block_records(const std::vector<uint64_t>& changed_blocks) const;

  // Allocator (operates on the cached bitmap; journaled via records).
  Result<std::vector<std::pair<uint64_t, uint64_t>>> reserve_runs(uint64_t count,
                                                                  std::vector<uint64_t>* changed);
  void mark_block(uint64_t block, bool allocated, std::vector<uint64_t>* changed);
  bool block_allocated(uint64_t block) const;

  Status allocate_internal(uint64_t ino, uint64_t off, uint64_t len);
  Result<std::vector<Segment>> map_extents_internal(uint64_t ino, uint64_t off, uint64_t len) const;
  Status relink_alloc_swap_dealloc(uint64_t src_ino, uint64_t src_off, uint64_t dst_ino,
                                   uint64_t dst_off, uint64_t size, uint64_t body_begin,
                                   uint64_t body_end);

  Result<uint64_t> find_free_namespace_slot() const;
  Result<uint64_t> find_free_inode() const;

  PmemDevice* dev_;
  Geometry geo_;
  std::vector<uint8_t> bitmap_;
  uint64_t free_blocks_ = 0;
  std::map<std::string, uint64_t> names_;           // name -> ino
  std::map<uint64_t, std::string> name_of_ino_;     // ino -> name
  std::map<std::string, uint64_t> name_slots_;      // name -> namespace index
  std::map<uint64_t, InodeInfo> inodes_;
  std::vector<bool> overflow_used_;
  uint64_t journal_cursor_ = 0;  // byte offset within the journal region
  uint64_t journal_epoch_ = 1;
  uint64_t next_txn_id_ = 1;
  uint64_t alloc_cursor_ = 0;    // next-fit scan position (volatile)
  // Shared atomic so const queries stay callable concurrently and the handle
  // remains movable.
  std::shared_ptr<std::atomic<uint64_t>> calls_ = std::make_shared<std::atomic<uint64_t>>(0);
  const FaultInjection* faults_ = nullptr;
};

// Extent-list helpers shared with tests.
namespace extents {
// Inserts a mapping, merging with adjacent extents where file and device
// ranges are both contiguous. Ranges must not overlap existing mappings.
void add_mapping(std::vector<Extent>& list, uint64_t file_block, uint64_t device_block,
                 uint64_t length);
// Removes [file_block, file_block+length), splitting extents as needed.
// Missing blocks in the range are ignored.
void remove_mapping(std::vector<Extent>& list, uint64_t file_block, uint64_t length);
// Device block for a file block, or 0 if unmapped (block 0 is the superblock
// and never appears in a data extent).
uint64_t device_block_of(const std::vector<Extent>& list, uint64_t file_block);
}  // namespace extents

}  // namespace pmsplit
