// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/kfs.hpp"

#include <algorithm>
#include <array>
#include <cstring>

#include "pmsplit/crc32.hpp"

namespace pmsplit {

namespace {

constexpr uint64_t kSuperMagic = 0x4B54494C50534D50ull;  // "PMSPLITK"
constexpr uint32_t kTxnHeaderMagic = 0x58544A50u;        // "PJTX"
constexpr uint32_t kTxnCommitMagic = 0x4D434A50u;        // "PJCM"
constexpr uint32_t kSuperVersion = 1;

constexpr uint32_t kEpochMagic = 0x50454A50u;        // "PJEP"
constexpr uint64_t kSuperblockBytes = 116;
constexpr uint64_t kEpochCellBytes = 64;  // journal offset 0; epoch is an atomic u64
constexpr uint64_t kTxnHeaderBytes = 32;
constexpr uint64_t kCommitBytes = 64;
constexpr uint64_t kNamespaceEntryBytes = 64;
constexpr uint64_t kInodeHeaderBytes = 32;
constexpr uint64_t kOverflowHeaderBytes = 16;
constexpr uint32_t kOverflowMagic = 0x4C46564Fu;  // "OVFL"
constexpr uint64_t kExtentBytes = 24;

void put_u32(uint8_t* p, uint32_t v) {
  p[0] = static_cast<uint8_t>(v);
  p[1] = static_cast<uint8_t>(v >> 8);
  p[2] = static_cast<uint8_t>(v >> 16);
  p[3] = static_cast<uint8_t>(v >> 24);
}

void put_u64(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

uint64_t round_up(uint64_t v, uint64_t align) { return (v + align - 1) / align * align; }
uint64_t round_down(uint64_t v, uint64_t align) { return v / align * align; }

std::vector<uint8_t> serialize_superblock(const Geometry& geo) {
  std::vector<uint8_t> b(kSuperblockBytes, 0);
  put_u64(&b[0], kSuperMagic);
  put_u32(&b[8], kSuperVersion);
  put_u32(&b[12], static_cast<uint32_t>(geo.block_size));
  put_u64(&b[16], geo.total_blocks);
  put_u64(&b[24], geo.journal_start());
  put_u64(&b[32], geo.journal_blocks);
  put_u64(&b[40], geo.bitmap_start());
  put_u64(&b[48], geo.bitmap_blocks());
  put_u64(&b[56], geo.inode_table_start());
  put_u64(&b[64], geo.inode_slots);
  put_u64(&b[72], geo.overflow_start());
  put_u64(&b[80], geo.overflow_slots);
  put_u64(&b[88], geo.namespace_start());
  put_u64(&b[96], geo.namespace_blocks);
  put_u64(&b[104], geo.data_start());
  put_u32(&b[112], crc32(std::span<const uint8_t>(b.data(), 112)));
  return b;
}

Result<Geometry> parse_superblock(std::span<const uint8_t> image) {
  if (image.size() < kSuperblockBytes) return Status::bad_image("image smaller than superblock");
  const uint8_t* b = image.data();
  if (get_u64(&b[0]) != kSuperMagic) return Status::bad_image("bad superblock magic");
  if (get_u32(&b[112]) != crc32(std::span<const uint8_t>(b, 112))) {
    return Status::bad_image("superblock checksum mismatch");
  }
  if (get_u32(&b[8]) != kSuperVersion) return Status::bad_image("unsupported version");
  Geometry geo;
  geo.block_size = get_u32(&b[12]);
  geo.total_blocks = get_u64(&b[16]);
  geo.journal_blocks = get_u64(&b[32]);
  geo.inode_slots = get_u64(&b[64]);
  geo.overflow_slots = get_u64(&b[80]);
  geo.namespace_blocks = get_u64(&b[96]);
  if (geo.block_size != kPage || geo.total_blocks == 0) {
    return Status::bad_image("bad geometry");
  }
  if (geo.total_blocks * geo.block_size != image.size()) {
    return Status::bad_image("geometry does not match image size");
  }
  if (get_u64(&b[24]) != geo.journal_start() || get_u64(&b[40]) != geo.bitmap_start() ||
      get_u64(&b[48]) != geo.bitmap_blocks() || get_u64(&b[56]) != geo.inode_table_start() ||
      get_u64(&b[72]) != geo.overflow_start() || get_u64(&b[88]) != geo.namespace_start() ||
      get_u64(&b[104]) != geo.data_start() || geo.data_start() >= geo.total_blocks) {
    return Status::bad_image("inconsistent region layout");
  }
  return geo;
}

struct ParsedInode {
  bool used = false;
  InodeInfo info;
  bool parse_ok = true;
  std::string parse_error;
};

ParsedInode parse_inode_slot(std::span<const uint8_t> image, const Geometry& geo, uint64_t ino) {
  ParsedInode out;
  const uint64_t addr = (geo.inode_table_start() + (ino - 1)) * geo.block_size;
  const uint8_t* p = image.data() + addr;
  if (get_u32(&p[0]) == 0) return out;
  out.used = true;
  out.info.ino = ino;
  const uint32_t count = get_u32(&p[4]);
  out.info.size = get_u64(&p[8]);
  out.info.generation = get_u64(&p[16]);
  const uint32_t overflow_head = get_u32(&p[24]);
  if (get_u32(&p[0]) != 1) {
    out.parse_ok = false;
    out.parse_error = "bad inode used flag";
    return out;
  }
  out.info.extents.reserve(count);
  const uint32_t inline_count = std::min<uint32_t>(count, kInlineExtents);
  for (uint32_t i = 0; i < inline_count; ++i) {
    const uint8_t* e = p + kInodeHeaderBytes + i * kExtentBytes;
    out.info.extents.push_back(Extent{get_u64(&e[0]), get_u64(&e[8]), get_u64(&e[16])});
  }
  // The tail lives in chained overflow slots.
  uint32_t remaining = count - inline_count;
  uint32_t next = overflow_head;
  while (remaining > 0) {
    if (next == 0 || next > geo.overflow_slots) {
      out.parse_ok = false;
      out.parse_error = "broken extent overflow chain";
      return out;
    }
    const uint8_t* o = image.data() + (geo.overflow_start() + (next - 1)) * geo.block_size;
    if (get_u32(&o[0]) != kOverflowMagic) {
      out.parse_ok = false;
      out.parse_error = "bad extent overflow slot";
      return out;
    }
    const uint32_t here = get_u32(&o[8]);
    if (here == 0 || here > kOverflowExtents || here > remaining) {
      out.parse_ok = false;
      out.parse_error = "bad extent overflow count";
      return out;
    }
    for (uint32_t i = 0; i < here; ++i) {
      const uint8_t* e = o + kOverflowHeaderBytes + i * kExtentBytes;
      out.info.extents.push_back(Extent{get_u64(&e[0]), get_u64(&e[8]), get_u64(&e[16])});
    }
    out.info.overflow_chain.push_back(next - 1);
    remaining -= here;
    next = get_u32(&o[4]);
  }
  if (next != 0) {
    out.parse_ok = false;
    out.parse_error = "dangling extent overflow chain";
  }
  return out;
}

struct ParsedName {
  uint64_t index = 0;
  uint64_t ino = 0;
  std::string name;
};

std::vector<ParsedName> parse_namespace(std::span<const uint8_t> image, const Geometry& geo,
                                        std::vector<std::string>* violations) {
  std::vector<ParsedName> out;
  const uint64_t base = geo.namespace_start() * geo.block_size;
  for (uint64_t i = 0; i < geo.namespace_entries(); ++i) {
    const uint8_t* p = image.data() + base + i * kNamespaceEntryBytes;
    const uint64_t ino = get_u64(p);
    if (ino == 0) continue;
    ParsedName n;
    n.index = i;
    n.ino = ino;
    const char* name = reinterpret_cast<const char*>(p + 8);
    size_t len = 0;
    while (len < kMaxNameLen + 1 && name[len] != '\0') ++len;
    if (len == 0 || len > kMaxNameLen) {
      if (violations) violations->push_back("namespace entry " + std::to_string(i) + ": bad name");
      continue;
    }
    n.name.assign(name, len);
    out.push_back(std::move(n));
  }
  return out;
}

bool valid_name(std::string_view name) {
  if (name.empty() || name.size() > kMaxNameLen) return false;
  for (char c : name) {
    if (c == '\0' || c == ' ' || c == '\t' || c == '\n' || c == '\r') return false;
  }
  return true;
}

struct JournalTxn {
  uint64_t txn_id = 0;
  std::vector<std::pair<uint64_t, std::vector<uint8_t>>> records;
};

// The journal region starts with a 64-byte epoch cell; resets bump the epoch
// with one atomic 8-byte store, so transactions from an earlier epoch are
// never replayed over newer state.
uint64_t read_journal_epoch(std::span<const uint8_t> image, const Geometry& geo) {
  const uint8_t* cell = image.data() + geo.journal_start() * geo.block_size;
  if (get_u32(&cell[0]) != kEpochMagic) return 0;
  return get_u64(&cell[8]);
}

// Scans the journal region: transactions are parsed in append order and one
// counts only if it carries the current epoch and its commit line is present
// and checksum-valid. The scan stops at the first stale, missing, or invalid
// transaction.
std::vector<JournalTxn> scan_journal(std::span<const uint8_t> image, const Geometry& geo,
                                     uint64_t epoch) {
  std::vector<JournalTxn> txns;
  if (epoch == 0) return txns;
  const uint64_t base = geo.journal_start() * geo.block_size;
  const uint64_t journal_bytes = geo.journal_blocks * geo.block_size;
  uint64_t pos = kEpochCellBytes;
  while (pos + kTxnHeaderBytes + kCommitBytes <= journal_bytes) {
    const uint8_t* h = image.data() + base + pos;
    if (get_u32(&h[0]) != kTxnHeaderMagic) break;
    const uint32_t record_count = get_u32(&h[4]);
    const uint64_t txn_id = get_u64(&h[8]);
    const uint64_t payload_len = get_u64(&h[16]);
    if (get_u64(&h[24]) != epoch) break;
    if (payload_len > journal_bytes - pos - kTxnHeaderBytes) break;
    const uint64_t commit_pos = round_up(pos + kTxnHeaderBytes + payload_len, kCommitBytes);
    if (commit_pos + kCommitBytes > journal_bytes) break;
    const uint8_t* c = image.data() + base + commit_pos;
    if (get_u32(&c[0]) != kTxnCommitMagic) break;
    if (get_u64(&c[8]) != txn_id) break;
    const uint32_t want = get_u32(&c[4]);
    if (want != crc32(std::span<const uint8_t>(h, kTxnHeaderBytes + payload_len))) break;

    // Commit is valid; records were fenced before it was written, so the
    // payload must parse. Treat parse failure as a stop all the same.
    JournalTxn txn;
    txn.txn_id = txn_id;
    uint64_t rp = kTxnHeaderBytes;
    bool ok = true;
    for (uint32_t i = 0; i < record_count; ++i) {
      if (rp + 12 > kTxnHeaderBytes + payload_len) {
        ok = false;
        break;
      }
      const uint64_t addr = get_u64(h + rp);
      const uint32_t len = get_u32(h + rp + 8);
      rp += 12;
      if (rp + len > kTxnHeaderBytes + payload_len || addr + len > image.size()) {
        ok = false;
        break;
      }
      txn.records.emplace_back(addr, std::vector<uint8_t>(h + rp, h + rp + len));
      rp += len;
    }
    if (!ok || rp != kTxnHeaderBytes + payload_len) break;
    txns.push_back(std::move(txn));
    pos = commit_pos + kCommitBytes;
  }
  return txns;
}

}  // namespace

Geometry Geometry::for_capacity(uint64_t capacity_bytes) {
  Geometry geo;
  geo.total_blocks = capacity_bytes / kPage;
  geo.journal_blocks = std::clamp<uint64_t>(geo.total_blocks / 64, 16, 512);
  geo.inode_slots = std::clamp<uint64_t>(geo.total_blocks / 256, 64, 256);
  geo.overflow_slots = geo.inode_slots;
  geo.namespace_blocks = std::clamp<uint64_t>(geo.inode_slots / 32, 2, 16);
  return geo;
}

namespace extents {

uint64_t device_block_of(const std::vector<Extent>& list, uint64_t file_block) {
  for (const Extent& e : list) {
    if (file_block >= e.file_block && file_block < e.file_block + e.length) {
      return e.device_block + (file_block - e.file_block);
    }
  }
  return 0;
}

void add_mapping(std::vector<Extent>& list, uint64_t file_block, uint64_t device_block,
                 uint64_t length) {
  while (length > 0) {
    const uint64_t chunk = std::min(length, kMaxExtentBlocks);
    auto it = std::lower_bound(list.begin(), list.end(), file_block,
                               [](const Extent& e, uint64_t fb) { return e.file_block < fb; });
    // Merge with the previous extent when both spaces are contiguous.
    if (it != list.begin()) {
      auto prev = std::prev(it);
      if (prev->file_block + prev->length == file_block &&
          prev->device_block + prev->length == device_block &&
          prev->length + chunk <= kMaxExtentBlocks) {
        prev->length += chunk;
        // Try to also merge with the following extent.
        if (it != list.end() && prev->file_block + prev->length == it->file_block &&
            prev->device_block + prev->length == it->device_block &&
            prev->length + it->length <= kMaxExtentBlocks) {
          prev->length += it->length;
          list.erase(it);
        }
        file_block += chunk;
        device_block += chunk;
        length -= chunk;
        continue;
      }
    }
    if (it != list.end() && file_block + chunk == it->file_block &&
        device_block + chunk == it->device_block && it->length + chunk <= kMaxExtentBlocks) {
      it->file_block = file_block;
      it->device_block = device_block;
      it->length += chunk;
    } else {
      list.insert(it, Extent{file_block, device_block, chunk});
    }
    file_block += chunk;
    device_block += chunk;
    length -= chunk;
  }
}

void remove_mapping(std::vector<Extent>& list, uint64_t file_block, uint64_t length) {
  const uint64_t end = file_block + length;
  std::vector<Extent> out;
  out.reserve(list.size() + 1);
  for (const Extent& e : list) {
    const uint64_t e_end = e.file_block + e.length;
    if (e_end <= file_block || e.file_block >= end) {
      out.push_back(e);
      continue;
    }
    if (e.file_block < file_block) {
      out.push_back(Extent{e.file_block, e.device_block, file_block - e.file_block});
    }
    if (e_end > end) {
      out.push_back(Extent{end, e.device_block + (end - e.file_block), e_end - end});
    }
  }
  list = std::move(out);
}

}  // namespace extents

Status Kfs::mkfs(PmemDevice& dev, const Geometry& geo) {
  if (geo.block_size != kPage) return Status::invalid_argument("block size must be 4096");
  if (geo.total_blocks * geo.block_size != dev.capacity()) {
    return Status::invalid_argument("geometry does not cover the device");
  }
  if (geo.data_start() + 8 > geo.total_blocks) {
    return Status::invalid_argument("no room for data blocks");
  }
  // Zero every metadata region, then lay down the bitmap and superblock.
  dev.store_nt_fill(0, 0, geo.data_start() * geo.block_size);
  std::vector<uint8_t> bitmap(geo.bitmap_blocks() * geo.block_size, 0);
  for (uint64_t b = 0; b < geo.metadata_blocks(); ++b) bitmap[b / 8] |= uint8_t(1u << (b % 8));
  dev.store_nt(geo.bitmap_start() * geo.block_size, bitmap);
  std::vector<uint8_t> cell(kEpochCellBytes, 0);
  put_u32(&cell[0], kEpochMagic);
  put_u64(&cell[8], 1);
  dev.store_nt(geo.journal_start() * geo.block_size, cell);
  dev.store_nt(0, serialize_superblock(geo));
  dev.fence();
  return Status::ok();
}

Result<Kfs> Kfs::mount(PmemDevice& dev) {
  auto geo = parse_superblock(dev.image(PmemDevice::ImageKind::kVolatile));
  if (!geo.is_ok()) return geo.status();
  Kfs fs(dev, geo.value());
  const Geometry& g = fs.geo_;

  fs.journal_epoch_ = read_journal_epoch(dev.image(PmemDevice::ImageKind::kVolatile), g);
  if (fs.journal_epoch_ == 0) return Status::bad_image("journal epoch cell corrupt");
  const auto txns = scan_journal(dev.image(PmemDevice::ImageKind::kVolatile), g,
                                 fs.journal_epoch_);
  for (const JournalTxn& txn : txns) {
    for (const auto& [addr, bytes] : txn.records) dev.store_nt(addr, bytes);
    fs.next_txn_id_ = txn.txn_id + 1;
  }
  if (!txns.empty()) {
    // Replayed bytes must be durable before the epoch bump retires the
    // transactions they came from.
    dev.fence();
    fs.bump_epoch();
  }
  fs.journal_cursor_ = kEpochCellBytes;

  if (Status st = fs.load_state(); !st.is_ok()) return st;
  return fs;
}

void Kfs::bump_epoch() {
  journal_epoch_ += 1;
  std::array<uint8_t, 8> epoch_bytes;
  put_u64(epoch_bytes.data(), journal_epoch_);
  dev_->store_nt(geo_.journal_start() * geo_.block_size + 8, epoch_bytes);
  dev_->fence();
}

Status Kfs::load_state() {
  const auto image = dev_->image(PmemDevice::ImageKind::kVolatile);
  bitmap_.assign(image.begin() + static_cast<ptrdiff_t>(geo_.bitmap_start() * geo_.block_size),
                 image.begin() + static_cast<ptrdiff_t>((geo_.bitmap_start() + geo_.bitmap_blocks()) *
                                                        geo_.block_size));
  free_blocks_ = 0;
  for (uint64_t b = 0; b < geo_.total_blocks; ++b) {
    if (!(bitmap_[b / 8] & (1u << (b % 8)))) ++free_blocks_;
  }
  names_.clear();
  name_of_ino_.clear();
  name_slots_.clear();
  inodes_.clear();
  for (const ParsedName& n : parse_namespace(image, geo_, nullptr)) {
    if (n.ino > geo_.inode_slots) continue;
    names_[n.name] = n.ino;
    name_of_ino_[n.ino] = n.name;
    name_slots_[n.name] = n.index;
  }
  overflow_used_.assign(geo_.overflow_slots, false);
  for (uint64_t ino = 1; ino <= geo_.inode_slots; ++ino) {
    ParsedInode p = parse_inode_slot(image, geo_, ino);
    if (p.used && p.parse_ok) {
      for (uint32_t slot : p.info.overflow_chain) overflow_used_[slot] = true;
      inodes_[ino] = std::move(p.info);
    }
  }
  alloc_cursor_ = geo_.data_start();
  return Status::ok();
}

uint64_t Kfs::inode_addr(uint64_t ino) const {
  return (geo_.inode_table_start() + (ino - 1)) * geo_.block_size;
}

uint64_t Kfs::namespace_entry_addr(uint64_t index) const {
  return geo_.namespace_start() * geo_.block_size + index * kNamespaceEntryBytes;
}

uint64_t Kfs::overflow_addr(uint32_t slot) const {
  return (geo_.overflow_start() + slot) * geo_.block_size;
}

Status Kfs::append_inode_records(InodeInfo& next, std::vector<Record>* out, bool whole_block) {
  const size_t total = next.extents.size();
  const size_t spill = total > kInlineExtents ? total - kInlineExtents : 0;
  const size_t chain_needed = (spill + kOverflowExtents - 1) / kOverflowExtents;

  // Reuse the existing chain, then grow or shrink it.
  std::vector<uint32_t> chain = next.overflow_chain;
  while (chain.size() > chain_needed) {
    const uint32_t slot = chain.back();
    chain.pop_back();
    overflow_used_[slot] = false;
    Record r;
    r.addr = overflow_addr(slot);
    r.bytes.assign(whole_block ? geo_.block_size : kOverflowHeaderBytes, 0);
    out->push_back(std::move(r));
  }
  for (uint32_t slot = 0; chain.size() < chain_needed; ++slot) {
    if (slot >= overflow_used_.size()) return Status::no_space("extent overflow slots exhausted");
    if (overflow_used_[slot]) continue;
    overflow_used_[slot] = true;
    chain.push_back(slot);
  }
  next.overflow_chain = chain;

  // Inode slot: header plus the inline extents.
  Record slot_rec;
  slot_rec.addr = inode_addr(next.ino);
  const size_t inline_count = std::min<size_t>(total, kInlineExtents);
  slot_rec.bytes.assign(
      whole_block ? geo_.block_size : kInodeHeaderBytes + inline_count * kExtentBytes, 0);
  put_u32(&slot_rec.bytes[0], 1);
  put_u32(&slot_rec.bytes[4], static_cast<uint32_t>(total));
  put_u64(&slot_rec.bytes[8], next.size);
  put_u64(&slot_rec.bytes[16], next.generation);
  put_u32(&slot_rec.bytes[24], chain.empty() ? 0 : chain[0] + 1);
  for (size_t i = 0; i < inline_count; ++i) {
    uint8_t* e = &slot_rec.bytes[kInodeHeaderBytes + i * kExtentBytes];
    put_u64(&e[0], next.extents[i].file_block);
    put_u64(&e[8], next.extents[i].device_block);
    put_u64(&e[16], next.extents[i].length);
  }
  out->push_back(std::move(slot_rec));

  size_t at = kInlineExtents;
  for (size_t c = 0; c < chain.size(); ++c) {
    const size_t here = std::min<size_t>(kOverflowExtents, total - at);
    Record r;
    r.addr = overflow_addr(chain[c]);
    r.bytes.assign(whole_block ? geo_.block_size : kOverflowHeaderBytes + here * kExtentBytes, 0);
    put_u32(&r.bytes[0], kOverflowMagic);
    put_u32(&r.bytes[4], c + 1 < chain.size() ? chain[c + 1] + 1 : 0);
    put_u32(&r.bytes[8], static_cast<uint32_t>(here));
    for (size_t i = 0; i < here; ++i) {
      uint8_t* e = &r.bytes[kOverflowHeaderBytes + i * kExtentBytes];
      put_u64(&e[0], next.extents[at + i].file_block);
      put_u64(&e[8], next.extents[at + i].device_block);
      put_u64(&e[16], next.extents[at + i].length);
    }
    out->push_back(std::move(r));
    at += here;
  }
  return Status::ok();
}

void Kfs::append_freed_inode_records(const InodeInfo& prev, std::vector<Record>* out,
                                     bool whole_block) {
  Record r;
  r.addr = inode_addr(prev.ino);
  r.bytes.assign(whole_block ? geo_.block_size : kInodeHeaderBytes, 0);
  out->push_back(std::move(r));
  for (uint32_t slot : prev.overflow_chain) {
    overflow_used_[slot] = false;
    Record o;
    o.addr = overflow_addr(slot);
    o.bytes.assign(whole_block ? geo_.block_size : kOverflowHeaderBytes, 0);
    out->push_back(std::move(o));
  }
}

Kfs::Record Kfs::make_namespace_block_record(uint64_t index, uint64_t ino,
                                             std::string_view name) const {
  // Read-modify-write of the whole namespace block holding the entry.
  const uint64_t entry_addr = namespace_entry_addr(index);
  const uint64_t block_addr = entry_addr / geo_.block_size * geo_.block_size;
  Record r;
  r.addr = block_addr;
  r.bytes = dev_->load(block_addr, geo_.block_size);
  uint8_t* e = r.bytes.data() + (entry_addr - block_addr);
  std::memset(e, 0, kNamespaceEntryBytes);
  put_u64(e, ino);
  std::memcpy(e + 8, name.data(), name.size());
  return r;
}

std::vector<Kfs::Record> Kfs::make_bitmap_records(const std::vector<uint64_t>& changed_blocks) const {
  std::vector<Record> out;
  if (changed_blocks.empty()) return out;
  std::vector<uint64_t> bytes;
  bytes.reserve(changed_blocks.size());
  for (uint64_t b : changed_blocks) bytes.push_back(b / 8);
  std::sort(bytes.begin(), bytes.end());
  bytes.erase(std::unique(bytes.begin(), bytes.end()), bytes.end());
  const uint64_t base = geo_.bitmap_start() * geo_.block_size;
  size_t i = 0;
  while (i < bytes.size()) {
    size_t j = i;
    while (j + 1 < bytes.size() && bytes[j + 1] == bytes[j] + 1) ++j;
    Record r;
    r.addr = base + bytes[i];
    r.bytes.assign(bitmap_.begin() + static_cast<ptrdiff_t>(bytes[i]),
                   bitmap_.begin() + static_cast<ptrdiff_t>(bytes[j] + 1));
    out.push_back(std::move(r));
    i = j + 1;
  }
  return out;
}

std::vector<Kfs::Record> Kfs::make_bitmap_block_records(
    const std::vector<uint64_t>& changed_blocks) const {
  std::vector<Record> out;
  if (changed_blocks.empty()) return out;
  std::vector<uint64_t> blocks;
  blocks.reserve(changed_blocks.size());
  for (uint64_t b : changed_blocks) blocks.push_back(b / 8 / geo_.block_size);
  std::sort(blocks.begin(), blocks.end());
  blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
  for (uint64_t blk : blocks) {
    Record r;
    r.addr = (geo_.bitmap_start() + blk) * geo_.block_size;
    r.bytes.assign(bitmap_.begin() + static_cast<ptrdiff_t>(blk * geo_.block_size),
                   bitmap_.begin() + static_cast<ptrdiff_t>((blk + 1) * geo_.block_size));
    out.push_back(std::move(r));
  }
  return out;
}

void Kfs::journal_reset() {
  // Persist pending in-place applications, then retire every logged
  // transaction with one atomic epoch bump. Stale bytes can stay: the scan
  // ignores transactions from earlier epochs.
  dev_->fence();
  bump_epoch();
  journal_cursor_ = kEpochCellBytes;
}

void Kfs::reset_journal() {
  if (journal_cursor_ == kEpochCellBytes) {
    dev_->fence();
    return;
  }
  // Recovery canonicalization: retire and also zero the region so repeated
  // recovery leaves a byte-identical image.
  journal_reset();
  dev_->store_nt_fill(geo_.journal_start() * geo_.block_size + kEpochCellBytes, 0,
                      geo_.journal_blocks * geo_.block_size - kEpochCellBytes);
  dev_->fence();
}

Status Kfs::journal_commit(std::vector<Record> records) {
  uint64_t payload = 0;
  for (const Record& r : records) payload += 12 + r.bytes.size();
  const uint64_t body = round_up(kTxnHeaderBytes + payload, kCommitBytes);
  const uint64_t need = body + kCommitBytes;
  const uint64_t journal_bytes = geo_.journal_blocks * geo_.block_size;
  if (need > journal_bytes - kEpochCellBytes) {
    return Status::no_space("transaction larger than journal");
  }
  if (journal_cursor_ + need > journal_bytes) journal_reset();

  const uint64_t txn_id = next_txn_id_++;
  std::vector<uint8_t> buf(kTxnHeaderBytes + payload, 0);
  put_u32(&buf[0], kTxnHeaderMagic);
  put_u32(&buf[4], static_cast<uint32_t>(records.size()));
  put_u64(&buf[8], txn_id);
  put_u64(&buf[16], payload);
  put_u64(&buf[24], journal_epoch_);
  uint64_t pos = kTxnHeaderBytes;
  for (const Record& r : records) {
    put_u64(&buf[pos], r.addr);
    put_u32(&buf[pos + 8], static_cast<uint32_t>(r.bytes.size()));
    std::memcpy(&buf[pos + 12], r.bytes.data(), r.bytes.size());
    pos += 12 + r.bytes.size();
  }

  const uint64_t base = geo_.journal_start() * geo_.block_size + journal_cursor_;
  dev_->store_nt(base, buf);
  dev_->fence();

  std::vector<uint8_t> commit(kCommitBytes, 0);
  put_u32(&commit[0], kTxnCommitMagic);
  put_u32(&commit[4], crc32(buf));
  put_u64(&commit[8], txn_id);
  const bool skip_commit = faults_ != nullptr && faults_->skip_journal_commit;
  if (!skip_commit) {
    dev_->store_nt(geo_.journal_start() * geo_.block_size + journal_cursor_ + body, commit);
    dev_->fence();
  }

  // Apply in place; the next fence (or journal replay on mount) persists it.
  for (const Record& r : records) dev_->store_nt(r.addr, r.bytes);
  journal_cursor_ += need;
  dev_->counters_mut().journal_commit_count += 1;
  return Status::ok();
}

Result<uint64_t> Kfs::find_free_namespace_slot() const {
  std::vector<bool> used(geo_.namespace_entries(), false);
  for (const auto& [name, idx] : name_slots_) used[idx] = true;
  for (uint64_t i = 0; i < used.size(); ++i) {
    if (!used[i]) return i;
  }
  return Status::no_space("namespace full");
}

Result<uint64_t> Kfs::find_free_inode() const {
  for (uint64_t ino = 1; ino <= geo_.inode_slots; ++ino) {
    if (!inodes_.contains(ino)) return ino;
  }
  return Status::no_space("inode table full");
}

bool Kfs::block_allocated(uint64_t block) const {
  return bitmap_[block / 8] & (1u << (block % 8));
}

void Kfs::mark_block(uint64_t block, bool allocated, std::vector<uint64_t>* changed) {
  const uint8_t bit = uint8_t(1u << (block % 8));
  if (allocated) {
    bitmap_[block / 8] |= bit;
    --free_blocks_;
  } else {
    bitmap_[block / 8] &= uint8_t(~bit);
    ++free_blocks_;
  }
  changed->push_back(block);
}

Result<std::vector<std::pair<uint64_t, uint64_t>>> Kfs::reserve_runs(uint64_t count,
                                                                     std::vector<uint64_t>* changed) {
  if (count > free_blocks_) return Status::no_space("out of data blocks");
  std::vector<std::pair<uint64_t, uint64_t>> runs;
  uint64_t need = count;
  uint64_t pos = std::max(alloc_cursor_, geo_.data_start());
  bool wrapped = false;
  while (need > 0) {
    if (pos >= geo_.total_blocks) {
      if (wrapped) return Status::no_space("out of data blocks");
      wrapped = true;
      pos = geo_.data_start();
    }
    if (block_allocated(pos)) {
      // Skip fully-allocated bitmap bytes quickly.
      if (pos % 8 == 0 && bitmap_[pos / 8] == 0xFF) {
        pos += 8;
      } else {
        ++pos;
      }
      continue;
    }
    uint64_t run = 0;
    while (pos + run < geo_.total_blocks && run < std::min(need, kMaxExtentBlocks) &&
           !block_allocated(pos + run)) {
      ++run;
    }
    for (uint64_t i = 0; i < run; ++i) mark_block(pos + i, true, changed);
    runs.emplace_back(pos, run);
    need -= run;
    pos += run;
  }
  alloc_cursor_ = pos;
  return runs;
}

Result<uint64_t> Kfs::create(std::string_view name) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  if (!valid_name(name)) return Status::invalid_argument("bad file name");
  if (names_.contains(std::string(name))) return Status::exists("name already exists");
  auto slot = find_free_namespace_slot();
  if (!slot.is_ok()) return slot.status();
  auto ino = find_free_inode();
  if (!ino.is_ok()) return ino.status();

  InodeInfo info;
  info.ino = ino.value();
  std::vector<Record> records;
  if (Status st = append_inode_records(info, &records, /*whole_block=*/true); !st.is_ok()) {
    return st;
  }
  records.push_back(make_namespace_block_record(slot.value(), info.ino, name));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;

  inodes_[info.ino] = info;
  names_[std::string(name)] = info.ino;
  name_of_ino_[info.ino] = std::string(name);
  name_slots_[std::string(name)] = slot.value();
  return info.ino;
}

Result<uint64_t> Kfs::lookup(std::string_view name) const {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = names_.find(std::string(name));
  if (it == names_.end()) return Status::not_found("no such name");
  return it->second;
}

Status Kfs::unlink(std::string_view name) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = names_.find(std::string(name));
  if (it == names_.end()) return Status::not_found("no such name");
  const uint64_t ino = it->second;
  const uint64_t slot = name_slots_.at(it->first);

  std::vector<uint64_t> changed;
  std::vector<Record> records;
  // A crash image can leave a name without a live inode; dropping the entry
  // is still fine.
  auto node = inodes_.find(ino);
  if (node != inodes_.end()) {
    for (const Extent& e : node->second.extents) {
      for (uint64_t i = 0; i < e.length; ++i) mark_block(e.device_block + i, false, &changed);
    }
    append_freed_inode_records(node->second, &records, /*whole_block=*/true);
  }
  records.push_back(make_namespace_block_record(slot, 0, ""));
  for (Record& r : make_bitmap_block_records(changed)) records.push_back(std::move(r));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;

  inodes_.erase(ino);
  name_of_ino_.erase(ino);
  name_slots_.erase(it->first);
  names_.erase(it);
  return Status::ok();
}

Status Kfs::rename(std::string_view old_name, std::string_view new_name) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  if (!valid_name(new_name)) return Status::invalid_argument("bad file name");
  auto it = names_.find(std::string(old_name));
  if (it == names_.end()) return Status::not_found("no such name");
  if (old_name == new_name) return Status::ok();
  const uint64_t ino = it->second;
  const uint64_t old_slot = name_slots_.at(it->first);

  std::vector<Record> records;
  std::vector<uint64_t> changed;
  auto dst = names_.find(std::string(new_name));
  uint64_t displaced = 0;
  uint64_t new_slot = old_slot;
  if (dst != names_.end()) {
    displaced = dst->second;
    new_slot = name_slots_.at(dst->first);
    auto node = inodes_.find(displaced);
    if (node != inodes_.end()) {
      for (const Extent& e : node->second.extents) {
        for (uint64_t i = 0; i < e.length; ++i) mark_block(e.device_block + i, false, &changed);
      }
      append_freed_inode_records(node->second, &records, /*whole_block=*/true);
    }
  }
  // Both namespace entries may share one block; patch cumulatively so the
  // later record keeps the earlier clearing.
  std::map<uint64_t, std::vector<uint8_t>> ns_blocks;
  auto patch_entry = [&](uint64_t index, uint64_t entry_ino, std::string_view entry_name) {
    const uint64_t entry_addr = namespace_entry_addr(index);
    const uint64_t block_addr = entry_addr / geo_.block_size * geo_.block_size;
    auto [bit, inserted] = ns_blocks.try_emplace(block_addr);
    if (inserted) bit->second = dev_->load(block_addr, geo_.block_size);
    uint8_t* e = bit->second.data() + (entry_addr - block_addr);
    std::memset(e, 0, kNamespaceEntryBytes);
    put_u64(e, entry_ino);
    std::memcpy(e + 8, entry_name.data(), entry_name.size());
  };
  if (displaced != 0) patch_entry(old_slot, 0, "");
  patch_entry(new_slot, ino, new_name);
  for (auto& [addr, bytes] : ns_blocks) records.push_back(Record{addr, std::move(bytes)});
  for (Record& r : make_bitmap_block_records(changed)) records.push_back(std::move(r));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;

  if (displaced != 0) {
    inodes_.erase(displaced);
    name_of_ino_.erase(displaced);
    names_.erase(dst);
    name_slots_.erase(std::string(new_name));
  }
  names_.erase(it);
  name_slots_.erase(std::string(old_name));
  names_[std::string(new_name)] = ino;
  name_of_ino_[ino] = std::string(new_name);
  name_slots_[std::string(new_name)] = new_slot;
  return Status::ok();
}

Status Kfs::allocate(uint64_t ino, uint64_t off, uint64_t len) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  return allocate_internal(ino, off, len);
}

Status Kfs::allocate_internal(uint64_t ino, uint64_t off, uint64_t len) {
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  if (len == 0) return Status::ok();
  InodeInfo next = it->second;
  const uint64_t bs = geo_.block_size;
  const uint64_t first = off / bs;
  const uint64_t end = (off + len + bs - 1) / bs;

  std::vector<uint64_t> changed;
  std::vector<std::pair<uint64_t, uint64_t>> missing_runs;
  uint64_t missing = 0;
  for (uint64_t fb = first; fb < end; ++fb) {
    if (extents::device_block_of(next.extents, fb) != 0) continue;
    if (!missing_runs.empty() && missing_runs.back().first + missing_runs.back().second == fb) {
      ++missing_runs.back().second;
    } else {
      missing_runs.emplace_back(fb, 1);
    }
    ++missing;
  }
  auto saved_bitmap = bitmap_;
  auto saved_free = free_blocks_;
  auto saved_cursor = alloc_cursor_;
  if (missing > 0) {
    for (const auto& [fb, n] : missing_runs) {
      auto runs = reserve_runs(n, &changed);
      if (!runs.is_ok()) {
        bitmap_ = std::move(saved_bitmap);
        free_blocks_ = saved_free;
        alloc_cursor_ = saved_cursor;
        return runs.status();
      }
      uint64_t at = fb;
      for (const auto& [db, rl] : runs.value()) {
        extents::add_mapping(next.extents, at, db, rl);
        at += rl;
      }
    }
  }
  next.size = std::max(next.size, off + len);
  if (missing == 0 && next.size == it->second.size) return Status::ok();

  auto saved_overflow = overflow_used_;
  std::vector<Record> records;
  if (Status st = append_inode_records(next, &records, /*whole_block=*/true); !st.is_ok()) {
    bitmap_ = std::move(saved_bitmap);
    free_blocks_ = saved_free;
    alloc_cursor_ = saved_cursor;
    overflow_used_ = std::move(saved_overflow);
    return st;
  }
  for (Record& r : make_bitmap_block_records(changed)) records.push_back(std::move(r));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;
  it->second = std::move(next);
  return Status::ok();
}

Status Kfs::truncate(uint64_t ino, uint64_t size) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  InodeInfo next = it->second;
  const uint64_t keep_blocks = (size + geo_.block_size - 1) / geo_.block_size;

  std::vector<uint64_t> changed;
  for (const Extent& e : next.extents) {
    for (uint64_t i = 0; i < e.length; ++i) {
      if (e.file_block + i >= keep_blocks) mark_block(e.device_block + i, false, &changed);
    }
  }
  extents::remove_mapping(next.extents, keep_blocks, UINT64_MAX - keep_blocks);
  next.size = size;
  next.generation += 1;

  auto saved_overflow = overflow_used_;
  std::vector<Record> records;
  if (Status st = append_inode_records(next, &records, /*whole_block=*/true); !st.is_ok()) {
    overflow_used_ = std::move(saved_overflow);
    return st;
  }
  for (Record& r : make_bitmap_block_records(changed)) records.push_back(std::move(r));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;
  it->second = std::move(next);
  return Status::ok();
}

Result<uint64_t> Kfs::write_direct(uint64_t ino, uint64_t off, std::span<const uint8_t> data) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  if (data.empty()) return uint64_t{0};
  // Allocation and the size change ride one journal transaction; data then
  // goes straight to the mapped blocks, ext4-DAX style.
  if (Status st = allocate_internal(ino, off, data.size()); !st.is_ok()) return st;
  auto segs = map_extents_internal(ino, off, data.size());
  if (!segs.is_ok()) return segs.status();
  uint64_t done = 0;
  for (const Segment& s : segs.value()) {
    dev_->store_nt(s.device_addr, data.subspan(done, s.length));
    done += s.length;
  }
  dev_->fence();
  return uint64_t{data.size()};
}

Result<std::vector<uint8_t>> Kfs::read_direct(uint64_t ino, uint64_t off, uint64_t len) const {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  const InodeInfo& info = it->second;
  if (off >= info.size) return std::vector<uint8_t>{};
  len = std::min(len, info.size - off);
  std::vector<uint8_t> out(len, 0);
  const uint64_t bs = geo_.block_size;
  uint64_t done = 0;
  while (done < len) {
    const uint64_t pos = off + done;
    const uint64_t n = std::min(bs - pos % bs, len - done);
    const uint64_t db = extents::device_block_of(info.extents, pos / bs);
    if (db != 0) {
      dev_->load(db * bs + pos % bs, std::span<uint8_t>(out.data() + done, n));
    }
    done += n;
  }
  return out;
}

Result<std::vector<Segment>> Kfs::map_extents(uint64_t ino, uint64_t off, uint64_t len) const {
  calls_->fetch_add(1, std::memory_order_relaxed);
  return map_extents_internal(ino, off, len);
}

Result<std::vector<Segment>> Kfs::map_extents_internal(uint64_t ino, uint64_t off,
                                                       uint64_t len) const {
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  if (len == 0) return std::vector<Segment>{};
  const InodeInfo& info = it->second;
  const uint64_t bs = geo_.block_size;
  std::vector<Segment> out;
  uint64_t done = 0;
  while (done < len) {
    const uint64_t pos = off + done;
    const uint64_t n = std::min(bs - pos % bs, len - done);
    const uint64_t db = extents::device_block_of(info.extents, pos / bs);
    if (db == 0) return Status::invalid_argument("hole in mapped range");
    const uint64_t addr = db * bs + pos % bs;
    if (!out.empty() && out.back().device_addr + out.back().length == addr) {
      out.back().length += n;
    } else {
      out.push_back(Segment{addr, n});
    }
    done += n;
  }
  return out;
}

Status Kfs::fsync_meta(uint64_t ino) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  if (!inodes_.contains(ino)) return Status::not_found("no such inode");
  dev_->fence();
  return Status::ok();
}

Result<KfsStat> Kfs::stat(uint64_t ino) const {
  calls_->fetch_add(1, std::memory_order_relaxed);
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  return KfsStat{it->second.size, it->second.generation};
}

std::vector<std::string> Kfs::list_names() const {
  std::vector<std::string> out;
  out.reserve(names_.size());
  for (const auto& [name, ino] : names_) out.push_back(name);
  return out;
}

Result<InodeInfo> Kfs::inode(uint64_t ino) const {
  auto it = inodes_.find(ino);
  if (it == inodes_.end()) return Status::not_found("no such inode");
  return it->second;
}

namespace {

struct CopyPiece {
  uint64_t src_addr = 0;
  uint64_t dst_file_off = 0;
  uint64_t len = 0;
  bool pre_commit = false;
};

}  // namespace

Status Kfs::relink(uint64_t src_ino, uint64_t src_off, uint64_t dst_ino, uint64_t dst_off,
                   uint64_t size, RelinkStrategy strategy) {
  if (strategy == RelinkStrategy::kAllocSwapDealloc) {
    calls_->fetch_add(1, std::memory_order_relaxed);
    if (size == 0) return Status::invalid_argument("relink of zero bytes");
    if (src_ino == dst_ino) return Status::invalid_argument("relink within one file");
    auto src_it = inodes_.find(src_ino);
    auto dst_it = inodes_.find(dst_ino);
    if (src_it == inodes_.end() || dst_it == inodes_.end()) {
      return Status::not_found("no such inode");
    }
    const uint64_t bs = geo_.block_size;
    for (uint64_t fb = src_off / bs; fb <= (src_off + size - 1) / bs; ++fb) {
      if (extents::device_block_of(src_it->second.extents, fb) == 0) {
        return Status::invalid_argument("hole in relink source range");
      }
    }
    uint64_t body_begin = dst_off;
    uint64_t body_end = dst_off;
    if (src_off % bs == dst_off % bs) {
      body_begin = std::min(round_up(dst_off, bs), dst_off + size);
      body_end = std::max(round_down(dst_off + size, bs), body_begin);
    }
    return relink_alloc_swap_dealloc(src_ino, src_off, dst_ino, dst_off, size, body_begin,
                                     body_end);
  }
  const RelinkPiece piece{src_ino, src_off, dst_off, size};
  return relink_batch(dst_ino, std::span<const RelinkPiece>(&piece, 1));
}

Status Kfs::relink_batch(uint64_t dst_ino, std::span<const RelinkPiece> pieces) {
  calls_->fetch_add(1, std::memory_order_relaxed);
  if (pieces.empty()) return Status::ok();
  auto dst_it = inodes_.find(dst_ino);
  if (dst_it == inodes_.end()) return Status::not_found("no such inode");
  const uint64_t bs = geo_.block_size;
  for (size_t i = 0; i < pieces.size(); ++i) {
    const RelinkPiece& p = pieces[i];
    if (p.size == 0) return Status::invalid_argument("relink of zero bytes");
    if (p.src_ino == dst_ino) return Status::invalid_argument("relink within one file");
    auto src_it = inodes_.find(p.src_ino);
    if (src_it == inodes_.end()) return Status::not_found("no such inode");
    for (uint64_t fb = p.src_off / bs; fb <= (p.src_off + p.size - 1) / bs; ++fb) {
      if (extents::device_block_of(src_it->second.extents, fb) == 0) {
        return Status::invalid_argument("hole in relink source range");
      }
    }
    for (size_t j = i + 1; j < pieces.size(); ++j) {
      if (pieces[j].dst_off < p.dst_off + p.size && p.dst_off < pieces[j].dst_off + pieces[j].size) {
        return Status::invalid_argument("relink pieces overlap in destination");
      }
    }
  }

  std::map<uint64_t, InodeInfo> next;  // copies of every touched inode
  next[dst_ino] = dst_it->second;
  for (const RelinkPiece& p : pieces) {
    if (!next.contains(p.src_ino)) next[p.src_ino] = inodes_.at(p.src_ino);
  }
  InodeInfo& dst_next = next.at(dst_ino);
  const uint64_t dst_old_size = dst_next.size;
  std::vector<uint64_t> changed;
  const bool skip_dealloc = faults_ != nullptr && faults_->skip_relink_dealloc;

  auto saved_bitmap = bitmap_;
  auto saved_free = free_blocks_;
  auto saved_cursor = alloc_cursor_;
  auto fail = [&](Status st) {
    bitmap_ = std::move(saved_bitmap);
    free_blocks_ = saved_free;
    alloc_cursor_ = saved_cursor;
    return st;
  };

  std::vector<CopyPiece> copies;
  std::vector<uint64_t> fresh_blocks;
  for (const RelinkPiece& p : pieces) {
    InodeInfo& src_next = next.at(p.src_ino);
    // A block-aligned body moves by metadata only; unaligned edges and
    // phase-mismatched ranges are copied byte-wise.
    uint64_t body_begin = p.dst_off;
    uint64_t body_end = p.dst_off;
    if (p.src_off % bs == p.dst_off % bs) {
      body_begin = std::min(round_up(p.dst_off, bs), p.dst_off + p.size);
      body_end = std::max(round_down(p.dst_off + p.size, bs), body_begin);
    }

    for (uint64_t pos = body_begin; pos < body_end; pos += bs) {
      const uint64_t fb = pos / bs;
      const uint64_t sb = (p.src_off + (pos - p.dst_off)) / bs;
      const uint64_t sdb = extents::device_block_of(src_next.extents, sb);
      const uint64_t old = extents::device_block_of(dst_next.extents, fb);
      if (old != 0) {
        extents::remove_mapping(dst_next.extents, fb, 1);
        if (!skip_dealloc) mark_block(old, false, &changed);
      }
      extents::remove_mapping(src_next.extents, sb, 1);
      extents::add_mapping(dst_next.extents, fb, sdb, 1);
    }

    // Edge bytes beyond the destination's old size, or landing in blocks this
    // transaction allocates, are copied before the commit; bytes replacing
    // live destination content are copied after it, so a discarded
    // transaction leaves the old contents untouched (strict-mode recovery
    // re-copies them from the still-owned staging blocks).
    auto plan_copy_range = [&](uint64_t begin, uint64_t end) -> Status {
      uint64_t pos = begin;
      while (pos < end) {
        const uint64_t n = std::min(bs - pos % bs, end - pos);
        const uint64_t fb = pos / bs;
        uint64_t db = extents::device_block_of(dst_next.extents, fb);
        bool fresh = false;
        if (db == 0) {
          auto runs = reserve_runs(1, &changed);
          if (!runs.is_ok()) return runs.status();
          db = runs.value()[0].first;
          extents::add_mapping(dst_next.extents, fb, db, 1);
          fresh_blocks.push_back(db);
          fresh = true;
        } else {
          fresh = std::find(fresh_blocks.begin(), fresh_blocks.end(), db) != fresh_blocks.end();
        }
        const uint64_t src_pos = p.src_off + (pos - p.dst_off);
        const uint64_t sdb = extents::device_block_of(src_next.extents, src_pos / bs);
        CopyPiece piece;
        piece.src_addr = sdb * bs + src_pos % bs;
        piece.dst_file_off = pos;
        piece.len = n;
        piece.pre_commit = fresh || pos >= dst_old_size;
        copies.push_back(piece);
        pos += n;
      }
      return Status::ok();
    };
    if (Status st = plan_copy_range(p.dst_off, body_begin); !st.is_ok()) return fail(std::move(st));
    if (Status st = plan_copy_range(body_end, p.dst_off + p.size); !st.is_ok()) {
      return fail(std::move(st));
    }
    dst_next.size = std::max(dst_next.size, p.dst_off + p.size);
  }

  dst_next.generation += 1;
  for (auto& [ino, info] : next) {
    if (ino == dst_ino) continue;
    info.generation += 1;
    // Keep a stripped source's size consistent with its mappings; staging
    // files consumed front-to-back end at size zero.
    uint64_t mapped_end = 0;
    for (const Extent& e : info.extents) {
      mapped_end = std::max(mapped_end, (e.file_block + e.length) * bs);
    }
    info.size = std::min(info.size, mapped_end);
  }
  auto do_copies = [&](bool pre) {
    uint64_t copied = 0;
    for (const CopyPiece& c : copies) {
      if (c.pre_commit != pre) continue;
      const uint64_t db = extents::device_block_of(dst_next.extents, c.dst_file_off / bs);
      std::vector<uint8_t> bytes = dev_->load(c.src_addr, c.len);
      dev_->store_nt(db * bs + c.dst_file_off % bs, bytes);
      copied += c.len;
    }
    return copied;
  };

  auto saved_overflow = overflow_used_;
  std::vector<Record> records;
  for (auto& [ino, info] : next) {
    if (Status st = append_inode_records(info, &records, /*whole_block=*/false); !st.is_ok()) {
      overflow_used_ = std::move(saved_overflow);
      return fail(std::move(st));
    }
  }
  uint64_t copied_total = do_copies(/*pre=*/true);
  for (Record& r : make_bitmap_records(changed)) records.push_back(std::move(r));
  if (Status st = journal_commit(std::move(records)); !st.is_ok()) {
    overflow_used_ = std::move(saved_overflow);
    return fail(std::move(st));
  }
  copied_total += do_copies(/*pre=*/false);
  dev_->counters_mut().relink_data_bytes_copied += copied_total;

  for (auto& [ino, info] : next) inodes_[ino] = std::move(info);
  return Status::ok();
}

// Fallback composition mirroring a swap_extents ioctl: allocate blocks at the
// destination, swap them with the source's, then free what landed in the
// source. Three transactions; each leaves the allocator conserved.
Status Kfs::relink_alloc_swap_dealloc(uint64_t src_ino, uint64_t src_off, uint64_t dst_ino,
                                      uint64_t dst_off, uint64_t size, uint64_t body_begin,
                                      uint64_t body_end) {
  const uint64_t bs = geo_.block_size;
  // Transaction 1: allocate destination blocks for body positions lacking one.
  {
    InodeInfo dst_next = inodes_.at(dst_ino);
    std::vector<uint64_t> changed;
    auto saved_bitmap = bitmap_;
    auto saved_free = free_blocks_;
    bool any = false;
    for (uint64_t pos = body_begin; pos < body_end; pos += bs) {
      const uint64_t fb = pos / bs;
      if (extents::device_block_of(dst_next.extents, fb) != 0) continue;
      auto runs = reserve_runs(1, &changed);
      if (!runs.is_ok()) {
        bitmap_ = std::move(saved_bitmap);
        free_blocks_ = saved_free;
        return runs.status();
      }
      extents::add_mapping(dst_next.extents, fb, runs.value()[0].first, 1);
      any = true;
    }
    if (any) {
      auto saved_overflow = overflow_used_;
      std::vector<Record> records;
      if (Status st = append_inode_records(dst_next, &records, /*whole_block=*/false);
          !st.is_ok()) {
        bitmap_ = std::move(saved_bitmap);
        free_blocks_ = saved_free;
        overflow_used_ = std::move(saved_overflow);
        return st;
      }
      for (Record& r : make_bitmap_records(changed)) records.push_back(std::move(r));
      if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;
      inodes_[dst_ino] = std::move(dst_next);
    }
  }

  // Transaction 2: swap body extents and copy the unaligned edges.
  {
    InodeInfo src_next = inodes_.at(src_ino);
    InodeInfo dst_next = inodes_.at(dst_ino);
    const uint64_t dst_old_size = dst_next.size;
    std::vector<uint64_t> changed;
    for (uint64_t pos = body_begin; pos < body_end; pos += bs) {
      const uint64_t fb = pos / bs;
      const uint64_t sb = (src_off + (pos - dst_off)) / bs;
      const uint64_t sdb = extents::device_block_of(src_next.extents, sb);
      const uint64_t ddb = extents::device_block_of(dst_next.extents, fb);
      extents::remove_mapping(src_next.extents, sb, 1);
      extents::remove_mapping(dst_next.extents, fb, 1);
      extents::add_mapping(dst_next.extents, fb, sdb, 1);
      extents::add_mapping(src_next.extents, sb, ddb, 1);
    }
    std::vector<CopyPiece> copies;
    std::vector<uint64_t> fresh_blocks;
    auto plan_copy_range = [&](uint64_t begin, uint64_t end) -> Status {
      uint64_t pos = begin;
      while (pos < end) {
        const uint64_t n = std::min(bs - pos % bs, end - pos);
        const uint64_t fb = pos / bs;
        uint64_t db = extents::device_block_of(dst_next.extents, fb);
        bool fresh = false;
        if (db == 0) {
          auto runs = reserve_runs(1, &changed);
          if (!runs.is_ok()) return runs.status();
          db = runs.value()[0].first;
          extents::add_mapping(dst_next.extents, fb, db, 1);
          fresh_blocks.push_back(db);
          fresh = true;
        }
        const uint64_t src_pos = src_off + (pos - dst_off);
        const uint64_t sdb = extents::device_block_of(src_next.extents, src_pos / bs);
        copies.push_back(CopyPiece{sdb * bs + src_pos % bs, pos, n, fresh || pos >= dst_old_size});
        pos += n;
      }
      return Status::ok();
    };
    if (Status st = plan_copy_range(dst_off, body_begin); !st.is_ok()) return st;
    if (Status st = plan_copy_range(body_end, dst_off + size); !st.is_ok()) return st;
    dst_next.size = std::max(dst_next.size, dst_off + size);
    dst_next.generation += 1;
    src_next.generation += 1;

    auto do_copies = [&](bool pre) {
      uint64_t copied = 0;
      for (const CopyPiece& c : copies) {
        if (c.pre_commit != pre) continue;
        const uint64_t db = extents::device_block_of(dst_next.extents, c.dst_file_off / bs);
        std::vector<uint8_t> bytes = dev_->load(c.src_addr, c.len);
        dev_->store_nt(db * bs + c.dst_file_off % bs, bytes);
        copied += c.len;
      }
      return copied;
    };
    uint64_t copied_total = do_copies(true);
    std::vector<Record> records;
    if (Status st = append_inode_records(src_next, &records, /*whole_block=*/false);
        !st.is_ok()) {
      return st;
    }
    if (Status st = append_inode_records(dst_next, &records, /*whole_block=*/false);
        !st.is_ok()) {
      return st;
    }
    for (Record& r : make_bitmap_records(changed)) records.push_back(std::move(r));
    if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;
    copied_total += do_copies(false);
    dev_->counters_mut().relink_data_bytes_copied += copied_total;
    inodes_[src_ino] = std::move(src_next);
    inodes_[dst_ino] = std::move(dst_next);
  }

  // Transaction 3: de-allocate the displaced blocks now parked in the source.
  {
    InodeInfo src_next = inodes_.at(src_ino);
    std::vector<uint64_t> changed;
    const bool skip_dealloc = faults_ != nullptr && faults_->skip_relink_dealloc;
    for (uint64_t pos = body_begin; pos < body_end; pos += bs) {
      const uint64_t sb = (src_off + (pos - dst_off)) / bs;
      const uint64_t db = extents::device_block_of(src_next.extents, sb);
      if (db == 0) continue;
      extents::remove_mapping(src_next.extents, sb, 1);
      if (!skip_dealloc) mark_block(db, false, &changed);
    }
    uint64_t src_mapped_end = 0;
    for (const Extent& e : src_next.extents) {
      src_mapped_end = std::max(src_mapped_end, (e.file_block + e.length) * bs);
    }
    src_next.size = std::min(src_next.size, src_mapped_end);
    std::vector<Record> records;
    if (Status st = append_inode_records(src_next, &records, /*whole_block=*/false);
        !st.is_ok()) {
      return st;
    }
    for (Record& r : make_bitmap_records(changed)) records.push_back(std::move(r));
    if (Status st = journal_commit(std::move(records)); !st.is_ok()) return st;
    inodes_[src_ino] = std::move(src_next);
  }
  return Status::ok();
}

Result<StructureReport> Kfs::verify_image(std::span<const uint8_t> image) {
  auto geo_r = parse_superblock(image);
  if (!geo_r.is_ok()) return geo_r.status();
  const Geometry& geo = geo_r.value();
  StructureReport report;

  std::vector<uint8_t> bitmap(
      image.begin() + static_cast<ptrdiff_t>(geo.bitmap_start() * geo.block_size),
      image.begin() +
          static_cast<ptrdiff_t>((geo.bitmap_start() + geo.bitmap_blocks()) * geo.block_size));
  auto allocated = [&](uint64_t b) { return (bitmap[b / 8] & (1u << (b % 8))) != 0; };

  uint64_t allocated_count = 0;
  for (uint64_t b = 0; b < geo.total_blocks; ++b) {
    if (allocated(b)) ++allocated_count;
  }
  report.free_blocks = geo.total_blocks - allocated_count;
  for (uint64_t b = 0; b < geo.metadata_blocks(); ++b) {
    if (!allocated(b)) {
      report.violations.push_back("metadata block " + std::to_string(b) + " not marked allocated");
      break;
    }
  }

  const auto names = parse_namespace(image, geo, &report.violations);
  std::map<uint64_t, int> name_refs;
  std::map<std::string, int> name_dups;
  for (const ParsedName& n : names) {
    name_refs[n.ino] += 1;
    name_dups[n.name] += 1;
    if (n.ino > geo.inode_slots) {
      report.violations.push_back("name '" + n.name + "' references out-of-range inode");
    }
  }
  for (const auto& [name, cnt] : name_dups) {
    if (cnt > 1) report.violations.push_back("duplicate name '" + name + "'");
  }

  std::map<uint64_t, uint64_t> block_owner;
  std::map<uint32_t, uint64_t> overflow_owner;
  for (uint64_t ino = 1; ino <= geo.inode_slots; ++ino) {
    ParsedInode p = parse_inode_slot(image, geo, ino);
    if (!p.used) {
      if (name_refs.contains(ino)) {
        report.violations.push_back("name references freed inode " + std::to_string(ino));
      }
      continue;
    }
    if (!p.parse_ok) {
      report.violations.push_back("inode " + std::to_string(ino) + ": " + p.parse_error);
      continue;
    }
    for (uint32_t slot : p.info.overflow_chain) {
      auto [oit, inserted] = overflow_owner.emplace(slot, ino);
      if (!inserted) {
        report.violations.push_back("overflow slot " + std::to_string(slot) +
                                    " shared by inodes " + std::to_string(oit->second) + " and " +
                                    std::to_string(ino));
      }
    }
    const int refs = name_refs.contains(ino) ? name_refs.at(ino) : 0;
    if (refs == 0) {
      report.violations.push_back("orphan inode " + std::to_string(ino));
    } else if (refs > 1) {
      report.violations.push_back("inode " + std::to_string(ino) + " referenced by several names");
    }
    uint64_t prev_end = 0;
    uint64_t mapped_end = 0;
    bool first = true;
    for (const Extent& e : p.info.extents) {
      if (e.length == 0 || e.length > kMaxExtentBlocks) {
        report.violations.push_back("inode " + std::to_string(ino) + ": bad extent length");
        continue;
      }
      if (!first && e.file_block < prev_end) {
        report.violations.push_back("inode " + std::to_string(ino) + ": extents overlap or unsorted");
      }
      first = false;
      prev_end = e.file_block + e.length;
      mapped_end = std::max(mapped_end, (e.file_block + e.length) * geo.block_size);
      for (uint64_t i = 0; i < e.length; ++i) {
        const uint64_t db = e.device_block + i;
        if (db < geo.data_start() || db >= geo.total_blocks) {
          report.violations.push_back("inode " + std::to_string(ino) + ": extent outside data region");
          break;
        }
        if (!allocated(db)) {
          report.violations.push_back("inode " + std::to_string(ino) + ": block " +
                                      std::to_string(db) + " not marked allocated");
        }
        auto [it, inserted] = block_owner.emplace(db, ino);
        if (!inserted) {
          report.violations.push_back("block " + std::to_string(db) + " owned by inodes " +
                                      std::to_string(it->second) + " and " + std::to_string(ino));
        }
        report.live_extent_blocks += 1;
      }
    }
    if (p.info.size > mapped_end && !(p.info.extents.empty() && p.info.size == 0)) {
      report.violations.push_back("inode " + std::to_string(ino) + ": size beyond mapped blocks");
    }
  }

  if (allocated_count != geo.metadata_blocks() + report.live_extent_blocks) {
    report.violations.push_back(
        "allocator conservation broken: allocated=" + std::to_string(allocated_count) +
        " metadata=" + std::to_string(geo.metadata_blocks()) +
        " live=" + std::to_string(report.live_extent_blocks));
  }
  return report;
}

}  // namespace pmsplit
