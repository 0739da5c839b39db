// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/usplit.hpp"

#include <algorithm>
#include <array>
#include <cinttypes>
#include <cstdio>
#include <cstring>

#include "json.hpp"
#include "pmsplit/crc32.hpp"

namespace pmsplit {

namespace {

void put_u16(uint8_t* p, uint16_t v) {
  p[0] = static_cast<uint8_t>(v);
  p[1] = static_cast<uint8_t>(v >> 8);
}
void put_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}
void put_u64(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}
uint16_t get_u16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | p[1] << 8); }
uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

uint64_t round_up(uint64_t v, uint64_t a) { return (v + a - 1) / a * a; }

}  // namespace

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::kPosix: return "posix";
    case Mode::kSync: return "sync";
    case Mode::kStrict: return "strict";
  }
  return "?";
}

Result<Mode> mode_from_name(std::string_view name) {
  if (name == "posix") return Mode::kPosix;
  if (name == "sync") return Mode::kSync;
  if (name == "strict") return Mode::kStrict;
  return Status::invalid_argument("unknown mode '" + std::string(name) + "'");
}

void LogEntry::serialize(std::span<uint8_t, kBytes> out) const {
  std::memset(out.data(), 0, kBytes);
  put_u16(&out[0], opcode);
  put_u16(&out[2], flags);
  put_u64(&out[8], target_ino);
  put_u64(&out[16], target_off);
  put_u64(&out[24], staging_ino);
  put_u64(&out[32], staging_off);
  put_u64(&out[40], size);
  put_u64(&out[48], seq);
  put_u32(&out[60], crc32(std::span<const uint8_t>(out.data(), 60)));
}

std::optional<LogEntry> LogEntry::parse(std::span<const uint8_t, kBytes> in) {
  if (get_u32(&in[60]) != crc32(std::span<const uint8_t>(in.data(), 60))) return std::nullopt;
  LogEntry e;
  e.opcode = get_u16(&in[0]);
  e.flags = get_u16(&in[2]);
  e.target_ino = get_u64(&in[8]);
  e.target_off = get_u64(&in[16]);
  e.staging_ino = get_u64(&in[24]);
  e.staging_off = get_u64(&in[32]);
  e.size = get_u64(&in[40]);
  e.seq = get_u64(&in[48]);
  if (e.opcode == 0 || e.opcode > kUnlinkIntent) return std::nullopt;
  return e;
}

bool LogEntry::slot_is_zero(std::span<const uint8_t, kBytes> in) {
  for (uint8_t b : in) {
    if (b != 0) return false;
  }
  return true;
}

Usplit::Usplit(PmemDevice& dev, Kfs& kfs, Mode mode, UsplitConfig config)
    : dev_(&dev), kfs_(&kfs), mode_(mode), config_(config) {}

Usplit::~Usplit() = default;

Result<std::unique_ptr<Usplit>> Usplit::init(PmemDevice& dev, Kfs& kfs, Mode mode,
                                             UsplitConfig config) {
  if (config.map_size == 0 || config.map_size % kPage != 0) {
    return Status::invalid_argument("map_size must be a multiple of 4096");
  }
  if (config.staging_size < 2 * kPage || config.staging_size % kPage != 0) {
    return Status::invalid_argument("staging_size must be a multiple of 4096, at least 8K");
  }
  if (config.staging_count == 0) return Status::invalid_argument("staging_count must be positive");
  if (config.log_size < 64 * LogEntry::kBytes || config.log_size % kPage != 0) {
    return Status::invalid_argument("log_size must be a multiple of 4096, at least 4K");
  }
  std::unique_ptr<Usplit> us(new Usplit(dev, kfs, mode, config));
  // Instance ids continue past whatever internal files already exist.
  uint32_t max_id = 0;
  for (const std::string& name : kfs.list_names()) {
    unsigned id = 0;
    if (std::sscanf(name.c_str(), "#oplog.%u", &id) == 1 ||
        std::sscanf(name.c_str(), "#stage.%u.", &id) == 1) {
      max_id = std::max(max_id, id + 1);
    }
  }
  us->instance_id_ = max_id;
  if (Status st = us->setup_pool_and_log(); !st.is_ok()) return st;
  return us;
}

Status Usplit::setup_pool_and_log() {
  std::unique_lock lk(mu_);
  return ensure_pool_ready();
}

Status Usplit::ensure_pool_ready() {
  if (pool_ready_) return Status::ok();
  for (uint32_t i = 0; i < config_.staging_count; ++i) {
    if (Status st = add_staging_file(); !st.is_ok()) return st;
  }
  if (mode_ == Mode::kStrict) {
    if (Status st = log_setup(); !st.is_ok()) return st;
  }
  pool_ready_ = true;
  return Status::ok();
}

Status Usplit::add_staging_file() {
  char name[64];
  std::snprintf(name, sizeof name, "#stage.%u.%u", instance_id_, next_staging_index_);
  auto ino = kfs_->create(name);
  if (!ino.is_ok()) return ino.status();
  if (Status st = kfs_->allocate(ino.value(), 0, config_.staging_size); !st.is_ok()) return st;
  auto segs = kfs_->map_extents(ino.value(), 0, config_.staging_size);
  if (!segs.is_ok()) return segs.status();

  StagingFile sf;
  sf.ino = ino.value();
  sf.index = next_staging_index_++;
  sf.capacity = config_.staging_size;
  sf.segments = segs.take();
  pool_.push_back(std::move(sf));
  return Status::ok();
}

uint64_t Usplit::staging_device_addr(const StagingFile& sf, uint64_t off) const {
  for (const Segment& s : sf.segments) {
    if (off < s.length) return s.device_addr + off;
    off -= s.length;
  }
  return 0;
}

void Usplit::staging_store(const StagingFile& sf, uint64_t off, std::span<const uint8_t> data) {
  uint64_t done = 0;
  uint64_t pos = off;
  for (const Segment& s : sf.segments) {
    if (done == data.size()) break;
    if (pos >= s.length) {
      pos -= s.length;
      continue;
    }
    const uint64_t n = std::min(s.length - pos, data.size() - done);
    dev_->store_nt(s.device_addr + pos, data.subspan(done, n));
    done += n;
    pos = 0;
  }
}

void Usplit::staging_load(const StagingFile& sf, uint64_t off, std::span<uint8_t> out) const {
  uint64_t done = 0;
  uint64_t pos = off;
  for (const Segment& s : sf.segments) {
    if (done == out.size()) break;
    if (pos >= s.length) {
      pos -= s.length;
      continue;
    }
    const uint64_t n = std::min(s.length - pos, out.size() - done);
    dev_->load(s.device_addr + pos, out.subspan(done, n));
    done += n;
    pos = 0;
  }
}

Result<std::pair<uint32_t, uint64_t>> Usplit::stage_reserve(FileState& f, uint64_t len,
                                                             uint64_t phase) {
  if (Status st = ensure_pool_ready(); !st.is_ok()) return st;
  auto try_take = [&](uint32_t index) -> std::optional<std::pair<uint32_t, uint64_t>> {
    StagingFile& sf = pool_[index];
    const uint64_t cur_phase = sf.cursor % kPage;
    const uint64_t skip = (phase + kPage - cur_phase) % kPage;
    const uint64_t start = sf.cursor + skip;
    if (start + len > sf.capacity) return std::nullopt;
    sf.cursor = start + len;
    return std::make_pair(index, start);
  };
  // Stick with the staging file checked out to this target; a file whose
  // appends stay together relinks into mergeable extents.
  if (f.staging_affinity >= 0 && static_cast<size_t>(f.staging_affinity) < pool_.size()) {
    if (auto spot = try_take(static_cast<uint32_t>(f.staging_affinity))) return *spot;
  }
  while (true) {
    // Prefer the emptiest file so targets spread across the pool.
    int best = -1;
    uint64_t best_left = 0;
    for (size_t i = 0; i < pool_.size(); ++i) {
      const uint64_t left = pool_[i].capacity - pool_[i].cursor;
      if (left > best_left) {
        best_left = left;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      if (auto spot = try_take(static_cast<uint32_t>(best))) {
        f.staging_affinity = best;
        return *spot;
      }
    }
    // Pool exhausted: replenish. (The paper runs this from a background
    // thread; doing it inline has the same observable effect.)
    if (Status st = add_staging_file(); !st.is_ok()) return st;
  }
}

std::shared_ptr<Usplit::FileState> Usplit::file_state(uint64_t ino) {
  auto it = files_.find(ino);
  if (it != files_.end()) return it->second;
  auto f = std::make_shared<FileState>();
  f->ino = ino;
  files_[ino] = f;
  return f;
}

Result<std::shared_ptr<Usplit::FileState>> Usplit::resolve(int fd, OpenFile** open_out) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) return Status::invalid_argument("bad file descriptor");
  auto fit = files_.find(it->second->ino);
  if (fit == files_.end() || fit->second->dead) {
    return Status::stale("file was unlinked");
  }
  if (open_out) *open_out = it->second.get();
  return fit->second;
}

Result<int> Usplit::open(std::string_view name, bool create_if_missing) {
  std::unique_lock lk(mu_);
  if (is_internal_name(name)) return Status::invalid_argument("reserved name");
  auto ino = kfs_->lookup(name);
  if (!ino.is_ok()) {
    if (ino.status().code() != Errc::kNotFound || !create_if_missing) return ino.status();
    if (mode_ == Mode::kStrict) {
      if (Status st = ensure_pool_ready(); !st.is_ok()) return st;
    }
    ino = kfs_->create(name);
    if (!ino.is_ok()) return ino.status();
    if (mode_ == Mode::kStrict) {
      LogEntry e;
      e.opcode = LogEntry::kCreate;
      e.target_ino = ino.value();
      if (Status st = log_append(e); !st.is_ok()) return st;
    }
  }
  auto st = kfs_->stat(ino.value());
  if (!st.is_ok()) return st.status();

  auto f = file_state(ino.value());
  f->name = std::string(name);
  f->kfs_size = st.value().size;
  f->generation = st.value().generation;
  uint64_t staged_end = f->kfs_size;
  if (!f->staged.empty()) {
    const auto& [off, seg] = *f->staged.rbegin();
    staged_end = std::max(staged_end, off + seg.len);
  }
  f->local_size = staged_end;
  attr_cache_[f->name] = st.value();

  const int fd = next_fd_++;
  auto of = std::make_shared<OpenFile>();
  of->ino = ino.value();
  fds_[fd] = std::move(of);
  return fd;
}

Status Usplit::close(int fd) {
  std::unique_lock lk(mu_);
  auto it = fds_.find(fd);
  if (it == fds_.end()) return Status::invalid_argument("bad file descriptor");
  it->second->refcount -= 1;
  fds_.erase(it);
  // Cached attributes and mappings deliberately survive close.
  return Status::ok();
}

Result<int> Usplit::dup(int fd) {
  std::unique_lock lk(mu_);
  auto it = fds_.find(fd);
  if (it == fds_.end()) return Status::invalid_argument("bad file descriptor");
  it->second->refcount += 1;
  const int fd2 = next_fd_++;
  fds_[fd2] = it->second;  // duplicated descriptors share one offset
  return fd2;
}

Result<uint64_t> Usplit::lseek(int fd, int64_t offset, Whence whence) {
  std::unique_lock lk(mu_);
  OpenFile* of = nullptr;
  auto f = resolve(fd, &of);
  if (!f.is_ok()) return f.status();
  int64_t base = 0;
  switch (whence) {
    case Whence::kSet: base = 0; break;
    case Whence::kCur: base = static_cast<int64_t>(of->offset); break;
    case Whence::kEnd: base = static_cast<int64_t>(f.value()->local_size); break;
  }
  const int64_t target = base + offset;
  if (target < 0) return Status::invalid_argument("seek before start of file");
  of->offset = static_cast<uint64_t>(target);
  return of->offset;
}

// Interval-map plumbing: both the mapping cache and the staged-range list are
// disjoint {offset -> segment} maps where trimming a segment shifts its
// backing address.

void Usplit::insert_mapping(FileState& f, uint64_t off, uint64_t len, uint64_t device_addr,
                            bool from_staging, bool override_existing) {
  if (len == 0) return;
  const uint64_t end = off + len;
  auto& m = f.mapping;
  if (override_existing) {
    auto it = m.lower_bound(off);
    if (it != m.begin()) {
      auto prev = std::prev(it);
      const uint64_t prev_end = prev->first + prev->second.len;
      if (prev_end > off) {
        MappedSeg tail = prev->second;
        prev->second.len = off - prev->first;
        if (prev_end > end) {
          MappedSeg rest;
          rest.len = prev_end - end;
          rest.device_addr = tail.device_addr + (end - prev->first);
          rest.from_staging = tail.from_staging;
          m[end] = rest;
        }
        if (prev->second.len == 0) m.erase(prev);
      }
    }
    it = m.lower_bound(off);
    while (it != m.end() && it->first < end) {
      const uint64_t seg_end = it->first + it->second.len;
      if (seg_end <= end) {
        it = m.erase(it);
      } else {
        MappedSeg rest;
        rest.len = seg_end - end;
        rest.device_addr = it->second.device_addr + (end - it->first);
        rest.from_staging = it->second.from_staging;
        m.erase(it);
        m[end] = rest;
        break;
      }
    }
    m[off] = MappedSeg{len, device_addr, from_staging};
    return;
  }
  // Gap-filling insert: keep existing segments, add pieces where nothing is
  // mapped yet.
  uint64_t pos = off;
  while (pos < end) {
    auto it = m.upper_bound(pos);
    if (it != m.begin()) {
      auto prev = std::prev(it);
      const uint64_t prev_end = prev->first + prev->second.len;
      if (prev_end > pos) {
        pos = prev_end;
        continue;
      }
    }
    const uint64_t next_start = it == m.end() ? end : std::min(it->first, end);
    if (next_start > pos) {
      m[pos] = MappedSeg{next_start - pos, device_addr + (pos - off), from_staging};
    }
    pos = next_start;
    if (it != m.end() && pos == it->first) pos += it->second.len;
  }
}

void Usplit::insert_staged(FileState& f, uint64_t off, StagedSeg seg) {
  const uint64_t end = off + seg.len;
  auto& m = f.staged;
  auto it = m.lower_bound(off);
  if (it != m.begin()) {
    auto prev = std::prev(it);
    const uint64_t prev_end = prev->first + prev->second.len;
    if (prev_end > off) {
      StagedSeg old = prev->second;
      prev->second.len = off - prev->first;
      if (prev_end > end) {
        StagedSeg rest = old;
        rest.len = prev_end - end;
        rest.staging_off = old.staging_off + (end - prev->first);
        m[end] = rest;
      }
      if (prev->second.len == 0) m.erase(prev);
    }
  }
  it = m.lower_bound(off);
  while (it != m.end() && it->first < end) {
    const uint64_t seg_end = it->first + it->second.len;
    if (seg_end <= end) {
      it = m.erase(it);
    } else {
      StagedSeg rest = it->second;
      rest.len = seg_end - end;
      rest.staging_off = it->second.staging_off + (end - it->first);
      m.erase(it);
      m[end] = rest;
      break;
    }
  }
  m[off] = seg;
}

void Usplit::erase_mapping(FileState& f, uint64_t off, uint64_t len) {
  if (len == 0) return;
  const uint64_t end = off + len;
  auto& m = f.mapping;
  auto it = m.lower_bound(off);
  if (it != m.begin()) {
    auto prev = std::prev(it);
    const uint64_t prev_end = prev->first + prev->second.len;
    if (prev_end > off) {
      MappedSeg tail = prev->second;
      prev->second.len = off - prev->first;
      if (prev_end > end) {
        MappedSeg rest;
        rest.len = prev_end - end;
        rest.device_addr = tail.device_addr + (end - prev->first);
        rest.from_staging = tail.from_staging;
        m[end] = rest;
      }
      if (prev->second.len == 0) m.erase(prev);
    }
  }
  it = m.lower_bound(off);
  while (it != m.end() && it->first < end) {
    const uint64_t seg_end = it->first + it->second.len;
    if (seg_end <= end) {
      it = m.erase(it);
    } else {
      MappedSeg rest;
      rest.len = seg_end - end;
      rest.device_addr = it->second.device_addr + (end - it->first);
      rest.from_staging = it->second.from_staging;
      m.erase(it);
      m[end] = rest;
      break;
    }
  }
}

Status Usplit::ensure_mapped(FileState& f, uint64_t off, uint64_t len) {
  const uint64_t end = off + len;
  uint64_t pos = off;
  while (pos < end) {
    auto it = f.mapping.upper_bound(pos);
    if (it != f.mapping.begin()) {
      auto prev = std::prev(it);
      const uint64_t prev_end = prev->first + prev->second.len;
      if (prev_end > pos) {
        pos = prev_end;
        continue;
      }
    }
    // Mapping miss: map the surrounding fixed-size region, clamped to the
    // published file size, and fill the gaps it covers.
    const uint64_t region_start = pos / config_.map_size * config_.map_size;
    const uint64_t region_end =
        std::min(region_start + config_.map_size, round_up(f.kfs_size, kPage));
    if (pos >= region_end) {
      return Status::io("offset beyond mapped file range");
    }
    auto segs = kfs_->map_extents(f.ino, region_start, region_end - region_start);
    if (!segs.is_ok()) return segs.status();
    uint64_t at = region_start;
    for (const Segment& s : segs.value()) {
      insert_mapping(f, at, s.length, s.device_addr, /*from_staging=*/false,
                     /*override_existing=*/false);
      at += s.length;
    }
  }
  return Status::ok();
}

Result<std::vector<uint8_t>> Usplit::read_locked(FileState& f, uint64_t off, uint64_t len) {
  if (off >= f.local_size) return std::vector<uint8_t>{};
  len = std::min(len, f.local_size - off);
  std::vector<uint8_t> out(len);
  uint64_t pos = off;
  while (pos < off + len) {
    const uint64_t want_end = off + len;
    // Staged data wins over everything else.
    auto it = f.staged.upper_bound(pos);
    if (it != f.staged.begin()) {
      auto prev = std::prev(it);
      const uint64_t prev_end = prev->first + prev->second.len;
      if (prev_end > pos) {
        const uint64_t n = std::min(prev_end, want_end) - pos;
        const StagedSeg& seg = prev->second;
        staging_load(pool_[seg.staging_index], seg.staging_off + (pos - prev->first),
                     std::span<uint8_t>(out.data() + (pos - off), n));
        pos += n;
        continue;
      }
    }
    const uint64_t next_staged = it == f.staged.end() ? want_end : std::min(it->first, want_end);
    const uint64_t gap = next_staged - pos;
    if (Status st = ensure_mapped(f, pos, gap); !st.is_ok()) return st;
    uint64_t gpos = pos;
    while (gpos < pos + gap) {
      auto mit = f.mapping.upper_bound(gpos);
      auto seg = std::prev(mit);
      const uint64_t seg_end = seg->first + seg->second.len;
      const uint64_t n = std::min(seg_end, pos + gap) - gpos;
      dev_->load(seg->second.device_addr + (gpos - seg->first),
                 std::span<uint8_t>(out.data() + (gpos - off), n));
      gpos += n;
    }
    pos += gap;
  }
  return out;
}

Result<uint64_t> Usplit::write_locked(FileState& f, uint64_t off, std::span<const uint8_t> data) {
  if (data.empty()) return uint64_t{0};
  if (off > f.local_size) {
    return Status::invalid_argument("write beyond end of file would leave a hole");
  }
  // POSIX and sync writes crossing the end of file split: the prefix is a
  // plain in-place overwrite, only the extension stages. Strict mode keeps
  // the whole chunk in staging so the log entry makes it atomic.
  if (mode_ != Mode::kStrict && off < f.local_size && off + data.size() > f.local_size) {
    const uint64_t split = f.local_size - off;
    auto head = write_locked(f, off, data.first(split));
    if (!head.is_ok()) return head;
    auto tail = write_locked(f, off + split, data.subspan(split));
    if (!tail.is_ok()) return tail;
    return uint64_t{data.size()};
  }
  const bool is_append = off + data.size() > f.local_size;
  const bool staged_path = is_append || mode_ == Mode::kStrict;

  if (staged_path) {
    if (Status st = ensure_pool_ready(); !st.is_ok()) return st;
    // Large writes chunk across staging files; each chunk gets its own log
    // entry (the single-entry common case is one chunk).
    const uint64_t max_chunk = config_.staging_size - kPage;
    std::vector<LogEntry> entries;
    uint64_t done = 0;
    while (done < data.size()) {
      const uint64_t at = off + done;
      const uint64_t n = std::min(data.size() - done, max_chunk);
      auto spot = stage_reserve(f, n, at % kPage);
      if (!spot.is_ok()) return spot.status();
      const auto [sidx, soff] = spot.value();
      staging_store(pool_[sidx], soff, data.subspan(done, n));

      StagedSeg seg;
      seg.len = n;
      seg.staging_index = sidx;
      seg.staging_off = soff;
      seg.strict_overwrite = mode_ == Mode::kStrict && !is_append;
      insert_staged(f, at, seg);

      if (mode_ == Mode::kStrict) {
        LogEntry e;
        e.opcode = LogEntry::kData;
        e.flags = is_append ? LogEntry::kFlagAppend : 0;
        e.target_ino = f.ino;
        e.target_off = at;
        e.staging_ino = pool_[sidx].ino;
        e.staging_off = soff;
        e.size = n;
        entries.push_back(e);
      }
      done += n;
    }
    if (is_append) f.local_size = std::max(f.local_size, off + data.size());
    if (mode_ != Mode::kPosix) dev_->fence();  // POSIX appends persist on fsync
    for (const LogEntry& e : entries) {
      if (Status st = log_append(e); !st.is_ok()) return st;
    }
    return uint64_t{data.size()};
  }

  // In-place overwrite (POSIX and sync): non-temporal stores through the
  // mapping collection; staged append data is updated where it shadows the
  // range.
  uint64_t pos = off;
  const uint64_t end = off + data.size();
  while (pos < end) {
    auto it = f.staged.upper_bound(pos);
    if (it != f.staged.begin()) {
      auto prev = std::prev(it);
      const uint64_t prev_end = prev->first + prev->second.len;
      if (prev_end > pos) {
        const uint64_t n = std::min(prev_end, end) - pos;
        const StagedSeg& seg = prev->second;
        staging_store(pool_[seg.staging_index], seg.staging_off + (pos - prev->first),
                      data.subspan(pos - off, n));
        pos += n;
        continue;
      }
    }
    const uint64_t next_staged = it == f.staged.end() ? end : std::min(it->first, end);
    const uint64_t gap = next_staged - pos;
    if (Status st = ensure_mapped(f, pos, gap); !st.is_ok()) return st;
    uint64_t gpos = pos;
    while (gpos < pos + gap) {
      auto mit = f.mapping.upper_bound(gpos);
      auto seg = std::prev(mit);
      const uint64_t seg_end = seg->first + seg->second.len;
      const uint64_t n = std::min(seg_end, pos + gap) - gpos;
      dev_->store_nt(seg->second.device_addr + (gpos - seg->first), data.subspan(gpos - off, n));
      gpos += n;
    }
    pos += gap;
  }
  dev_->fence();
  return uint64_t{data.size()};
}

Result<std::vector<uint8_t>> Usplit::read(int fd, uint64_t len) {
  std::unique_lock lk(mu_);
  OpenFile* of = nullptr;
  auto f = resolve(fd, &of);
  if (!f.is_ok()) return f.status();
  auto out = read_locked(*f.value(), of->offset, len);
  if (out.is_ok()) of->offset += out.value().size();
  return out;
}

Result<std::vector<uint8_t>> Usplit::pread(int fd, uint64_t off, uint64_t len) {
  std::unique_lock lk(mu_);
  auto f = resolve(fd, nullptr);
  if (!f.is_ok()) return f.status();
  return read_locked(*f.value(), off, len);
}

Result<uint64_t> Usplit::write(int fd, std::span<const uint8_t> data) {
  std::unique_lock lk(mu_);
  OpenFile* of = nullptr;
  auto f = resolve(fd, &of);
  if (!f.is_ok()) return f.status();
  auto n = write_locked(*f.value(), of->offset, data);
  if (n.is_ok()) of->offset += n.value();
  return n;
}

Result<uint64_t> Usplit::pwrite(int fd, uint64_t off, std::span<const uint8_t> data) {
  std::unique_lock lk(mu_);
  auto f = resolve(fd, nullptr);
  if (!f.is_ok()) return f.status();
  return write_locked(*f.value(), off, data);
}

Status Usplit::fsync_locked(FileState& f, bool log_marker) {
  if (f.staged.empty()) return Status::ok();  // nothing to publish: no txn, no log entry

  // Coalesce adjacent staged ranges that are also contiguous in staging
  // space, then move everything in one journal transaction.
  std::vector<RelinkPiece> pieces;
  for (const auto& [off, seg] : f.staged) {
    if (!pieces.empty()) {
      RelinkPiece& last = pieces.back();
      // Contiguity in the destination and in the same staging file.
      if (last.dst_off + last.size == off &&
          last.src_ino == pool_[seg.staging_index].ino &&
          last.src_off + last.size == seg.staging_off) {
        last.size += seg.len;
        continue;
      }
    }
    RelinkPiece p;
    p.src_ino = pool_[seg.staging_index].ino;
    p.src_off = seg.staging_off;
    p.dst_off = off;
    p.size = seg.len;
    pieces.push_back(p);
  }

  // Convert the block-aligned bodies of the staged ranges into mapping
  // overlays before the move: those device blocks keep their contents and
  // addresses across relink, so existing addresses stay valid and stale
  // target mappings over replaced ranges get overridden. Unaligned edges are
  // copied into destination blocks instead, so their old mappings are simply
  // dropped and re-mapped from the target on the next access.
  for (const RelinkPiece& p : pieces) {
    const uint64_t body_begin = std::min((p.dst_off + kPage - 1) / kPage * kPage,
                                         p.dst_off + p.size);
    const uint64_t body_end = std::max((p.dst_off + p.size) / kPage * kPage, body_begin);
    if (p.dst_off < body_begin) erase_mapping(f, p.dst_off, body_begin - p.dst_off);
    if (body_end < p.dst_off + p.size) erase_mapping(f, body_end, p.dst_off + p.size - body_end);

    const StagingFile* sf = nullptr;
    for (const StagingFile& cand : pool_) {
      if (cand.ino == p.src_ino) sf = &cand;
    }
    if (sf == nullptr) continue;
    uint64_t done = body_begin - p.dst_off;
    while (p.dst_off + done < body_end) {
      const uint64_t want = body_end - (p.dst_off + done);
      const uint64_t addr = staging_device_addr(*sf, p.src_off + done);
      // Length contiguous within one staging segment.
      uint64_t contig = 0;
      {
        uint64_t pos = p.src_off + done;
        for (const Segment& s : sf->segments) {
          if (pos < s.length) {
            contig = std::min(s.length - pos, want);
            break;
          }
          pos -= s.length;
        }
      }
      insert_mapping(f, p.dst_off + done, contig, addr, /*from_staging=*/true,
                     /*override_existing=*/true);
      done += contig;
    }
  }

  if (Status st = kfs_->relink_batch(f.ino, pieces); !st.is_ok()) return st;
  f.staged.clear();
  f.kfs_size = f.local_size;
  auto st = kfs_->stat(f.ino);
  if (st.is_ok()) {
    f.generation = st.value().generation;
    attr_cache_[f.name] = st.value();
  }
  dev_->fence();

  if (mode_ == Mode::kStrict && log_marker) {
    LogEntry e;
    e.opcode = LogEntry::kFsyncDone;
    e.target_ino = f.ino;
    if (Status s2 = log_append(e); !s2.is_ok()) return s2;
  }
  return Status::ok();
}

Status Usplit::fsync(int fd) {
  std::unique_lock lk(mu_);
  auto f = resolve(fd, nullptr);
  if (!f.is_ok()) return f.status();
  return fsync_locked(*f.value(), /*log_marker=*/true);
}

Status Usplit::unlink(std::string_view name) {
  std::unique_lock lk(mu_);
  if (is_internal_name(name)) return Status::invalid_argument("reserved name");
  auto ino = kfs_->lookup(name);
  if (!ino.is_ok()) return ino.status();
  if (mode_ == Mode::kStrict) {
    if (Status st = ensure_pool_ready(); !st.is_ok()) return st;
    LogEntry e;
    e.opcode = LogEntry::kUnlinkIntent;
    e.target_ino = ino.value();
    if (Status st = log_append(e); !st.is_ok()) return st;
  }
  if (Status st = kfs_->unlink(name); !st.is_ok()) return st;
  if (mode_ == Mode::kStrict) {
    // The barrier entry lands only once the unlink is durable; replay treats
    // it as proof that earlier data entries for this inode are moot.
    LogEntry e;
    e.opcode = LogEntry::kUnlink;
    e.target_ino = ino.value();
    if (Status st = log_append(e); !st.is_ok()) return st;
  }
  // Drop every cached mapping, staged range, and attribute.
  auto it = files_.find(ino.value());
  if (it != files_.end()) {
    it->second->dead = true;
    it->second->mapping.clear();
    it->second->staged.clear();
    files_.erase(it);
  }
  attr_cache_.erase(std::string(name));
  return Status::ok();
}

Status Usplit::rename(std::string_view old_name, std::string_view new_name) {
  std::unique_lock lk(mu_);
  if (is_internal_name(old_name) || is_internal_name(new_name)) {
    return Status::invalid_argument("reserved name");
  }
  auto ino = kfs_->lookup(old_name);
  if (!ino.is_ok()) return ino.status();
  auto displaced = kfs_->lookup(new_name);
  if (mode_ == Mode::kStrict) {
    if (Status st = ensure_pool_ready(); !st.is_ok()) return st;
    // Rename is the uncommon multi-entry operation: an intent entry first,
    // then (after the kernel side commits) an apply entry doubling as the
    // tombstone for any displaced inode.
    LogEntry intent;
    intent.opcode = LogEntry::kRenameIntent;
    intent.target_ino = ino.value();
    if (Status st = log_append(intent); !st.is_ok()) return st;
  }
  if (Status st = kfs_->rename(old_name, new_name); !st.is_ok()) return st;
  if (mode_ == Mode::kStrict) {
    LogEntry apply;
    apply.opcode = LogEntry::kRenameApply;
    apply.target_ino = displaced.is_ok() ? displaced.value() : 0;
    if (Status st = log_append(apply); !st.is_ok()) return st;
  }
  if (displaced.is_ok()) {
    auto it = files_.find(displaced.value());
    if (it != files_.end()) {
      it->second->dead = true;
      files_.erase(it);
    }
    attr_cache_.erase(std::string(new_name));
  }
  auto it = files_.find(ino.value());
  if (it != files_.end()) it->second->name = std::string(new_name);
  auto ac = attr_cache_.find(std::string(old_name));
  if (ac != attr_cache_.end()) {
    attr_cache_[std::string(new_name)] = ac->second;
    attr_cache_.erase(ac);
  }
  return Status::ok();
}

Result<KfsStat> Usplit::stat(int fd) {
  std::unique_lock lk(mu_);
  auto f = resolve(fd, nullptr);
  if (!f.is_ok()) return f.status();
  FileState& state = *f.value();
  if (!state.staged.empty()) {
    return KfsStat{state.local_size, state.generation};
  }
  // No pending local state: serve the published attributes so another
  // instance's fsync'ed appends become visible.
  auto st = kfs_->stat(state.ino);
  if (!st.is_ok()) return st.status();
  state.kfs_size = st.value().size;
  state.local_size = st.value().size;
  state.generation = st.value().generation;
  attr_cache_[state.name] = st.value();
  return st.value();
}

Status Usplit::checkpoint() {
  std::unique_lock lk(mu_);
  return checkpoint_locked();
}

Status Usplit::checkpoint_locked() {
  // Publish every file with staged data; markers are pointless since the log
  // is zeroed right after.
  for (auto& [ino, f] : files_) {
    if (Status st = fsync_locked(*f, /*log_marker=*/false); !st.is_ok()) return st;
  }
  if (log_ino_ == 0) return Status::ok();
  // Zero the header first: a crash mid-zero leaves a log without a valid
  // header, which recovery ignores wholesale.
  std::array<uint8_t, LogEntry::kBytes> zero{};
  dev_->store_nt(log_slot_addr(0), zero);
  dev_->fence();
  for (const Segment& s : log_segments_) {
    dev_->store_nt_fill(s.device_addr, 0, s.length);
  }
  dev_->fence();
  LogEntry header;
  header.opcode = LogEntry::kLogInit;
  std::array<uint8_t, LogEntry::kBytes> buf{};
  header.serialize(buf);
  dev_->store_nt(log_slot_addr(0), buf);
  dev_->fence();
  log_tail_.store(1, std::memory_order_relaxed);
  return Status::ok();
}

Status Usplit::log_setup() {
  char name[64];
  std::snprintf(name, sizeof name, "#oplog.%u", instance_id_);
  auto ino = kfs_->create(name);
  if (!ino.is_ok()) return ino.status();
  log_ino_ = ino.value();
  if (Status st = kfs_->allocate(log_ino_, 0, config_.log_size); !st.is_ok()) return st;
  auto segs = kfs_->map_extents(log_ino_, 0, config_.log_size);
  if (!segs.is_ok()) return segs.status();
  log_segments_ = segs.take();
  // A zeroed log is the validity baseline: recovery treats any nonzero
  // 64-byte slot as a candidate entry.
  for (const Segment& s : log_segments_) {
    dev_->store_nt_fill(s.device_addr, 0, s.length);
  }
  dev_->fence();
  LogEntry header;
  header.opcode = LogEntry::kLogInit;
  std::array<uint8_t, LogEntry::kBytes> buf{};
  header.serialize(buf);
  dev_->store_nt(log_slot_addr(0), buf);
  dev_->fence();
  log_tail_.store(1, std::memory_order_relaxed);
  return Status::ok();
}

uint64_t Usplit::log_slot_addr(uint64_t slot) const {
  uint64_t off = slot * LogEntry::kBytes;
  for (const Segment& s : log_segments_) {
    if (off < s.length) return s.device_addr + off;
    off -= s.length;
  }
  return 0;
}

uint64_t Usplit::log_capacity_slots() const { return config_.log_size / LogEntry::kBytes; }

Status Usplit::log_append(const LogEntry& entry) {
  // Advance the DRAM tail with compare-and-swap; concurrent writers land in
  // disjoint slots. seq equals the slot index, so valid entries carry
  // strictly increasing seq in slot order.
  uint64_t slot = 0;
  while (true) {
    slot = log_tail_.load(std::memory_order_relaxed);
    if (slot >= log_capacity_slots()) {
      if (Status st = checkpoint_locked(); !st.is_ok()) return st;
      continue;
    }
    if (log_tail_.compare_exchange_weak(slot, slot + 1, std::memory_order_relaxed)) break;
  }
  LogEntry e = entry;
  e.seq = slot;
  std::array<uint8_t, LogEntry::kBytes> buf{};
  e.serialize(buf);
  dev_->store_nt(log_slot_addr(slot), buf);
  const bool skip_fence = faults_ != nullptr && faults_->skip_log_fence;
  if (!skip_fence) dev_->fence();
  dev_->counters_mut().log_entries_written += 1;
  return Status::ok();
}

uint64_t Usplit::staged_bytes() const {
  std::shared_lock lk(mu_);
  uint64_t total = 0;
  for (const auto& [ino, f] : files_) {
    for (const auto& [off, seg] : f->staged) total += seg.len;
  }
  return total;
}

uint64_t Usplit::staging_capacity_left() const {
  std::shared_lock lk(mu_);
  uint64_t left = 0;
  for (const StagingFile& sf : pool_) left += sf.capacity - sf.cursor;
  return left;
}

// ---------------------------------------------------------------------------
// Recovery

Status Usplit::replay_log(Kfs& kfs, uint64_t log_ino, RecoverStats* stats) {
  auto st = kfs.stat(log_ino);
  if (!st.is_ok()) return st.status();
  const uint64_t size = st.value().size;
  if (size < LogEntry::kBytes) return Status::ok();
  auto bytes_r = kfs.read_direct(log_ino, 0, size);
  if (!bytes_r.is_ok()) return bytes_r.status();
  const std::vector<uint8_t>& bytes = bytes_r.value();
  const uint64_t slots = bytes.size() / LogEntry::kBytes;
  if (slots == 0) return Status::ok();

  auto slot_span = [&](uint64_t i) {
    return std::span<const uint8_t, LogEntry::kBytes>(bytes.data() + i * LogEntry::kBytes,
                                                      LogEntry::kBytes);
  };
  // Without a valid init header the log was never fully zeroed; ignore it.
  auto header = LogEntry::parse(slot_span(0));
  if (!header || header->opcode != LogEntry::kLogInit) return Status::ok();

  // Collect candidate entries: zero slots are unused (concurrent writers may
  // leave gaps); the first torn slot invalidates it and everything after.
  std::vector<LogEntry> entries;
  for (uint64_t i = 1; i < slots; ++i) {
    auto span = slot_span(i);
    if (LogEntry::slot_is_zero(span)) continue;
    auto e = LogEntry::parse(span);
    if (!e) break;  // torn entry: discard it and all later slots
    entries.push_back(*e);
  }
  std::sort(entries.begin(), entries.end(),
            [](const LogEntry& a, const LogEntry& b) { return a.seq < b.seq; });

  // A data entry replays only if no later fsync marker or tombstone covers
  // its inode.
  std::map<uint64_t, uint64_t> barrier_seq;  // ino -> last marker/tombstone seq
  for (const LogEntry& e : entries) {
    if (e.opcode == LogEntry::kFsyncDone || e.opcode == LogEntry::kUnlink ||
        e.opcode == LogEntry::kRenameApply) {
      if (e.target_ino != 0) barrier_seq[e.target_ino] = e.seq;
    }
  }

  for (const LogEntry& e : entries) {
    if (e.opcode != LogEntry::kData) continue;
    auto it = barrier_seq.find(e.target_ino);
    if (it != barrier_seq.end() && e.seq < it->second) continue;
    if (!kfs.inode(e.target_ino).is_ok()) continue;   // target gone
    auto src = kfs.inode(e.staging_ino);
    if (!src.is_ok()) continue;                       // staging file gone
    if (stats) stats->entries_replayed += 1;

    // Redo piece-wise: sub-ranges whose staging blocks were already moved by
    // the original relink are holes and are skipped; still-owned sub-ranges
    // (whole blocks or copied edges) are relinked again. Replay converges, so
    // running it repeatedly is safe.
    const uint64_t bs = kPage;
    uint64_t run_start = 0;
    bool in_run = false;
    uint64_t pos = 0;
    while (pos < e.size) {
      const uint64_t soff = e.staging_off + pos;
      const uint64_t n = std::min(bs - soff % bs, e.size - pos);
      const bool owned = extents::device_block_of(src.value().extents, soff / bs) != 0;
      if (owned && !in_run) {
        run_start = pos;
        in_run = true;
      }
      if (!owned && in_run) {
        if (Status rs = kfs.relink(e.staging_ino, e.staging_off + run_start, e.target_ino,
                                   e.target_off + run_start, pos - run_start);
            !rs.is_ok()) {
          return rs;
        }
        if (stats) stats->relink_calls += 1;
        in_run = false;
      }
      pos += n;
    }
    if (in_run) {
      if (Status rs = kfs.relink(e.staging_ino, e.staging_off + run_start, e.target_ino,
                                 e.target_off + run_start, e.size - run_start);
          !rs.is_ok()) {
        return rs;
      }
      if (stats) stats->relink_calls += 1;
    }
    // An append must land the size even when every block already moved.
    if (e.flags & LogEntry::kFlagAppend) {
      auto tstat = kfs.stat(e.target_ino);
      if (tstat.is_ok() && tstat.value().size < e.target_off + e.size) {
        if (Status as = kfs.allocate(e.target_ino, e.target_off, e.size); !as.is_ok()) return as;
      }
    }
  }
  kfs.device().fence();
  return Status::ok();
}

Result<Kfs> Usplit::recover_fs(PmemDevice& dev, RecoverStats* stats) {
  auto kfs_r = Kfs::mount(dev);
  if (!kfs_r.is_ok()) return kfs_r.status();
  Kfs kfs = kfs_r.take();

  std::vector<std::string> internal;
  std::vector<uint64_t> logs;
  for (const std::string& name : kfs.list_names()) {
    if (!is_internal_name(name)) continue;
    internal.push_back(name);
    if (name.rfind("#oplog.", 0) == 0) {
      auto ino = kfs.lookup(name);
      if (ino.is_ok()) logs.push_back(ino.value());
    }
  }
  if (stats) stats->logs_found = logs.size();
  for (uint64_t log_ino : logs) {
    if (Status st = replay_log(kfs, log_ino, stats); !st.is_ok()) return st;
  }
  // Stale staging and log files have served their purpose.
  for (const std::string& name : internal) {
    if (Status st = kfs.unlink(name); !st.is_ok()) return st;
  }
  // Leave the journal canonical so recovering again changes nothing.
  kfs.reset_journal();
  return kfs;
}

Result<std::unique_ptr<Usplit>> Usplit::recover(PmemDevice& dev, Mode mode, UsplitConfig config) {
  auto kfs_r = recover_fs(dev);
  if (!kfs_r.is_ok()) return kfs_r.status();
  auto owned = std::make_unique<Kfs>(kfs_r.take());
  std::unique_ptr<Usplit> us(new Usplit(dev, *owned, mode, config));
  us->owned_kfs_ = std::move(owned);
  // Staging pool and log are created lazily on first use so recovery itself
  // leaves the image untouched.
  uint32_t max_id = 0;
  for (const std::string& name : us->kfs_->list_names()) {
    unsigned id = 0;
    if (std::sscanf(name.c_str(), "#oplog.%u", &id) == 1 ||
        std::sscanf(name.c_str(), "#stage.%u.", &id) == 1) {
      max_id = std::max(max_id, id + 1);
    }
  }
  us->instance_id_ = max_id;
  return us;
}

// ---------------------------------------------------------------------------
// Context save/restore

std::string Usplit::save_context() const {
  std::shared_lock lk(mu_);
  nlohmann::json j;
  j["mode"] = std::string(mode_name(mode_));
  j["instance_id"] = instance_id_;
  j["next_fd"] = next_fd_;
  j["next_staging_index"] = next_staging_index_;
  j["pool_ready"] = pool_ready_;
  j["config"] = {{"map_size", config_.map_size},
                 {"staging_count", config_.staging_count},
                 {"staging_size", config_.staging_size},
                 {"log_size", config_.log_size}};

  // Descriptors sharing an OpenFile keep sharing after restore.
  std::map<const OpenFile*, int> group_ids;
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [fd, of] : fds_) {
    if (!group_ids.contains(of.get())) {
      const int id = static_cast<int>(group_ids.size());
      group_ids[of.get()] = id;
      groups.push_back({{"ino", of->ino}, {"offset", of->offset}, {"fds", nlohmann::json::array()}});
    }
  }
  for (const auto& [fd, of] : fds_) {
    groups[group_ids[of.get()]]["fds"].push_back(fd);
  }
  j["open_groups"] = groups;

  nlohmann::json files = nlohmann::json::array();
  for (const auto& [ino, f] : files_) {
    nlohmann::json staged = nlohmann::json::array();
    for (const auto& [off, seg] : f->staged) {
      staged.push_back({{"off", off},
                        {"len", seg.len},
                        {"staging_index", seg.staging_index},
                        {"staging_off", seg.staging_off},
                        {"strict_overwrite", seg.strict_overwrite}});
    }
    files.push_back({{"ino", ino},
                     {"name", f->name},
                     {"kfs_size", f->kfs_size},
                     {"local_size", f->local_size},
                     {"generation", f->generation},
                     {"staging_affinity", f->staging_affinity},
                     {"staged", staged}});
  }
  j["files"] = files;

  nlohmann::json pool = nlohmann::json::array();
  for (const StagingFile& sf : pool_) {
    nlohmann::json segs = nlohmann::json::array();
    for (const Segment& s : sf.segments) segs.push_back({{"addr", s.device_addr}, {"len", s.length}});
    pool.push_back({{"ino", sf.ino},
                    {"index", sf.index},
                    {"capacity", sf.capacity},
                    {"cursor", sf.cursor},
                    {"segments", segs}});
  }
  j["pool"] = pool;

  nlohmann::json logj;
  logj["ino"] = log_ino_;
  logj["tail"] = log_tail_.load(std::memory_order_relaxed);
  nlohmann::json lsegs = nlohmann::json::array();
  for (const Segment& s : log_segments_) lsegs.push_back({{"addr", s.device_addr}, {"len", s.length}});
  logj["segments"] = lsegs;
  j["log"] = logj;
  return j.dump();
}

Result<std::unique_ptr<Usplit>> Usplit::load_context(PmemDevice& dev, Kfs& kfs,
                                                     const std::string& context) {
  nlohmann::json j = nlohmann::json::parse(context, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) return Status::invalid_argument("unparsable context");
  auto mode = mode_from_name(j.value("mode", ""));
  if (!mode.is_ok()) return mode.status();
  UsplitConfig config;
  config.map_size = j["config"].value("map_size", config.map_size);
  config.staging_count = j["config"].value("staging_count", config.staging_count);
  config.staging_size = j["config"].value("staging_size", config.staging_size);
  config.log_size = j["config"].value("log_size", config.log_size);

  std::unique_ptr<Usplit> us(new Usplit(dev, kfs, mode.value(), config));
  us->instance_id_ = j.value("instance_id", 0u);
  us->next_fd_ = j.value("next_fd", 0);
  us->next_staging_index_ = j.value("next_staging_index", 0u);
  us->pool_ready_ = j.value("pool_ready", false);

  for (const auto& g : j["open_groups"]) {
    auto of = std::make_shared<OpenFile>();
    of->ino = g.value("ino", uint64_t{0});
    of->offset = g.value("offset", uint64_t{0});
    of->refcount = static_cast<int>(g["fds"].size());
    for (const auto& fd : g["fds"]) us->fds_[fd.get<int>()] = of;
  }
  for (const auto& fj : j["files"]) {
    auto f = std::make_shared<FileState>();
    f->ino = fj.value("ino", uint64_t{0});
    f->name = fj.value("name", "");
    f->kfs_size = fj.value("kfs_size", uint64_t{0});
    f->local_size = fj.value("local_size", uint64_t{0});
    f->generation = fj.value("generation", uint64_t{0});
    f->staging_affinity = fj.value("staging_affinity", -1);
    for (const auto& sj : fj["staged"]) {
      StagedSeg seg;
      seg.len = sj.value("len", uint64_t{0});
      seg.staging_index = sj.value("staging_index", 0u);
      seg.staging_off = sj.value("staging_off", uint64_t{0});
      seg.strict_overwrite = sj.value("strict_overwrite", false);
      f->staged[sj.value("off", uint64_t{0})] = seg;
    }
    us->files_[f->ino] = f;
  }
  for (const auto& pj : j["pool"]) {
    StagingFile sf;
    sf.ino = pj.value("ino", uint64_t{0});
    sf.index = pj.value("index", 0u);
    sf.capacity = pj.value("capacity", uint64_t{0});
    sf.cursor = pj.value("cursor", uint64_t{0});
    for (const auto& sj : pj["segments"]) {
      sf.segments.push_back(Segment{sj.value("addr", uint64_t{0}), sj.value("len", uint64_t{0})});
    }
    us->pool_.push_back(std::move(sf));
  }
  us->log_ino_ = j["log"].value("ino", uint64_t{0});
  us->log_tail_.store(j["log"].value("tail", uint64_t{1}), std::memory_order_relaxed);
  for (const auto& sj : j["log"]["segments"]) {
    us->log_segments_.push_back(
        Segment{sj.value("addr", uint64_t{0}), sj.value("len", uint64_t{0})});
  }
  return us;
}

}  // namespace pmsplit
