// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/pmem.hpp"

#include <algorithm>
#include <cstring>
#include <ostream>
#include <stdexcept>

namespace pmsplit {

namespace {
uint64_t line_of(uint64_t addr) { return addr & ~(kCacheLine - 1); }
}  // namespace

PmemDevice::PmemDevice(uint64_t capacity, bool tracing)
    : capacity_(capacity),
      volatile_image_(capacity, 0),
      persistent_image_(capacity, 0),
      tracing_(tracing) {
  if (capacity == 0 || capacity % kPage != 0) {
    throw std::invalid_argument("pmem capacity must be a nonzero multiple of 4096");
  }
}

PmemDevice PmemDevice::from_image(std::vector<uint8_t> image, bool tracing) {
  PmemDevice dev(image.size(), tracing);
  dev.volatile_image_ = image;
  dev.persistent_image_ = std::move(image);
  return dev;
}

void PmemDevice::check_range(uint64_t addr, uint64_t len) const {
  if (addr > capacity_ || len > capacity_ - addr) {
    throw std::out_of_range("pmem access beyond device capacity");
  }
}

void PmemDevice::record_store(uint64_t addr, std::span<const uint8_t> data, bool non_temporal) {
  check_range(addr, data.size());
  if (data.empty()) return;

  std::memcpy(volatile_image_.data() + addr, data.data(), data.size());

  // Split into granules that never straddle an 8-byte-aligned boundary;
  // consecutive aligned granules in one line coalesce into a run.
  uint64_t off = 0;
  while (off < data.size()) {
    const uint64_t a = addr + off;
    const uint64_t room = kGranule - (a % kGranule);
    const uint8_t n = static_cast<uint8_t>(std::min<uint64_t>(room, data.size() - off));

    std::vector<PendingWrite>& line = dirty_lines_[line_of(a)];
    const bool aligned_full = a % kGranule == 0 && n == kGranule;
    bool merged = false;
    if (aligned_full && !line.empty()) {
      PendingWrite& back = line.back();
      if (!back.flushed && back.non_temporal == non_temporal && back.addr % kGranule == 0 &&
          back.len % kGranule == 0 && back.addr + back.len == a &&
          back.len + kGranule <= kCacheLine) {
        std::memcpy(back.data.data() + back.len, data.data() + off, n);
        back.len = static_cast<uint8_t>(back.len + n);
        merged = true;
      }
    }
    if (!merged) {
      PendingWrite w;
      w.addr = a;
      w.len = n;
      w.non_temporal = non_temporal;
      std::memcpy(w.data.data(), data.data() + off, n);
      line.push_back(w);
    }

    if (tracing_) {
      TraceEvent ev;
      ev.seq = next_seq_++;
      ev.addr = a;
      ev.kind = non_temporal ? TraceEvent::Kind::kStoreNt : TraceEvent::Kind::kStore;
      ev.len = n;
      std::memcpy(ev.data.data(), data.data() + off, n);
      trace_.push_back(ev);
    } else {
      ++next_seq_;
    }
    off += n;
  }

  if (non_temporal) {
    counters_.bytes_stored_nt += data.size();
  } else {
    counters_.bytes_stored += data.size();
  }
}

void PmemDevice::store(uint64_t addr, std::span<const uint8_t> data) {
  record_store(addr, data, /*non_temporal=*/false);
}

void PmemDevice::store_nt(uint64_t addr, std::span<const uint8_t> data) {
  record_store(addr, data, /*non_temporal=*/true);
}

void PmemDevice::store_nt_fill(uint64_t addr, uint8_t value, uint64_t len) {
  check_range(addr, len);
  std::array<uint8_t, 4096> chunk;
  chunk.fill(value);
  while (len > 0) {
    const uint64_t n = std::min<uint64_t>(len, chunk.size());
    store_nt(addr, std::span<const uint8_t>(chunk.data(), n));
    addr += n;
    len -= n;
  }
}

void PmemDevice::flush(uint64_t addr, uint64_t len) {
  check_range(addr, len);
  if (len == 0) return;
  const uint64_t first = line_of(addr);
  const uint64_t last = line_of(addr + len - 1);
  for (uint64_t line = first; line <= last; line += kCacheLine) {
    auto it = dirty_lines_.find(line);
    if (it != dirty_lines_.end()) {
      for (PendingWrite& w : it->second) w.flushed = true;
    }
    counters_.flush_count += 1;
    if (tracing_) {
      TraceEvent ev;
      ev.seq = next_seq_++;
      ev.addr = line;
      ev.kind = TraceEvent::Kind::kFlush;
      trace_.push_back(ev);
    } else {
      ++next_seq_;
    }
  }
}

void PmemDevice::fence() {
  for (auto it = dirty_lines_.begin(); it != dirty_lines_.end();) {
    std::vector<PendingWrite>& writes = it->second;
    // Commit the prefix up to the last flushed/non-temporal run (flags are
    // uniform within a run, so this is the last flagged granule).
    size_t commit = 0;
    for (size_t i = 0; i < writes.size(); ++i) {
      if (writes[i].flushed || writes[i].non_temporal) commit = i + 1;
    }
    for (size_t i = 0; i < commit; ++i) {
      const PendingWrite& w = writes[i];
      std::memcpy(persistent_image_.data() + w.addr, w.data.data(), w.len);
      counters_.bytes_persisted += w.len;
    }
    if (commit == writes.size()) {
      it = dirty_lines_.erase(it);
    } else {
      writes.erase(writes.begin(), writes.begin() + static_cast<ptrdiff_t>(commit));
      ++it;
    }
  }
  counters_.fence_count += 1;
  if (tracing_) {
    TraceEvent ev;
    ev.seq = next_seq_++;
    ev.kind = TraceEvent::Kind::kFence;
    trace_.push_back(ev);
  } else {
    ++next_seq_;
  }
}

void PmemDevice::load(uint64_t addr, std::span<uint8_t> out) const {
  check_range(addr, out.size());
  std::memcpy(out.data(), volatile_image_.data() + addr, out.size());
}

std::vector<uint8_t> PmemDevice::load(uint64_t addr, uint64_t len) const {
  check_range(addr, len);
  return {volatile_image_.begin() + static_cast<ptrdiff_t>(addr),
          volatile_image_.begin() + static_cast<ptrdiff_t>(addr + len)};
}

std::vector<uint8_t> PmemDevice::snapshot(ImageKind kind) const {
  return kind == ImageKind::kVolatile ? volatile_image_ : persistent_image_;
}

std::span<const uint8_t> PmemDevice::image(ImageKind kind) const {
  return kind == ImageKind::kVolatile ? std::span<const uint8_t>(volatile_image_)
                                      : std::span<const uint8_t>(persistent_image_);
}

std::vector<uint8_t> PmemDevice::crash_image(const std::map<uint64_t, size_t>& line_prefix) const {
  std::vector<uint8_t> img = persistent_image_;
  for (const auto& [line, count] : line_prefix) {
    auto it = dirty_lines_.find(line);
    if (it == dirty_lines_.end()) continue;
    size_t left = count;  // granules still to apply
    for (const PendingWrite& w : it->second) {
      if (left == 0) break;
      const size_t g = w.granules();
      if (left >= g) {
        std::memcpy(img.data() + w.addr, w.data.data(), w.len);
        left -= g;
      } else {
        // Partial run: runs with several granules are 8-aligned throughout.
        std::memcpy(img.data() + w.addr, w.data.data(), left * kGranule);
        left = 0;
      }
    }
  }
  return img;
}

std::map<uint64_t, size_t> PmemDevice::pending_line_counts() const {
  std::map<uint64_t, size_t> out;
  for (const auto& [line, writes] : dirty_lines_) {
    size_t granules = 0;
    for (const PendingWrite& w : writes) granules += w.granules();
    if (granules > 0) out[line] = granules;
  }
  return out;
}

void PmemDevice::reset_counters(std::string_view checkpoint_label) {
  counters_ = IoCounters{};
  counter_checkpoint_ = std::string(checkpoint_label);
}

void PmemDevice::reset_trace() { trace_.clear(); }

void PmemDevice::dump_trace(std::ostream& out) const {
  static const char hex[] = "0123456789abcdef";
  for (const TraceEvent& ev : trace_) {
    switch (ev.kind) {
      case TraceEvent::Kind::kStore:
      case TraceEvent::Kind::kStoreNt: {
        out << (ev.kind == TraceEvent::Kind::kStore ? 'S' : 'N') << ' ' << ev.addr << ' '
            << static_cast<unsigned>(ev.len) << ' ';
        for (unsigned i = 0; i < ev.len; ++i) {
          out << hex[ev.data[i] >> 4] << hex[ev.data[i] & 0xF];
        }
        out << '\n';
        break;
      }
      case TraceEvent::Kind::kFlush:
        out << "F " << ev.addr << '\n';
        break;
      case TraceEvent::Kind::kFence:
        out << "M\n";
        break;
    }
  }
}

}  // namespace pmsplit
