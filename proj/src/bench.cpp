// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "json.hpp"
#include "pmsplit/kfs.hpp"
#include "pmsplit/script.hpp"
#include "pmsplit/shadow.hpp"

namespace pmsplit::bench {

namespace {

// Uniform surface the workloads drive; each engine maps it onto its own
// write/read/fsync machinery.
class EngineRt {
 public:
  virtual ~EngineRt() = default;
  virtual Result<int> open(std::string_view name) = 0;
  virtual Status pwrite(int fd, uint64_t off, std::span<const uint8_t> data) = 0;
  virtual Result<std::vector<uint8_t>> pread(int fd, uint64_t off, uint64_t len) = 0;
  virtual Status fsync(int fd) = 0;
  virtual Status close(int fd) = 0;
  virtual Status unlink(std::string_view name) = 0;
  virtual Status rename(std::string_view a, std::string_view b) = 0;
};

class SplitfsEngine : public EngineRt {
 public:
  SplitfsEngine(std::unique_ptr<Usplit> us) : us_(std::move(us)) {}

  Result<int> open(std::string_view name) override { return us_->open(name, true); }
  Status pwrite(int fd, uint64_t off, std::span<const uint8_t> data) override {
    auto n = us_->pwrite(fd, off, data);
    return n.is_ok() ? Status::ok() : n.status();
  }
  Result<std::vector<uint8_t>> pread(int fd, uint64_t off, uint64_t len) override {
    return us_->pread(fd, off, len);
  }
  Status fsync(int fd) override { return us_->fsync(fd); }
  Status close(int fd) override { return us_->close(fd); }
  Status unlink(std::string_view name) override { return us_->unlink(name); }
  Status rename(std::string_view a, std::string_view b) override { return us_->rename(a, b); }

 private:
  std::unique_ptr<Usplit> us_;
};

// Every call traps into the kernel-path file system, ext4-DAX style.
class DaxEngine : public EngineRt {
 public:
  explicit DaxEngine(Kfs& kfs) : kfs_(&kfs) {}

  Result<int> open(std::string_view name) override {
    auto ino = kfs_->lookup(name);
    if (!ino.is_ok()) {
      if (ino.status().code() != Errc::kNotFound) return ino.status();
      ino = kfs_->create(name);
      if (!ino.is_ok()) return ino.status();
    }
    const int fd = next_fd_++;
    inos_[fd] = ino.value();
    return fd;
  }
  Status pwrite(int fd, uint64_t off, std::span<const uint8_t> data) override {
    auto it = inos_.find(fd);
    if (it == inos_.end()) return Status::invalid_argument("bad fd");
    // Attribute check plus data path, both through the kernel side.
    auto st = kfs_->stat(it->second);
    if (!st.is_ok()) return st.status();
    auto n = kfs_->write_direct(it->second, off, data);
    return n.is_ok() ? Status::ok() : n.status();
  }
  Result<std::vector<uint8_t>> pread(int fd, uint64_t off, uint64_t len) override {
    auto it = inos_.find(fd);
    if (it == inos_.end()) return Status::invalid_argument("bad fd");
    return kfs_->read_direct(it->second, off, len);
  }
  Status fsync(int fd) override {
    auto it = inos_.find(fd);
    if (it == inos_.end()) return Status::invalid_argument("bad fd");
    return kfs_->fsync_meta(it->second);
  }
  Status close(int fd) override {
    inos_.erase(fd);
    return Status::ok();
  }
  Status unlink(std::string_view name) override { return kfs_->unlink(name); }
  Status rename(std::string_view a, std::string_view b) override { return kfs_->rename(a, b); }

 private:
  Kfs* kfs_;
  std::map<int, uint64_t> inos_;
  int next_fd_ = 0;
};

// Staging without relink: writes go to a private staging area synchronously,
// and fsync copies the staged bytes into the target through the kernel path.
// Data lands on the device twice.
class CopyOnFsyncEngine : public EngineRt {
 public:
  CopyOnFsyncEngine(PmemDevice& dev, Kfs& kfs) : dev_(&dev), kfs_(&kfs) {}

  Status setup(uint64_t staging_size) {
    staging_capacity_ = staging_size;
    auto ino = kfs_->create("#cof.stage");
    if (!ino.is_ok()) return ino.status();
    staging_ino_ = ino.value();
    if (Status st = kfs_->allocate(staging_ino_, 0, staging_size); !st.is_ok()) return st;
    auto segs = kfs_->map_extents(staging_ino_, 0, staging_size);
    if (!segs.is_ok()) return segs.status();
    segments_ = segs.take();
    return Status::ok();
  }

  Result<int> open(std::string_view name) override {
    auto ino = kfs_->lookup(name);
    if (!ino.is_ok()) {
      if (ino.status().code() != Errc::kNotFound) return ino.status();
      ino = kfs_->create(name);
      if (!ino.is_ok()) return ino.status();
    }
    const int fd = next_fd_++;
    FileRt& f = files_[fd];
    f.ino = ino.value();
    auto st = kfs_->stat(f.ino);
    if (!st.is_ok()) return st.status();
    f.size = st.value().size;
    return fd;
  }

  Status pwrite(int fd, uint64_t off, std::span<const uint8_t> data) override {
    auto it = files_.find(fd);
    if (it == files_.end()) return Status::invalid_argument("bad fd");
    FileRt& f = it->second;
    if (cursor_ + data.size() > staging_capacity_) {
      return Status::no_space("copy-on-fsync staging exhausted");
    }
    const uint64_t soff = cursor_;
    cursor_ += data.size();
    store_staging(soff, data);
    dev_->fence();
    f.staged[off] = Staged{data.size(), soff};
    f.size = std::max(f.size, off + data.size());
    return Status::ok();
  }

  Result<std::vector<uint8_t>> pread(int fd, uint64_t off, uint64_t len) override {
    auto it = files_.find(fd);
    if (it == files_.end()) return Status::invalid_argument("bad fd");
    FileRt& f = it->second;
    if (off >= f.size) return std::vector<uint8_t>{};
    len = std::min(len, f.size - off);
    auto base = kfs_->read_direct(f.ino, off, len);
    std::vector<uint8_t> out = base.is_ok() ? base.take() : std::vector<uint8_t>{};
    out.resize(len, 0);
    for (const auto& [toff, seg] : f.staged) {
      const uint64_t lo = std::max(off, toff);
      const uint64_t hi = std::min(off + len, toff + seg.len);
      if (lo >= hi) continue;
      load_staging(seg.staging_off + (lo - toff),
                   std::span<uint8_t>(out.data() + (lo - off), hi - lo));
    }
    return out;
  }

  Status fsync(int fd) override {
    auto it = files_.find(fd);
    if (it == files_.end()) return Status::invalid_argument("bad fd");
    FileRt& f = it->second;
    // Digest: coalesce adjacent staged ranges, then copy each run into the
    // shared area through the kernel path.
    uint64_t run_off = 0;
    std::vector<uint8_t> run;
    auto flush_run = [&]() -> Status {
      if (run.empty()) return Status::ok();
      auto n = kfs_->write_direct(f.ino, run_off, run);
      run.clear();
      return n.is_ok() ? Status::ok() : n.status();
    };
    for (const auto& [toff, seg] : f.staged) {
      if (run.empty() || run_off + run.size() != toff) {
        if (Status st = flush_run(); !st.is_ok()) return st;
        run_off = toff;
      }
      const size_t at = run.size();
      run.resize(at + seg.len);
      load_staging(seg.staging_off, std::span<uint8_t>(run.data() + at, seg.len));
    }
    if (Status st = flush_run(); !st.is_ok()) return st;
    f.staged.clear();
    return Status::ok();
  }

  Status close(int fd) override {
    files_.erase(fd);
    return Status::ok();
  }
  Status unlink(std::string_view name) override { return kfs_->unlink(name); }
  Status rename(std::string_view a, std::string_view b) override { return kfs_->rename(a, b); }

 private:
  struct Staged {
    uint64_t len = 0;
    uint64_t staging_off = 0;
  };
  struct FileRt {
    uint64_t ino = 0;
    uint64_t size = 0;
    std::map<uint64_t, Staged> staged;
  };

  void store_staging(uint64_t off, std::span<const uint8_t> data) {
    uint64_t done = 0;
    for (const Segment& s : segments_) {
      if (done == data.size()) break;
      if (off >= s.length) {
        off -= s.length;
        continue;
      }
      const uint64_t n = std::min(s.length - off, data.size() - done);
      dev_->store_nt(s.device_addr + off, data.subspan(done, n));
      done += n;
      off = 0;
    }
  }
  void load_staging(uint64_t off, std::span<uint8_t> out) {
    uint64_t done = 0;
    for (const Segment& s : segments_) {
      if (done == out.size()) break;
      if (off >= s.length) {
        off -= s.length;
        continue;
      }
      const uint64_t n = std::min(s.length - off, out.size() - done);
      dev_->load(s.device_addr + off, out.subspan(done, n));
      done += n;
      off = 0;
    }
  }

  PmemDevice* dev_;
  Kfs* kfs_;
  uint64_t staging_ino_ = 0;
  uint64_t staging_capacity_ = 0;
  uint64_t cursor_ = 0;
  std::vector<Segment> segments_;
  std::map<int, FileRt> files_;
  int next_fd_ = 0;
};

struct WorkloadTotals {
  uint64_t ops = 0;
  uint64_t logical_bytes = 0;
};

Result<WorkloadTotals> run_script_workload(EngineRt& rt, const std::string& text) {
  auto ops = parse_script(text);
  if (!ops.is_ok()) return ops.status();
  WorkloadTotals totals;
  std::vector<std::pair<int, uint64_t>> fds;  // engine fd, cursor
  std::vector<std::string> names;
  for (const ScriptOp& op : ops.value()) {
    switch (op.kind) {
      case ScriptOp::Kind::kOpen: {
        auto fd = rt.open(op.name);
        if (!fd.is_ok()) return fd.status();
        fds.emplace_back(fd.value(), 0);
        names.push_back(op.name);
        break;
      }
      case ScriptOp::Kind::kWrite: {
        if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds.size()) {
          return Status::invalid_argument("script fd out of range");
        }
        auto& [fd, cursor] = fds[static_cast<size_t>(op.fd)];
        const uint64_t off = op.at_cursor ? cursor : op.off;
        auto data = make_payload(op.seed, off, op.len);
        if (Status st = rt.pwrite(fd, off, data); !st.is_ok()) return st;
        if (op.at_cursor) cursor = off + op.len;
        totals.logical_bytes += op.len;
        break;
      }
      case ScriptOp::Kind::kRead: {
        if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds.size()) {
          return Status::invalid_argument("script fd out of range");
        }
        auto& [fd, cursor] = fds[static_cast<size_t>(op.fd)];
        const uint64_t off = op.at_cursor ? cursor : op.off;
        auto got = rt.pread(fd, off, op.len);
        if (!got.is_ok()) return got.status();
        if (op.at_cursor) cursor = off + got.value().size();
        break;
      }
      case ScriptOp::Kind::kFsync: {
        if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds.size()) {
          return Status::invalid_argument("script fd out of range");
        }
        if (Status st = rt.fsync(fds[static_cast<size_t>(op.fd)].first); !st.is_ok()) return st;
        break;
      }
      case ScriptOp::Kind::kClose: {
        if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds.size()) {
          return Status::invalid_argument("script fd out of range");
        }
        if (Status st = rt.close(fds[static_cast<size_t>(op.fd)].first); !st.is_ok()) return st;
        break;
      }
      case ScriptOp::Kind::kUnlink:
        if (Status st = rt.unlink(op.name); !st.is_ok()) return st;
        break;
      case ScriptOp::Kind::kRename:
        if (Status st = rt.rename(op.name, op.name2); !st.is_ok()) return st;
        break;
      case ScriptOp::Kind::kMark:
        break;
    }
    totals.ops += 1;
  }
  return totals;
}

}  // namespace

Result<Engine> engine_from_name(std::string_view name) {
  if (name == "splitfs-posix") return Engine::kSplitfsPosix;
  if (name == "splitfs-sync") return Engine::kSplitfsSync;
  if (name == "splitfs-strict") return Engine::kSplitfsStrict;
  if (name == "dax-baseline") return Engine::kDaxBaseline;
  if (name == "copy-on-fsync") return Engine::kCopyOnFsync;
  return Status::invalid_argument("unknown engine '" + std::string(name) + "'");
}

std::string_view engine_name(Engine engine) {
  switch (engine) {
    case Engine::kSplitfsPosix: return "splitfs-posix";
    case Engine::kSplitfsSync: return "splitfs-sync";
    case Engine::kSplitfsStrict: return "splitfs-strict";
    case Engine::kDaxBaseline: return "dax-baseline";
    case Engine::kCopyOnFsync: return "copy-on-fsync";
  }
  return "?";
}

Result<Workload> workload_from_name(std::string_view name) {
  if (name == "seq_read") return Workload::kSeqRead;
  if (name == "rand_read") return Workload::kRandRead;
  if (name == "seq_write") return Workload::kSeqWrite;
  if (name == "rand_write") return Workload::kRandWrite;
  if (name == "append") return Workload::kAppend;
  if (name == "append_fsync10") return Workload::kAppendFsync10;
  if (name == "varmail_micro") return Workload::kVarmailMicro;
  if (name.rfind("script", 0) == 0) return Workload::kScript;
  return Status::invalid_argument("unknown workload '" + std::string(name) + "'");
}

std::string_view workload_name(Workload workload) {
  switch (workload) {
    case Workload::kSeqRead: return "seq_read";
    case Workload::kRandRead: return "rand_read";
    case Workload::kSeqWrite: return "seq_write";
    case Workload::kRandWrite: return "rand_write";
    case Workload::kAppend: return "append";
    case Workload::kAppendFsync10: return "append_fsync10";
    case Workload::kVarmailMicro: return "varmail_micro";
    case Workload::kScript: return "script";
  }
  return "?";
}

uint64_t device_size_from_env_or(uint64_t fallback) {
  const char* env = std::getenv("PMSPLIT_DEVICE_SIZE");
  if (env == nullptr || *env == '\0') return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 0);
  if (end == env || v < 8ull * 1024 * 1024) return fallback;
  return static_cast<uint64_t>(v) / kPage * kPage;
}

Result<BenchResult> run(const BenchConfig& config) {
  const uint64_t iterations =
      config.iterations != 0 ? config.iterations : std::max<uint64_t>(1, config.file_size / std::max<uint64_t>(1, config.op_size));
  // The copy-on-fsync baseline stores the working set twice.
  const uint64_t derived_size = std::max<uint64_t>(128ull * 1024 * 1024, 4 * config.file_size);
  const uint64_t device_size =
      config.device_size != 0 ? config.device_size : device_size_from_env_or(derived_size);

  PmemDevice dev(device_size, /*tracing=*/false);
  Geometry geo = Geometry::for_capacity(device_size);
  if (Status st = Kfs::mkfs(dev, geo); !st.is_ok()) return st;
  auto kfs_r = Kfs::mount(dev);
  if (!kfs_r.is_ok()) return kfs_r.status();
  Kfs kfs = kfs_r.take();

  // Warm start: staging pools and logs exist before the timer runs.
  std::unique_ptr<EngineRt> rt;
  switch (config.engine) {
    case Engine::kSplitfsPosix:
    case Engine::kSplitfsSync:
    case Engine::kSplitfsStrict: {
      const Mode mode = config.engine == Engine::kSplitfsPosix  ? Mode::kPosix
                        : config.engine == Engine::kSplitfsSync ? Mode::kSync
                                                                : Mode::kStrict;
      // Staging consumption is monotonic, so the pool must cover the whole
      // working set; scale it to the file size but keep it within the device.
      UsplitConfig uc;
      // Prefilled workloads stage the working set twice in strict mode.
      const uint64_t staging_budget =
          std::min(device_size / 2, std::max<uint64_t>(2 * config.file_size + config.file_size / 2,
                                                       2ull * 1024 * 1024));
      uc.staging_count = 10;
      uc.staging_size =
          std::max<uint64_t>(kPage * 16, (staging_budget / uc.staging_count) / kPage * kPage);
      const uint64_t log_need = (3 * iterations + 128) * LogEntry::kBytes;
      uc.log_size = std::clamp<uint64_t>((log_need + kPage - 1) / kPage * kPage, 64 * kPage,
                                         std::max<uint64_t>(64 * kPage, device_size / 8));
      auto us = Usplit::init(dev, kfs, mode, uc);
      if (!us.is_ok()) return us.status();
      rt = std::make_unique<SplitfsEngine>(us.take());
      break;
    }
    case Engine::kDaxBaseline:
      rt = std::make_unique<DaxEngine>(kfs);
      break;
    case Engine::kCopyOnFsync: {
      auto cof = std::make_unique<CopyOnFsyncEngine>(dev, kfs);
      if (Status st = cof->setup(config.file_size + 16 * kPage); !st.is_ok()) return st;
      rt = std::move(cof);
      break;
    }
  }

  // Prepare phase (untimed): reads and overwrites need a populated file.
  const bool needs_prefill = config.workload == Workload::kSeqRead ||
                             config.workload == Workload::kRandRead ||
                             config.workload == Workload::kSeqWrite ||
                             config.workload == Workload::kRandWrite;
  int fd = -1;
  if (config.workload != Workload::kScript && config.workload != Workload::kVarmailMicro) {
    auto fd_r = rt->open("bench.dat");
    if (!fd_r.is_ok()) return fd_r.status();
    fd = fd_r.value();
  }
  if (needs_prefill) {
    std::vector<uint8_t> block(config.op_size);
    for (uint64_t off = 0; off < config.file_size; off += config.op_size) {
      fill_payload(config.seed ^ 0x5eedu, off, block);
      if (Status st = rt->pwrite(fd, off, block); !st.is_ok()) return st;
    }
    if (Status st = rt->fsync(fd); !st.is_ok()) return st;
  }

  const uint64_t kfs_calls_before = kfs.call_count();
  dev.reset_counters("bench-start");
  std::mt19937_64 rng(config.seed);
  const uint64_t blocks = std::max<uint64_t>(1, config.file_size / config.op_size);

  WorkloadTotals totals;
  const auto t0 = std::chrono::steady_clock::now();
  switch (config.workload) {
    case Workload::kSeqRead:
    case Workload::kRandRead: {
      for (uint64_t i = 0; i < iterations; ++i) {
        const uint64_t off = config.workload == Workload::kSeqRead
                                 ? (i % blocks) * config.op_size
                                 : (rng() % blocks) * config.op_size;
        auto got = rt->pread(fd, off, config.op_size);
        if (!got.is_ok()) return got.status();
        totals.ops += 1;
      }
      break;
    }
    case Workload::kSeqWrite:
    case Workload::kRandWrite: {
      std::vector<uint8_t> block(config.op_size);
      for (uint64_t i = 0; i < iterations; ++i) {
        const uint64_t off = config.workload == Workload::kSeqWrite
                                 ? (i % blocks) * config.op_size
                                 : (rng() % blocks) * config.op_size;
        fill_payload(config.seed + i, off, block);
        if (Status st = rt->pwrite(fd, off, block); !st.is_ok()) return st;
        totals.ops += 1;
        totals.logical_bytes += block.size();
      }
      break;
    }
    case Workload::kAppend:
    case Workload::kAppendFsync10: {
      std::vector<uint8_t> block(config.op_size);
      uint64_t off = 0;
      for (uint64_t i = 0; i < iterations; ++i) {
        fill_payload(config.seed + i, off, block);
        if (Status st = rt->pwrite(fd, off, block); !st.is_ok()) return st;
        off += block.size();
        totals.ops += 1;
        totals.logical_bytes += block.size();
        if (config.workload == Workload::kAppendFsync10 && (i + 1) % 10 == 0) {
          if (Status st = rt->fsync(fd); !st.is_ok()) return st;
        }
      }
      if (Status st = rt->fsync(fd); !st.is_ok()) return st;
      break;
    }
    case Workload::kVarmailMicro: {
      // Per iteration: create and append 16K as four fsync'ed 4K appends,
      // then reopen, read it back whole, open/close once more, delete.
      std::vector<uint8_t> block(4096);
      for (uint64_t i = 0; i < std::max<uint64_t>(1, iterations); ++i) {
        const std::string name = "mail." + std::to_string(i % 64);
        auto f = rt->open(name);
        if (!f.is_ok()) return f.status();
        for (int a = 0; a < 4; ++a) {
          fill_payload(config.seed + i, a * block.size(), block);
          if (Status st = rt->pwrite(f.value(), a * block.size(), block); !st.is_ok()) return st;
          if (Status st = rt->fsync(f.value()); !st.is_ok()) return st;
          totals.logical_bytes += block.size();
        }
        if (Status st = rt->close(f.value()); !st.is_ok()) return st;
        f = rt->open(name);
        if (!f.is_ok()) return f.status();
        auto got = rt->pread(f.value(), 0, 4 * block.size());
        if (!got.is_ok()) return got.status();
        if (Status st = rt->close(f.value()); !st.is_ok()) return st;
        f = rt->open(name);
        if (!f.is_ok()) return f.status();
        if (Status st = rt->close(f.value()); !st.is_ok()) return st;
        if (Status st = rt->unlink(name); !st.is_ok()) return st;
        totals.ops += 1;
      }
      break;
    }
    case Workload::kScript: {
      auto r = run_script_workload(*rt, config.script_text);
      if (!r.is_ok()) return r.status();
      totals = r.value();
      break;
    }
  }
  const auto t1 = std::chrono::steady_clock::now();

  BenchResult result;
  result.engine = std::string(engine_name(config.engine));
  result.workload = std::string(workload_name(config.workload));
  result.ops = totals.ops;
  result.logical_bytes = totals.logical_bytes;
  result.counters = dev.counters();
  result.kfs_calls = kfs.call_count() - kfs_calls_before;
  result.log_entries = result.counters.log_entries_written;
  result.elapsed_sec = std::chrono::duration<double>(t1 - t0).count() +
                       result.counters.bytes_persisted * config.ns_per_persisted_byte * 1e-9;
  result.ops_per_sec = result.elapsed_sec > 0 ? static_cast<double>(result.ops) / result.elapsed_sec : 0;
  result.write_amplification =
      result.logical_bytes > 0
          ? static_cast<double>(result.counters.bytes_persisted) / static_cast<double>(result.logical_bytes)
          : 0;
  result.fences_per_op =
      result.ops > 0 ? static_cast<double>(result.counters.fence_count) / static_cast<double>(result.ops) : 0;
  return result;
}

std::string compare_table(std::span<const BenchResult> results) {
  std::ostringstream out;
  out << "engine              workload         ops/s        norm    WA      fences/op  kfs-calls\n";
  const double base = results.empty() || results[0].ops_per_sec == 0 ? 1 : results[0].ops_per_sec;
  char line[160];
  for (const BenchResult& r : results) {
    std::snprintf(line, sizeof line, "%-19s %-16s %-12.0f %-7.2f %-7.3f %-10.2f %llu\n",
                  r.engine.c_str(), r.workload.c_str(), r.ops_per_sec, r.ops_per_sec / base,
                  r.write_amplification, r.fences_per_op,
                  static_cast<unsigned long long>(r.kfs_calls));
    out << line;
  }
  return out.str();
}

namespace {

nlohmann::json result_to_json(const BenchResult& r) {
  return {
      {"engine", r.engine},
      {"workload", r.workload},
      {"ops", r.ops},
      {"logical_bytes", r.logical_bytes},
      {"elapsed_sec", r.elapsed_sec},
      {"ops_per_sec", r.ops_per_sec},
      {"write_amplification", r.write_amplification},
      {"fences_per_op", r.fences_per_op},
      {"kfs_calls", r.kfs_calls},
      {"log_entries", r.log_entries},
      {"counters",
       {{"bytes_stored", r.counters.bytes_stored},
        {"bytes_stored_nt", r.counters.bytes_stored_nt},
        {"flush_count", r.counters.flush_count},
        {"fence_count", r.counters.fence_count},
        {"bytes_persisted", r.counters.bytes_persisted},
        {"journal_commit_count", r.counters.journal_commit_count},
        {"log_entries_written", r.counters.log_entries_written},
        {"relink_data_bytes_copied", r.counters.relink_data_bytes_copied}}},
  };
}

}  // namespace

std::string results_to_json(std::span<const BenchResult> results) {
  nlohmann::json arr = nlohmann::json::array();
  for (const BenchResult& r : results) arr.push_back(result_to_json(r));
  return arr.dump(2);
}

std::string results_to_csv(std::span<const BenchResult> results) {
  std::ostringstream out;
  out << "engine,workload,ops,logical_bytes,elapsed_sec,ops_per_sec,write_amplification,"
         "fences_per_op,kfs_calls,log_entries,bytes_stored,bytes_stored_nt,flush_count,"
         "fence_count,bytes_persisted,journal_commit_count,log_entries_written,"
         "relink_data_bytes_copied\n";
  for (const BenchResult& r : results) {
    out << r.engine << ',' << r.workload << ',' << r.ops << ',' << r.logical_bytes << ','
        << r.elapsed_sec << ',' << r.ops_per_sec << ',' << r.write_amplification << ','
        << r.fences_per_op << ',' << r.kfs_calls << ',' << r.log_entries << ','
        << r.counters.bytes_stored << ',' << r.counters.bytes_stored_nt << ','
        << r.counters.flush_count << ',' << r.counters.fence_count << ','
        << r.counters.bytes_persisted << ',' << r.counters.journal_commit_count << ','
        << r.counters.log_entries_written << ',' << r.counters.relink_data_bytes_copied << '\n';
  }
  return out.str();
}

}  // namespace pmsplit::bench
