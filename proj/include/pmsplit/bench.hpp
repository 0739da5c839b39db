// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmsplit/pmem.hpp"
#include "pmsplit/status.hpp"
#include "pmsplit/usplit.hpp"

namespace pmsplit::bench {

// splitfs-* engines run the library file system in one of its three modes;
// dax-baseline issues every operation through the kernel-path write/read
// calls; copy-on-fsync stages writes like splitfs but copies them into the
// target on fsync instead of relinking.
enum class Engine {
  kSplitfsPosix,
  kSplitfsSync,
  kSplitfsStrict,
  kDaxBaseline,
  kCopyOnFsync,
};

enum class Workload {
  kSeqRead,
  kRandRead,
  kSeqWrite,
  kRandWrite,
  kAppend,
  kAppendFsync10,  // an fsync every ten operations
  kVarmailMicro,   // create, 4x(4K append + fsync), close/open/read/close/open/close, unlink
  kScript,
};

Result<Engine> engine_from_name(std::string_view name);
std::string_view engine_name(Engine engine);
Result<Workload> workload_from_name(std::string_view name);
std::string_view workload_name(Workload workload);

struct BenchConfig {
  Engine engine = Engine::kSplitfsPosix;
  Workload workload = Workload::kAppend;
  std::string script_text;  // Workload::kScript
  uint64_t file_size = 32ull * 1024 * 1024;
  uint64_t op_size = 4096;
  uint64_t iterations = 0;  // 0: derived from file_size / op_size
  uint64_t seed = 1;
  uint64_t device_size = 0;  // 0: PMSPLIT_DEVICE_SIZE env or a derived default
  // Optional fixed latency charged per persisted byte; reporting only.
  double ns_per_persisted_byte = 0;
};

struct BenchResult {
  std::string engine;
  std::string workload;
  uint64_t ops = 0;
  uint64_t logical_bytes = 0;  // payload bytes the workload wrote
  double elapsed_sec = 0;
  double ops_per_sec = 0;
  IoCounters counters;  // delta over the timed section
  double write_amplification = 0;  // bytes_persisted / logical_bytes
  double fences_per_op = 0;
  uint64_t kfs_calls = 0;
  uint64_t log_entries = 0;
};

Result<BenchResult> run(const BenchConfig& config);

// Throughput table normalized to the first row.
std::string compare_table(std::span<const BenchResult> results);

std::string results_to_json(std::span<const BenchResult> results);
std::string results_to_csv(std::span<const BenchResult> results);

uint64_t device_size_from_env_or(uint64_t fallback);

}  // namespace pmsplit::bench
