// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmsplit/faults.hpp"
#include "pmsplit/script.hpp"
#include "pmsplit/shadow.hpp"
#include "pmsplit/status.hpp"
#include "pmsplit/usplit.hpp"

namespace pmsplit::crash {

// Which persistence model generates crash states.
//   kStrictEpoch: one deterministic state per fence boundary.
//   kAdversarial: a crash at any trace point may additionally persist any
//   per-cache-line prefix of the pending granule writes.
enum class Policy { kStrictEpoch, kAdversarial };

Result<Policy> policy_from_name(std::string_view name);
std::string_view policy_name(Policy policy);

struct CrashPlan {
  size_t trace_prefix = 0;                   // events applied before the crash
  std::map<uint64_t, size_t> line_prefix;    // line addr -> pending granules persisted

  bool operator==(const CrashPlan&) const = default;
};

// Golden timeline from the recorded run: shadow state and durable sizes after
// every op, plus the trace range each op produced.
struct Timeline {
  struct OpRecord {
    ScriptOp op;
    size_t trace_begin = 0;
    size_t trace_end = 0;
    ShadowFs after;
    // Resolved touch info for writes/fsyncs (absolute offsets).
    std::string touched;
    uint64_t off = 0;
    uint64_t len = 0;
    bool is_append = false;
  };
  ShadowFs initial;
  std::vector<OpRecord> ops;
};

struct RecordedRun {
  std::vector<uint8_t> base_image;  // post-mkfs snapshot
  std::vector<TraceEvent> trace;
  Timeline timeline;
};

struct Violation {
  CrashPlan plan;
  std::string guarantee;  // which promise broke
  std::string detail;     // diff summary
};

struct Report {
  uint64_t states_checked = 0;
  std::vector<Violation> violations;
  uint64_t entries_replayed = 0;  // total over all checked states
  double check_seconds = 0;
};

struct CheckConfig {
  Mode mode = Mode::kPosix;
  Policy policy = Policy::kAdversarial;
  uint64_t budget = 5000;
  uint64_t seed = 1;
  // Compact fs configuration: scripts are at most a few dozen small ops, and
  // every byte of device image is copied once per crash state.
  uint64_t device_size = 2ull * 1024 * 1024;
  UsplitConfig us_config{/*map_size=*/2ull * 1024 * 1024, /*staging_count=*/4,
                         /*staging_size=*/128 * 1024, /*log_size=*/16 * 1024};
  const FaultInjection* faults = nullptr;  // injected into the recorded run only
  size_t max_violations = 16;              // report at most this many
};

// Runs the script through a fresh file system, recording the base snapshot,
// the full persistence trace, and per-op golden states.
Result<RecordedRun> run_recorded(std::span<const ScriptOp> ops, const CheckConfig& config);

// Crash-state enumeration under the chosen policy; deterministic for a given
// seed and budget.
std::vector<CrashPlan> enumerate(std::span<const TraceEvent> trace, Policy policy,
                                 uint64_t budget, uint64_t seed);

// Independent trace interpreter: applies `plan` to the base image. This is
// the oracle implementation; it shares no code with PmemDevice's incremental
// persistence tracking.
std::vector<uint8_t> materialize(std::span<const uint8_t> base_image,
                                 std::span<const TraceEvent> trace, const CrashPlan& plan);

// The same computation through PmemDevice itself (replay + crash_image), for
// cross-checking the two implementations against each other.
std::vector<uint8_t> materialize_via_device(std::span<const uint8_t> base_image,
                                            std::span<const TraceEvent> trace,
                                            const CrashPlan& plan);

// Mounts and recovers the image, then checks structural invariants and the
// mode's guarantees against the golden timeline. nullopt means the state is
// acceptable. Takes the image by value: recovery mutates a private copy.
std::optional<Violation> check(std::vector<uint8_t> image, Mode mode, const Timeline& timeline,
                               const CrashPlan& plan, uint64_t* entries_replayed = nullptr);

// The whole loop: record, enumerate, materialize, recover, check.
Report run_crashcheck(std::span<const ScriptOp> ops, const CheckConfig& config);

std::string report_to_json(const Report& report);
std::string plan_to_json(const CrashPlan& plan);
Result<CrashPlan> plan_from_json(std::string_view text);

}  // namespace pmsplit::crash
