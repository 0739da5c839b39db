// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "pmsplit/crashcheck.hpp"
#include "pmsplit/kfs.hpp"

using namespace pmsplit;
using namespace pmsplit::crash;

namespace {

std::vector<ScriptOp> script(const char* text) {
  auto ops = parse_script(text);
  REQUIRE(ops.is_ok());
  return ops.take();
}

CheckConfig small_config(Mode mode, Policy policy, uint64_t budget = 400) {
  CheckConfig config;
  config.mode = mode;
  config.policy = policy;
  config.budget = budget;
  config.seed = 11;
  return config;
}

}  // namespace

TEST_CASE("empty script yields one strict-epoch state and no violations") {
  auto report = run_crashcheck({}, small_config(Mode::kPosix, Policy::kStrictEpoch));
  CHECK(report.states_checked >= 1);
  CHECK(report.violations.empty());
}

TEST_CASE("five-op posix script survives exhaustive strict-epoch checking") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 4096 1\n"
      "fsync 0\n"
      "write 0 0 512 2\n"
      "close 0\n");
  auto report = run_crashcheck(ops, small_config(Mode::kPosix, Policy::kStrictEpoch));
  CHECK(report.states_checked > 5);
  for (const auto& v : report.violations) {
    CAPTURE(v.guarantee);
    CAPTURE(v.detail);
    CHECK(false);
  }
}

TEST_CASE("adversarial sampling finds no violations on a clean system") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 4096 1\n"
      "write 0 @cur 4096 2\n"
      "fsync 0\n"
      "open b\n"
      "write 1 @cur 300 3\n"
      "rename a c\n"
      "fsync 1\n"
      "unlink c\n");
  for (Mode mode : {Mode::kPosix, Mode::kSync, Mode::kStrict}) {
    CAPTURE(mode_name(mode));
    auto report = run_crashcheck(ops, small_config(mode, Policy::kAdversarial, 500));
    CHECK(report.states_checked == 500);
    for (const auto& v : report.violations) {
      CAPTURE(v.guarantee);
      CAPTURE(v.detail);
      CHECK(false);
    }
  }
}

TEST_CASE("the two crash-image computations agree on random plans") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 5000 1\n"
      "fsync 0\n"
      "write 0 1024 100 2\n");
  auto config = small_config(Mode::kStrict, Policy::kAdversarial);
  auto recorded = run_recorded(ops, config);
  REQUIRE(recorded.is_ok());
  const auto& run = recorded.value();
  const auto plans = enumerate(run.trace, Policy::kAdversarial, 300, 17);
  REQUIRE(!plans.empty());
  for (const CrashPlan& plan : plans) {
    const auto independent = materialize(run.base_image, run.trace, plan);
    const auto through_device = materialize_via_device(run.base_image, run.trace, plan);
    REQUIRE(independent == through_device);
  }
}

TEST_CASE("strict-epoch enumeration lands exactly on fence boundaries") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 64 1\n");
  auto config = small_config(Mode::kSync, Policy::kStrictEpoch);
  auto recorded = run_recorded(ops, config);
  REQUIRE(recorded.is_ok());
  const auto plans = enumerate(recorded.value().trace, Policy::kStrictEpoch, 0, 0);
  uint64_t fences = 0;
  for (const auto& ev : recorded.value().trace) {
    if (ev.kind == TraceEvent::Kind::kFence) ++fences;
  }
  CHECK(plans.size() == fences + 1);  // plus the empty prefix
  for (const auto& plan : plans) CHECK(plan.line_prefix.empty());
}

TEST_CASE("enumeration is deterministic for a fixed seed and budget") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 2000 5\n"
      "fsync 0\n");
  auto config = small_config(Mode::kPosix, Policy::kAdversarial);
  auto recorded = run_recorded(ops, config);
  REQUIRE(recorded.is_ok());
  const auto a = enumerate(recorded.value().trace, Policy::kAdversarial, 200, 5);
  const auto b = enumerate(recorded.value().trace, Policy::kAdversarial, 200, 5);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  const auto c = enumerate(recorded.value().trace, Policy::kAdversarial, 200, 6);
  CHECK(a != c);
}

TEST_CASE("tiny traces enumerate the adversarial space exhaustively") {
  // One 8-byte store leaves one line with one pending granule: states are
  // (prefix, none) and (prefix, first granule), over every prefix length.
  PmemDevice dev(4096);
  std::vector<uint8_t> data(8, 0xAA);
  dev.store(0, data);
  const auto trace = dev.trace();  // one store event
  const auto plans = enumerate(trace, Policy::kAdversarial, 1000, 1);
  // Prefix 0: one plan. Prefix 1: pending line gives two plans.
  CHECK(plans.size() == 3);
}

TEST_CASE("reports serialize with plans and violations round trip") {
  CrashPlan plan;
  plan.trace_prefix = 42;
  plan.line_prefix[128] = 3;
  auto parsed = plan_from_json(plan_to_json(plan));
  REQUIRE(parsed.is_ok());
  CHECK(parsed.value() == plan);

  Report report;
  report.states_checked = 10;
  report.violations.push_back(Violation{plan, "atomic-ops", "detail text"});
  const std::string json = report_to_json(report);
  CHECK(json.find("atomic-ops") != std::string::npos);
  CHECK(json.find("42") != std::string::npos);
}

TEST_CASE("determinism: identical configs give identical reports") {
  const auto ops = script(
      "open a\n"
      "write 0 @cur 4096 1\n"
      "fsync 0\n"
      "write 0 0 4096 2\n");
  auto config = small_config(Mode::kStrict, Policy::kAdversarial, 300);
  auto r1 = run_crashcheck(ops, config);
  auto r2 = run_crashcheck(ops, config);
  CHECK(r1.states_checked == r2.states_checked);
  CHECK(r1.violations.size() == r2.violations.size());
  CHECK(report_to_json(r1).find("violations") != std::string::npos);
}

TEST_CASE("injected faults are caught by the checker") {
  // The block-aligned overwrite matters: its relink replaces a destination
  // block, which is the de-allocation the third fault skips.
  const auto ops = script(
      "open a\n"
      "write 0 @cur 4096 1\n"
      "write 0 @cur 4096 2\n"
      "fsync 0\n"
      "write 0 0 4096 3\n"
      "fsync 0\n"
      "unlink a\n");

  SUBCASE("clean run has no violations") {
    auto config = small_config(Mode::kStrict, Policy::kAdversarial, 800);
    auto report = run_crashcheck(ops, config);
    CHECK(report.violations.empty());
  }

  SUBCASE("skip_journal_commit breaks metadata atomicity") {
    FaultInjection faults;
    faults.skip_journal_commit = true;
    auto config = small_config(Mode::kPosix, Policy::kAdversarial, 800);
    config.faults = &faults;
    auto report = run_crashcheck(ops, config);
    CHECK(!report.violations.empty());
  }

  SUBCASE("skip_log_fence breaks strict atomicity") {
    FaultInjection faults;
    faults.skip_log_fence = true;
    auto config = small_config(Mode::kStrict, Policy::kAdversarial, 2000);
    config.faults = &faults;
    auto report = run_crashcheck(ops, config);
    CHECK(!report.violations.empty());
  }

  SUBCASE("skip_relink_dealloc leaks blocks") {
    FaultInjection faults;
    faults.skip_relink_dealloc = true;
    auto config = small_config(Mode::kStrict, Policy::kAdversarial, 800);
    config.faults = &faults;
    auto report = run_crashcheck(ops, config);
    CHECK(!report.violations.empty());
  }
}
