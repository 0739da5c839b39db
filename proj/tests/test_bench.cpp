// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "pmsplit/bench.hpp"

using namespace pmsplit;
using namespace pmsplit::bench;

namespace {

BenchConfig tiny(Engine engine, Workload workload) {
  BenchConfig config;
  config.engine = engine;
  config.workload = workload;
  config.file_size = 1 * 1024 * 1024;
  config.op_size = 4096;
  config.seed = 3;
  config.device_size = 32ull * 1024 * 1024;
  return config;
}

}  // namespace

TEST_CASE("sequential reads persist nothing and never fence") {
  for (Engine engine : {Engine::kSplitfsPosix, Engine::kSplitfsStrict, Engine::kDaxBaseline,
                        Engine::kCopyOnFsync}) {
    CAPTURE(engine_name(engine));
    auto result = run(tiny(engine, Workload::kSeqRead));
    REQUIRE(result.is_ok());
    CHECK(result.value().counters.bytes_persisted == 0);
    CHECK(result.value().counters.fence_count == 0);
    CHECK(result.value().ops == 256);
  }
}

TEST_CASE("append workloads hit every engine and read back consistently") {
  for (Engine engine : {Engine::kSplitfsPosix, Engine::kSplitfsSync, Engine::kSplitfsStrict,
                        Engine::kDaxBaseline, Engine::kCopyOnFsync}) {
    CAPTURE(engine_name(engine));
    auto result = run(tiny(engine, Workload::kAppendFsync10));
    REQUIRE(result.is_ok());
    CHECK(result.value().ops == 256);
    CHECK(result.value().logical_bytes == 1024 * 1024);
    CHECK(result.value().write_amplification >= 1.0);
  }
}

TEST_CASE("identical seeds give identical counters") {
  auto a = run(tiny(Engine::kSplitfsStrict, Workload::kRandWrite));
  auto b = run(tiny(Engine::kSplitfsStrict, Workload::kRandWrite));
  REQUIRE(a.is_ok());
  REQUIRE(b.is_ok());
  CHECK(a.value().counters.bytes_stored_nt == b.value().counters.bytes_stored_nt);
  CHECK(a.value().counters.fence_count == b.value().counters.fence_count);
  CHECK(a.value().counters.bytes_persisted == b.value().counters.bytes_persisted);
  CHECK(a.value().counters.journal_commit_count == b.value().counters.journal_commit_count);
  CHECK(a.value().kfs_calls == b.value().kfs_calls);
}

TEST_CASE("copy-on-fsync roughly doubles persisted bytes next to splitfs") {
  auto splitfs = run(tiny(Engine::kSplitfsStrict, Workload::kAppendFsync10));
  auto cof = run(tiny(Engine::kCopyOnFsync, Workload::kAppendFsync10));
  REQUIRE(splitfs.is_ok());
  REQUIRE(cof.is_ok());
  CHECK(splitfs.value().write_amplification < 1.2);
  CHECK(cof.value().write_amplification > 1.8);
  CHECK(splitfs.value().counters.bytes_persisted < cof.value().counters.bytes_persisted);
}

TEST_CASE("dax baseline pays kernel calls per op, splitfs pays none on overwrites") {
  auto dax = run(tiny(Engine::kDaxBaseline, Workload::kSeqWrite));
  auto splitfs = run(tiny(Engine::kSplitfsPosix, Workload::kSeqWrite));
  REQUIRE(dax.is_ok());
  REQUIRE(splitfs.is_ok());
  CHECK(dax.value().kfs_calls >= dax.value().ops);
  CHECK(splitfs.value().kfs_calls == 0);  // warm mappings, no kernel traps
}

TEST_CASE("varmail micro runs on splitfs engines") {
  auto config = tiny(Engine::kSplitfsStrict, Workload::kVarmailMicro);
  config.iterations = 10;
  auto result = run(config);
  REQUIRE(result.is_ok());
  CHECK(result.value().ops == 10);
  CHECK(result.value().logical_bytes == 10 * 16384);
}

TEST_CASE("script workloads run through any engine") {
  BenchConfig config = tiny(Engine::kDaxBaseline, Workload::kScript);
  config.script_text =
      "open a\n"
      "write 0 @cur 4096 1\n"
      "fsync 0\n"
      "read 0 0 4096\n"
      "unlink a\n";
  auto result = run(config);
  REQUIRE(result.is_ok());
  CHECK(result.value().ops == 5);
  CHECK(result.value().logical_bytes == 4096);
}

TEST_CASE("emitters cover every field") {
  auto result = run(tiny(Engine::kSplitfsPosix, Workload::kAppend));
  REQUIRE(result.is_ok());
  const BenchResult results[] = {result.value()};
  const std::string json = results_to_json(results);
  CHECK(json.find("write_amplification") != std::string::npos);
  CHECK(json.find("splitfs-posix") != std::string::npos);
  const std::string csv = results_to_csv(results);
  CHECK(csv.find("engine,workload") == 0);
  CHECK(csv.find("splitfs-posix") != std::string::npos);
  const std::string table = compare_table(results);
  CHECK(table.find("append") != std::string::npos);
}

TEST_CASE("engine and workload names round trip") {
  for (const char* name : {"splitfs-posix", "splitfs-sync", "splitfs-strict", "dax-baseline",
                           "copy-on-fsync"}) {
    auto engine = engine_from_name(name);
    REQUIRE(engine.is_ok());
    CHECK(engine_name(engine.value()) == name);
  }
  CHECK(!engine_from_name("bogus").is_ok());
  for (const char* name : {"seq_read", "rand_read", "seq_write", "rand_write", "append",
                           "append_fsync10", "varmail_micro"}) {
    auto workload = workload_from_name(name);
    REQUIRE(workload.is_ok());
    CHECK(workload_name(workload.value()) == name);
  }
  CHECK(!workload_from_name("bogus").is_ok());
}
