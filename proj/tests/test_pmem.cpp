// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>
#include <sstream>

#include "doctest.h"
#include "pmsplit/crashcheck.hpp"
#include "pmsplit/pmem.hpp"

using namespace pmsplit;

namespace {

std::vector<uint8_t> bytes(std::initializer_list<int> vals) {
  std::vector<uint8_t> out;
  for (int v : vals) out.push_back(static_cast<uint8_t>(v));
  return out;
}

std::vector<uint8_t> filled(size_t n, uint8_t v) { return std::vector<uint8_t>(n, v); }

}  // namespace

TEST_CASE("store then load returns the written bytes") {
  PmemDevice dev(kPage);
  dev.store(0, filled(8, 0xAB));
  CHECK(dev.load(0, 8) == filled(8, 0xAB));
}

TEST_CASE("unflushed store is not persistent") {
  PmemDevice dev(kPage);
  dev.store(0, filled(8, 0xAB));
  auto persistent = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  CHECK(persistent[0] == 0);
  CHECK(dev.has_pending());
}

TEST_CASE("stores split into granules at 8-byte boundaries") {
  PmemDevice dev(2 * kPage);
  dev.store(4094, bytes({1, 2, 3, 4}));
  const auto& trace = dev.trace();
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].kind == TraceEvent::Kind::kStore);
  CHECK(trace[0].addr == 4094);
  CHECK(trace[0].len == 2);
  CHECK(trace[0].data[0] == 1);
  CHECK(trace[0].data[1] == 2);
  CHECK(trace[1].addr == 4096);
  CHECK(trace[1].len == 2);
  CHECK(trace[1].data[0] == 3);
  CHECK(trace[1].data[1] == 4);
  CHECK(dev.counters().bytes_stored == 4);
}

TEST_CASE("non-temporal store persists at the next fence") {
  PmemDevice dev(kPage);
  dev.store_nt(64, filled(64, 0x7E));
  auto before = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  CHECK(before[64] == 0);
  dev.fence();
  auto after = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  for (int i = 0; i < 64; ++i) CHECK(after[64 + i] == 0x7E);
  CHECK(!dev.has_pending());
  CHECK(dev.counters().bytes_persisted == 64);
}

TEST_CASE("second non-temporal store to the same granule wins") {
  PmemDevice dev(kPage);
  dev.store_nt(0, filled(8, 0x11));
  dev.store_nt(0, filled(8, 0x22));
  dev.fence();
  CHECK(dev.snapshot(PmemDevice::ImageKind::kPersistent)[0] == 0x22);
}

TEST_CASE("flush marks lines and fence persists them") {
  PmemDevice dev(kPage);
  dev.store(0, filled(16, 0x42));
  dev.flush(0, 16);  // one line
  CHECK(dev.counters().flush_count == 1);
  dev.store(128, filled(8, 0x43));
  dev.fence();
  auto img = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  CHECK(img[0] == 0x42);
  CHECK(img[15] == 0x42);
  CHECK(img[128] == 0);  // stored but never flushed
  CHECK(dev.counters().fence_count == 1);
}

TEST_CASE("flush spanning lines counts each line") {
  PmemDevice dev(kPage);
  dev.flush(60, 10);  // straddles lines 0 and 64
  CHECK(dev.counters().flush_count == 2);
  REQUIRE(dev.trace().size() == 2);
  CHECK(dev.trace()[0].addr == 0);
  CHECK(dev.trace()[1].addr == 64);
}

TEST_CASE("out of range access throws") {
  PmemDevice dev(kPage);
  CHECK_THROWS_AS(dev.store(kPage - 4, filled(8, 1)), std::out_of_range);
  CHECK_THROWS_AS(dev.load(kPage, 1), std::out_of_range);
  CHECK_THROWS_AS(PmemDevice(100), std::invalid_argument);
}

TEST_CASE("crash image applies per-line pending prefixes atomically") {
  PmemDevice dev(kPage);
  dev.store(0, filled(8, 0x01));
  dev.store(8, filled(8, 0x02));
  dev.store(64, filled(8, 0x03));

  auto counts = dev.pending_line_counts();
  REQUIRE(counts.size() == 2);
  CHECK(counts[0] == 2);
  CHECK(counts[64] == 1);

  auto img = dev.crash_image({{0, 1}});
  CHECK(img[0] == 0x01);
  CHECK(img[8] == 0);
  CHECK(img[64] == 0);

  img = dev.crash_image({{0, 2}, {64, 1}});
  CHECK(img[8] == 0x02);
  CHECK(img[64] == 0x03);
}

TEST_CASE("trace dump uses the documented line format") {
  PmemDevice dev(kPage);
  dev.store(4, bytes({0xDE, 0xAD}));
  dev.store_nt(64, bytes({0x01}));
  dev.flush(0, 1);
  dev.fence();
  std::ostringstream out;
  dev.dump_trace(out);
  CHECK(out.str() == "S 4 2 dead\nN 64 1 01\nF 0\nM\n");
}

TEST_CASE("counters reset only at a named checkpoint") {
  PmemDevice dev(kPage);
  dev.store_nt(0, filled(8, 1));
  dev.fence();
  CHECK(dev.counters().bytes_stored_nt == 8);
  dev.reset_counters("after-setup");
  CHECK(dev.counters().bytes_stored_nt == 0);
  CHECK(dev.last_counter_checkpoint() == "after-setup");
}

// Property: the device's incremental persistent image always agrees with the
// independent trace interpreter, and loads always return the last store.
TEST_CASE("strict-epoch persistence matches the independent interpreter") {
  std::mt19937_64 rng(7);
  for (int round = 0; round < 30; ++round) {
    PmemDevice dev(4 * kPage);
    const auto base = dev.snapshot(PmemDevice::ImageKind::kPersistent);
    std::vector<uint8_t> shadow_volatile(4 * kPage, 0);

    const int ops = 120;
    for (int i = 0; i < ops; ++i) {
      switch (rng() % 5) {
        case 0:
        case 1: {
          const uint64_t addr = rng() % (4 * kPage - 32);
          const uint64_t len = 1 + rng() % 24;
          std::vector<uint8_t> data(len);
          for (auto& b : data) b = static_cast<uint8_t>(rng());
          if (rng() % 2 == 0) {
            dev.store(addr, data);
          } else {
            dev.store_nt(addr, data);
          }
          std::copy(data.begin(), data.end(), shadow_volatile.begin() + static_cast<ptrdiff_t>(addr));
          break;
        }
        case 2: {
          const uint64_t addr = rng() % (4 * kPage - 128);
          dev.flush(addr, 1 + rng() % 128);
          break;
        }
        case 3:
          dev.fence();
          break;
        case 4: {
          const uint64_t addr = rng() % (4 * kPage - 64);
          const uint64_t len = 1 + rng() % 64;
          CHECK(dev.load(addr, len) ==
                std::vector<uint8_t>(shadow_volatile.begin() + static_cast<ptrdiff_t>(addr),
                                     shadow_volatile.begin() + static_cast<ptrdiff_t>(addr + len)));
          break;
        }
      }
    }
    dev.fence();

    crash::CrashPlan plan;
    plan.trace_prefix = dev.trace().size();
    const auto interpreted = crash::materialize(base, dev.trace(), plan);
    CHECK(interpreted == dev.snapshot(PmemDevice::ImageKind::kPersistent));
  }
}

// Property: persistent never diverges from volatile except on pending bytes.
TEST_CASE("persistent image differs from volatile only on dirty granules") {
  std::mt19937_64 rng(13);
  PmemDevice dev(kPage);
  for (int i = 0; i < 500; ++i) {
    const uint64_t addr = rng() % (kPage - 16);
    std::vector<uint8_t> data(1 + rng() % 16);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    switch (rng() % 4) {
      case 0: dev.store(addr, data); break;
      case 1: dev.store_nt(addr, data); break;
      case 2: dev.flush(addr, data.size()); break;
      case 3: dev.fence(); break;
    }
  }
  auto vol = dev.snapshot(PmemDevice::ImageKind::kVolatile);
  auto per = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  auto pending = dev.pending_line_counts();
  for (uint64_t b = 0; b < kPage; ++b) {
    if (vol[b] != per[b]) {
      CHECK(pending.contains(b & ~(kCacheLine - 1)));
    }
  }
  dev.flush(0, kPage);
  dev.fence();
  CHECK(dev.snapshot(PmemDevice::ImageKind::kVolatile) ==
        dev.snapshot(PmemDevice::ImageKind::kPersistent));
}

// Conservation: persisted byte count equals what the interpreter applied.
TEST_CASE("bytes_persisted counts granule bytes moved to the persistent image") {
  PmemDevice dev(kPage);
  dev.store_nt(0, filled(100, 1));
  dev.fence();
  CHECK(dev.counters().bytes_persisted == 100);
  dev.store(200, filled(10, 2));
  dev.fence();  // nothing flushed, nothing persisted
  CHECK(dev.counters().bytes_persisted == 100);
  dev.flush(200, 10);
  dev.fence();
  CHECK(dev.counters().bytes_persisted == 110);
}
