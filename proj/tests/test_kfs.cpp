// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "pmsplit/crashcheck.hpp"
#include "pmsplit/kfs.hpp"
#include "pmsplit/pmem.hpp"

using namespace pmsplit;

namespace {

constexpr uint64_t kDevBytes = 16ull * 1024 * 1024;

struct Fixture {
  PmemDevice dev{kDevBytes};
  Geometry geo = Geometry::for_capacity(kDevBytes);

  Kfs make() {
    REQUIRE(Kfs::mkfs(dev, geo).is_ok());
    auto fs = Kfs::mount(dev);
    REQUIRE(fs.is_ok());
    return fs.take();
  }
};

std::vector<uint8_t> pattern(uint64_t len, uint8_t seed) {
  std::vector<uint8_t> out(len);
  for (uint64_t i = 0; i < len; ++i) out[i] = static_cast<uint8_t>(seed + i * 7);
  return out;
}

void check_clean(const PmemDevice& dev) {
  auto report = Kfs::verify_image(dev.image(PmemDevice::ImageKind::kVolatile));
  REQUIRE(report.is_ok());
  for (const auto& v : report.value().violations) {
    CAPTURE(v);
    CHECK(false);
  }
}

}  // namespace

TEST_CASE("extent helpers merge and split mappings") {
  std::vector<Extent> list;
  extents::add_mapping(list, 0, 100, 2);
  extents::add_mapping(list, 2, 102, 1);  // merges
  REQUIRE(list.size() == 1);
  CHECK(list[0] == Extent{0, 100, 3});
  extents::add_mapping(list, 10, 300, 2);  // gap
  REQUIRE(list.size() == 2);
  CHECK(extents::device_block_of(list, 1) == 101);
  CHECK(extents::device_block_of(list, 11) == 301);
  CHECK(extents::device_block_of(list, 5) == 0);

  extents::remove_mapping(list, 1, 1);  // split first extent
  REQUIRE(list.size() == 3);
  CHECK(extents::device_block_of(list, 0) == 100);
  CHECK(extents::device_block_of(list, 1) == 0);
  CHECK(extents::device_block_of(list, 2) == 102);

  extents::add_mapping(list, 1, 101, 1);  // heals back into one run
  CHECK(extents::device_block_of(list, 1) == 101);
  uint64_t covered = 0;
  for (const auto& e : list) covered += e.length;
  CHECK(covered == 5);
}

TEST_CASE("extent runs cap at the maximum length") {
  std::vector<Extent> list;
  extents::add_mapping(list, 0, 1000, kMaxExtentBlocks + 10);
  REQUIRE(list.size() == 2);
  CHECK(list[0].length == kMaxExtentBlocks);
  CHECK(list[1].length == 10);
}

TEST_CASE("mkfs produces a clean mountable image") {
  Fixture fx;
  Kfs fs = fx.make();
  check_clean(fx.dev);
  CHECK(fs.free_blocks() == fx.geo.total_blocks - fx.geo.metadata_blocks());
  CHECK(fs.list_names().empty());
}

TEST_CASE("mount rejects a corrupt superblock") {
  Fixture fx;
  fx.make();
  std::vector<uint8_t> junk = {0xFF, 0xFF, 0xFF, 0xFF};
  fx.dev.store_nt(0, junk);
  fx.dev.fence();
  auto fs = Kfs::mount(fx.dev);
  CHECK(!fs.is_ok());
  CHECK(fs.status().code() == Errc::kBadImage);
}

TEST_CASE("first create gets inode 1") {
  Fixture fx;
  Kfs fs = fx.make();
  auto ino = fs.create("a");
  REQUIRE(ino.is_ok());
  CHECK(ino.value() == 1);
  auto again = fs.create("a");
  CHECK(again.status().code() == Errc::kExists);
  check_clean(fx.dev);
}

TEST_CASE("create unlink lookup round trip") {
  Fixture fx;
  Kfs fs = fx.make();
  REQUIRE(fs.create("a").is_ok());
  REQUIRE(fs.unlink("a").is_ok());
  CHECK(fs.lookup("a").status().code() == Errc::kNotFound);
  CHECK(fs.unlink("a").code() == Errc::kNotFound);
  check_clean(fx.dev);
}

TEST_CASE("rename moves and replaces") {
  Fixture fx;
  Kfs fs = fx.make();
  auto a = fs.create("a");
  REQUIRE(a.is_ok());
  REQUIRE(fs.allocate(a.value(), 0, 4096).is_ok());
  auto b = fs.create("b");
  REQUIRE(b.is_ok());
  REQUIRE(fs.allocate(b.value(), 0, 8192).is_ok());
  const uint64_t free_before = fs.free_blocks();

  REQUIRE(fs.rename("a", "b").is_ok());  // displaces b, frees its two blocks
  CHECK(fs.lookup("a").status().code() == Errc::kNotFound);
  auto now_b = fs.lookup("b");
  REQUIRE(now_b.is_ok());
  CHECK(now_b.value() == a.value());
  CHECK(fs.free_blocks() == free_before + 2);
  CHECK(fs.rename("missing", "x").code() == Errc::kNotFound);
  check_clean(fx.dev);
}

TEST_CASE("allocate extends and reports ENOSPC") {
  Fixture fx;
  Kfs fs = fx.make();
  auto ino = fs.create("f");
  REQUIRE(ino.is_ok());
  REQUIRE(fs.allocate(ino.value(), 0, 10 * 4096).is_ok());
  auto st = fs.stat(ino.value());
  REQUIRE(st.is_ok());
  CHECK(st.value().size == 10 * 4096);

  const uint64_t free = fs.free_blocks();
  auto too_big = fs.allocate(ino.value(), 10 * 4096, (free + 1) * 4096);
  CHECK(too_big.code() == Errc::kNoSpace);
  // Failed allocation must not leak.
  CHECK(fs.free_blocks() == free);
  check_clean(fx.dev);
}

TEST_CASE("write_direct and read_direct round trip with size update") {
  Fixture fx;
  Kfs fs = fx.make();
  auto ino = fs.create("f");
  REQUIRE(ino.is_ok());
  const auto data = pattern(10000, 3);
  auto n = fs.write_direct(ino.value(), 100, data);
  REQUIRE(n.is_ok());
  CHECK(n.value() == data.size());
  CHECK(fs.stat(ino.value()).value().size == 100 + data.size());

  auto back = fs.read_direct(ino.value(), 100, data.size());
  REQUIRE(back.is_ok());
  CHECK(back.value() == data);
  // Reads past EOF truncate.
  auto tail = fs.read_direct(ino.value(), 100 + data.size() - 5, 100);
  REQUIRE(tail.is_ok());
  CHECK(tail.value().size() == 5);
  check_clean(fx.dev);
}

TEST_CASE("map_extents fails on holes") {
  Fixture fx;
  Kfs fs = fx.make();
  auto ino = fs.create("f");
  REQUIRE(ino.is_ok());
  REQUIRE(fs.allocate(ino.value(), 0, 4096).is_ok());
  REQUIRE(fs.allocate(ino.value(), 3 * 4096, 4096).is_ok());  // hole at blocks 1..2
  CHECK(fs.map_extents(ino.value(), 0, 4096).is_ok());
  auto hole = fs.map_extents(ino.value(), 0, 2 * 4096);
  CHECK(hole.status().code() == Errc::kInvalidArgument);
}

TEST_CASE("truncate frees whole blocks beyond the new size") {
  Fixture fx;
  Kfs fs = fx.make();
  auto ino = fs.create("f");
  REQUIRE(ino.is_ok());
  REQUIRE(fs.write_direct(ino.value(), 0, pattern(8 * 4096, 1)).is_ok());
  const uint64_t free = fs.free_blocks();
  REQUIRE(fs.truncate(ino.value(), 4096 + 10).is_ok());
  CHECK(fs.stat(ino.value()).value().size == 4096 + 10);
  CHECK(fs.free_blocks() == free + 6);  // blocks 2..7 freed
  check_clean(fx.dev);
}

TEST_CASE("relink moves aligned blocks without copying") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  REQUIRE(src.is_ok());
  REQUIRE(dst.is_ok());
  const auto data = pattern(8192, 5);
  REQUIRE(fs.write_direct(src.value(), 0, data).is_ok());
  auto src_extents = fs.inode(src.value()).value().extents;
  REQUIRE(!src_extents.empty());
  const uint64_t copied_before = fx.dev.counters().relink_data_bytes_copied;

  REQUIRE(fs.relink(src.value(), 0, dst.value(), 0, 8192).is_ok());

  CHECK(fx.dev.counters().relink_data_bytes_copied == copied_before);
  auto dst_info = fs.inode(dst.value()).value();
  CHECK(dst_info.size == 8192);
  // Destination now owns the exact device blocks the source had.
  CHECK(extents::device_block_of(dst_info.extents, 0) ==
        extents::device_block_of(src_extents, 0));
  auto src_info = fs.inode(src.value()).value();
  CHECK(src_info.extents.empty());
  CHECK(fs.read_direct(dst.value(), 0, 8192).value() == data);
  check_clean(fx.dev);
}

TEST_CASE("relink with an unaligned tail copies exactly the tail") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  const auto data = pattern(4096 + 512, 9);
  REQUIRE(fs.write_direct(src.value(), 0, data).is_ok());
  const uint64_t copied_before = fx.dev.counters().relink_data_bytes_copied;

  REQUIRE(fs.relink(src.value(), 0, dst.value(), 0, 4096 + 512).is_ok());

  CHECK(fx.dev.counters().relink_data_bytes_copied == copied_before + 512);
  CHECK(fs.read_direct(dst.value(), 0, data.size()).value() == data);
  check_clean(fx.dev);
}

TEST_CASE("relink deallocates replaced destination blocks in the same transaction") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  REQUIRE(fs.write_direct(src.value(), 0, pattern(8192, 1)).is_ok());
  REQUIRE(fs.write_direct(dst.value(), 0, pattern(8192, 2)).is_ok());
  const uint64_t commits_before = fx.dev.counters().journal_commit_count;
  const uint64_t free_before = fs.free_blocks();

  REQUIRE(fs.relink(src.value(), 0, dst.value(), 0, 8192).is_ok());

  CHECK(fx.dev.counters().journal_commit_count == commits_before + 1);  // one txn
  CHECK(fs.free_blocks() == free_before + 2);  // dst's two old blocks freed
  CHECK(fs.inode(src.value()).value().extents.empty());
  check_clean(fx.dev);
}

TEST_CASE("relink body move needs matching block phase") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  const auto data = pattern(4096, 7);
  REQUIRE(fs.write_direct(src.value(), 512, data).is_ok());
  REQUIRE(fs.write_direct(dst.value(), 0, pattern(8192, 1)).is_ok());
  const uint64_t copied_before = fx.dev.counters().relink_data_bytes_copied;

  // Source phase 512, destination phase 0: everything must be copied.
  REQUIRE(fs.relink(src.value(), 512, dst.value(), 0, 4096).is_ok());
  CHECK(fx.dev.counters().relink_data_bytes_copied == copied_before + 4096);
  CHECK(fs.read_direct(dst.value(), 0, 4096).value() == data);
  check_clean(fx.dev);
}

TEST_CASE("relink via allocate-swap-deallocate matches native semantics") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  const auto data = pattern(3 * 4096 + 512, 11);
  REQUIRE(fs.write_direct(src.value(), 0, data).is_ok());
  REQUIRE(fs.write_direct(dst.value(), 0, pattern(4096, 1)).is_ok());
  const uint64_t free_before = fs.free_blocks();
  const uint64_t copied_before = fx.dev.counters().relink_data_bytes_copied;

  REQUIRE(fs.relink(src.value(), 0, dst.value(), 0, data.size(),
                    RelinkStrategy::kAllocSwapDealloc)
              .is_ok());

  CHECK(fs.read_direct(dst.value(), 0, data.size()).value() == data);
  CHECK(fx.dev.counters().relink_data_bytes_copied == copied_before + 512);
  // Three whole blocks moved; dst's one old block freed; edge block added.
  CHECK(fs.free_blocks() == free_before + 1 - 1);
  check_clean(fx.dev);
}

TEST_CASE("relink source range must be fully mapped") {
  Fixture fx;
  Kfs fs = fx.make();
  auto src = fs.create("src");
  auto dst = fs.create("dst");
  REQUIRE(fs.write_direct(src.value(), 0, pattern(4096, 1)).is_ok());
  auto st = fs.relink(src.value(), 0, dst.value(), 0, 8192);
  CHECK(st.code() == Errc::kInvalidArgument);
  CHECK(fs.relink(src.value(), 0, dst.value(), 0, 0).code() == Errc::kInvalidArgument);
}

TEST_CASE("mount is idempotent") {
  Fixture fx;
  Kfs fs = fx.make();
  REQUIRE(fs.create("a").is_ok());
  REQUIRE(fs.write_direct(fs.lookup("a").value(), 0, pattern(5000, 2)).is_ok());

  auto fs2 = Kfs::mount(fx.dev);
  REQUIRE(fs2.is_ok());
  auto snap1 = fx.dev.snapshot(PmemDevice::ImageKind::kVolatile);
  auto fs3 = Kfs::mount(fx.dev);
  REQUIRE(fs3.is_ok());
  auto snap2 = fx.dev.snapshot(PmemDevice::ImageKind::kVolatile);
  CHECK(snap1 == snap2);
  CHECK(fs3.value().lookup("a").is_ok());
  CHECK(fs3.value().stat(1).value().size == 5000);
}

TEST_CASE("mount replays a committed transaction whose in-place writes were lost") {
  // Build a crash image cut exactly at a create's commit fence: records and
  // commit are persistent, the in-place application is not. Mounting must
  // replay the transaction.
  Fixture fx;
  REQUIRE(Kfs::mkfs(fx.dev, fx.geo).is_ok());
  {
    auto mounted = Kfs::mount(fx.dev);
    REQUIRE(mounted.is_ok());
  }
  const auto base = fx.dev.snapshot(PmemDevice::ImageKind::kPersistent);
  {
    auto fs = Kfs::mount(fx.dev);
    REQUIRE(fs.is_ok());
    fx.dev.reset_trace();
    REQUIRE(fs.value().create("a").is_ok());
  }
  const auto trace = fx.dev.trace();
  size_t fences = 0;
  size_t cut = 0;
  for (size_t i = 0; i < trace.size(); ++i) {
    if (trace[i].kind == TraceEvent::Kind::kFence && ++fences == 2) {
      cut = i + 1;
      break;
    }
  }
  REQUIRE(cut > 0);
  crash::CrashPlan plan;
  plan.trace_prefix = cut;
  auto image = crash::materialize(base, trace, plan);
  PmemDevice crashed = PmemDevice::from_image(std::move(image));
  auto recovered = Kfs::mount(crashed);
  REQUIRE(recovered.is_ok());
  CHECK(recovered.value().lookup("a").is_ok());
  check_clean(crashed);
}

TEST_CASE("crash between journal records and commit discards the create") {
  Fixture fx;
  REQUIRE(Kfs::mkfs(fx.dev, fx.geo).is_ok());
  {
    auto mounted = Kfs::mount(fx.dev);
    REQUIRE(mounted.is_ok());
  }
  const auto base = fx.dev.snapshot(PmemDevice::ImageKind::kPersistent);
  const uint64_t free_before = Kfs::verify_image(base).value().free_blocks;
  {
    auto fs = Kfs::mount(fx.dev);
    REQUIRE(fs.is_ok());
    fx.dev.reset_trace();
    REQUIRE(fs.value().create("a").is_ok());
  }
  const auto trace = fx.dev.trace();
  // Cut after the first fence: records fenced, commit not yet written.
  size_t cut = 0;
  for (size_t i = 0; i < trace.size(); ++i) {
    if (trace[i].kind == TraceEvent::Kind::kFence) {
      cut = i + 1;
      break;
    }
  }
  REQUIRE(cut > 0);
  crash::CrashPlan plan;
  plan.trace_prefix = cut;
  auto image = crash::materialize(base, trace, plan);
  PmemDevice crashed = PmemDevice::from_image(std::move(image));
  auto fs = Kfs::mount(crashed);
  REQUIRE(fs.is_ok());
  CHECK(fs.value().lookup("a").status().code() == Errc::kNotFound);
  auto report = Kfs::verify_image(crashed.image(PmemDevice::ImageKind::kVolatile));
  REQUIRE(report.is_ok());
  CHECK(report.value().ok());
  CHECK(report.value().free_blocks == free_before);
}

TEST_CASE("journal atomicity holds at every crash point of a metadata op") {
  // Small device: every prefix of the trace gets materialized and mounted.
  PmemDevice dev(2 * 1024 * 1024);
  const Geometry geo = Geometry::for_capacity(2 * 1024 * 1024);
  REQUIRE(Kfs::mkfs(dev, geo).is_ok());
  {
    auto warm = Kfs::mount(dev);
    REQUIRE(warm.is_ok());
    REQUIRE(warm.value().create("seed").is_ok());
    REQUIRE(warm.value().write_direct(1, 0, pattern(4096, 1)).is_ok());
    dev.fence();
  }
  const auto base = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  {
    auto fs = Kfs::mount(dev);
    REQUIRE(fs.is_ok());
    dev.reset_trace();
    REQUIRE(fs.value().rename("seed", "renamed").is_ok());
  }
  const auto trace = dev.trace();

  // Every strict-epoch prefix recovers to exactly pre-state or post-state.
  for (size_t cut = 0; cut <= trace.size(); ++cut) {
    crash::CrashPlan plan;
    plan.trace_prefix = cut;
    auto image = crash::materialize(base, trace, plan);
    PmemDevice crashed = PmemDevice::from_image(std::move(image));
    auto fs = Kfs::mount(crashed);
    REQUIRE(fs.is_ok());
    const bool has_old = fs.value().lookup("seed").is_ok();
    const bool has_new = fs.value().lookup("renamed").is_ok();
    CHECK(has_old != has_new);  // never both, never neither
    auto report = Kfs::verify_image(crashed.image(PmemDevice::ImageKind::kVolatile));
    REQUIRE(report.is_ok());
    CHECK(report.value().ok());
  }
}

TEST_CASE("allocator stays conserved across a random op soup") {
  Fixture fx;
  Kfs fs = fx.make();
  std::mt19937_64 rng(21);
  std::vector<std::string> names;
  for (int i = 0; i < 200; ++i) {
    const int action = static_cast<int>(rng() % 5);
    if (action == 0 || names.empty()) {
      std::string name = "f" + std::to_string(i);
      if (fs.create(name).is_ok()) names.push_back(name);
    } else {
      const std::string& name = names[rng() % names.size()];
      auto ino = fs.lookup(name);
      if (!ino.is_ok()) continue;
      switch (action) {
        case 1: {
          // Dense writes only: start at or below the current size.
          const uint64_t size = fs.stat(ino.value()).value().size;
          (void)fs.write_direct(ino.value(), rng() % (size + 1), pattern(1 + rng() % 9000, 4));
          break;
        }
        case 2: {
          // Shrinking truncates keep files dense (size within mapped blocks).
          const uint64_t size = fs.stat(ino.value()).value().size;
          (void)fs.truncate(ino.value(), rng() % (size + 1));
          break;
        }
        case 3: {
          if (fs.unlink(name).is_ok()) {
            names.erase(std::find(names.begin(), names.end(), name));
          }
          break;
        }
        case 4: {
          std::string to = "r" + std::to_string(i);
          if (fs.rename(name, to).is_ok()) {
            names.erase(std::find(names.begin(), names.end(), name));
            names.push_back(to);
          }
          break;
        }
      }
    }
  }
  check_clean(fx.dev);
}

TEST_CASE("journal wraps and resets when full") {
  Fixture fx;
  Kfs fs = fx.make();
  fx.dev.set_tracing(false);
  auto ino = fs.create("f");
  REQUIRE(ino.is_ok());
  // Enough transactions to wrap the journal region a few times; allocate and
  // truncate each journal whole metadata blocks.
  const uint64_t journal_bytes = fx.geo.journal_blocks * 4096;
  const uint64_t commits_before = fx.dev.counters().journal_commit_count;
  uint64_t journaled = 0;
  while (journaled < 3 * journal_bytes) {
    REQUIRE(fs.allocate(ino.value(), 0, 4096).is_ok());
    REQUIRE(fs.truncate(ino.value(), 0).is_ok());
    journaled += 4 * 16384;  // rough txn footprint, only the wrap count matters
  }
  CHECK(fx.dev.counters().journal_commit_count > commits_before);
  check_clean(fx.dev);
  auto remounted = Kfs::mount(fx.dev);
  REQUIRE(remounted.is_ok());
  CHECK(remounted.value().stat(ino.value()).value().size == 0);
}
