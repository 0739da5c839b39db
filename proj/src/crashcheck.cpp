// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/crashcheck.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <random>
#include <thread>

#include "json.hpp"
#include "pmsplit/kfs.hpp"

namespace pmsplit::crash {

namespace {

std::string hex_of(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

Result<Policy> policy_from_name(std::string_view name) {
  if (name == "strict-epoch") return Policy::kStrictEpoch;
  if (name == "adversarial") return Policy::kAdversarial;
  return Status::invalid_argument("unknown policy '" + std::string(name) + "'");
}

std::string_view policy_name(Policy policy) {
  return policy == Policy::kStrictEpoch ? "strict-epoch" : "adversarial";
}

Result<RecordedRun> run_recorded(std::span<const ScriptOp> ops, const CheckConfig& config) {
  RecordedRun run;
  PmemDevice dev(config.device_size, /*tracing=*/true);
  Geometry geo = Geometry::for_capacity(config.device_size);
  if (Status st = Kfs::mkfs(dev, geo); !st.is_ok()) return st;
  run.base_image = dev.snapshot(PmemDevice::ImageKind::kPersistent);
  dev.reset_trace();

  auto kfs = Kfs::mount(dev);
  if (!kfs.is_ok()) return kfs.status();
  if (config.faults) kfs.value().set_faults(config.faults);
  auto us = Usplit::init(dev, kfs.value(), config.mode, config.us_config);
  if (!us.is_ok()) return us.status();
  if (config.faults) us.value()->set_faults(config.faults);

  ScriptRunner runner(*us.value());
  run.timeline.initial = runner.shadow();
  for (const ScriptOp& op : ops) {
    Timeline::OpRecord rec;
    rec.op = op;
    rec.trace_begin = dev.trace().size();
    if (Status st = runner.step(op); !st.is_ok()) return st;
    rec.trace_end = dev.trace().size();
    rec.after = runner.shadow();
    rec.touched = runner.last_op().name;
    rec.off = runner.last_op().off;
    rec.len = runner.last_op().len;
    rec.is_append = runner.last_op().is_append;
    run.timeline.ops.push_back(std::move(rec));
  }
  run.trace = dev.trace();
  return run;
}

// ---------------------------------------------------------------------------
// Crash-state enumeration

namespace {

// Minimal pending-write model used both for counting adversarial choices and
// for the independent interpreter below.
struct PendingGranule {
  uint64_t addr = 0;
  uint8_t len = 0;
  bool flagged = false;  // flushed or non-temporal
  std::array<uint8_t, 8> data{};
};

struct PendingModel {
  std::map<uint64_t, std::vector<PendingGranule>> lines;

  void apply(const TraceEvent& ev, std::vector<uint8_t>* image) {
    switch (ev.kind) {
      case TraceEvent::Kind::kStore:
      case TraceEvent::Kind::kStoreNt: {
        PendingGranule g;
        g.addr = ev.addr;
        g.len = ev.len;
        g.flagged = ev.kind == TraceEvent::Kind::kStoreNt;
        g.data = ev.data;
        lines[ev.addr & ~(kCacheLine - 1)].push_back(g);
        break;
      }
      case TraceEvent::Kind::kFlush: {
        auto it = lines.find(ev.addr);
        if (it != lines.end()) {
          for (PendingGranule& g : it->second) g.flagged = true;
        }
        break;
      }
      case TraceEvent::Kind::kFence: {
        for (auto it = lines.begin(); it != lines.end();) {
          auto& writes = it->second;
          size_t commit = 0;
          for (size_t i = 0; i < writes.size(); ++i) {
            if (writes[i].flagged) commit = i + 1;
          }
          if (image) {
            for (size_t i = 0; i < commit; ++i) {
              std::memcpy(image->data() + writes[i].addr, writes[i].data.data(), writes[i].len);
            }
          }
          if (commit == writes.size()) {
            it = lines.erase(it);
          } else {
            writes.erase(writes.begin(), writes.begin() + static_cast<ptrdiff_t>(commit));
            ++it;
          }
        }
        break;
      }
    }
  }
};

}  // namespace

std::vector<CrashPlan> enumerate(std::span<const TraceEvent> trace, Policy policy,
                                 uint64_t budget, uint64_t seed) {
  std::vector<CrashPlan> plans;
  if (policy == Policy::kStrictEpoch) {
    plans.push_back(CrashPlan{0, {}});
    for (size_t i = 0; i < trace.size(); ++i) {
      if (trace[i].kind == TraceEvent::Kind::kFence) {
        plans.push_back(CrashPlan{i + 1, {}});
      }
    }
    return plans;
  }

  // Adversarial. First pass: the size of the full choice space, which is the
  // sum over prefixes of prod(pending-per-line + 1), saturated at budget+1.
  uint64_t total = 0;
  {
    PendingModel model;
    auto product_of = [&]() {
      uint64_t prod = 1;
      for (const auto& [line, writes] : model.lines) {
        prod *= (writes.size() + 1);
        if (prod > budget + 1) return budget + 1;
      }
      return prod;
    };
    total = product_of();
    for (const TraceEvent& ev : trace) {
      if (total > budget) break;
      model.apply(ev, nullptr);
      total += product_of();
    }
  }

  if (total <= budget) {
    // Exhaustive: replay again, emitting the odometer of per-line choices at
    // every prefix.
    PendingModel model;
    auto emit = [&](size_t t) {
      std::vector<std::pair<uint64_t, size_t>> dims;
      for (const auto& [line, writes] : model.lines) {
        if (!writes.empty()) dims.emplace_back(line, writes.size());
      }
      std::vector<size_t> pick(dims.size(), 0);
      while (true) {
        CrashPlan plan;
        plan.trace_prefix = t;
        for (size_t d = 0; d < dims.size(); ++d) {
          if (pick[d] > 0) plan.line_prefix[dims[d].first] = pick[d];
        }
        plans.push_back(std::move(plan));
        size_t d = 0;
        for (; d < dims.size(); ++d) {
          if (++pick[d] <= dims[d].second) break;
          pick[d] = 0;
        }
        if (d == dims.size()) break;
      }
    };
    emit(0);
    for (size_t i = 0; i < trace.size(); ++i) {
      model.apply(trace[i], nullptr);
      emit(i + 1);
    }
    return plans;
  }

  // Sampling: every fence boundary and the final state are always included
  // (cheap, deterministic, and they cover the post-commit windows that
  // uniform sampling can miss); the rest of the budget is seeded uniform
  // draws over (crash point, per-line prefix) choices.
  std::mt19937_64 rng(seed);
  std::vector<size_t> points;
  points.reserve(budget);
  for (size_t i = 0; i < trace.size() && points.size() + 1 < budget; ++i) {
    if (trace[i].kind == TraceEvent::Kind::kFence) points.push_back(i + 1);
  }
  points.push_back(trace.size());
  while (points.size() < budget) {
    points.push_back(static_cast<size_t>(rng() % (trace.size() + 1)));
  }
  std::vector<size_t> order(points.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return points[a] < points[b]; });

  std::vector<std::map<uint64_t, size_t>> counts(points.size());
  {
    PendingModel model;
    size_t pos = 0;  // trace prefix applied so far
    for (size_t idx : order) {
      while (pos < points[idx]) model.apply(trace[pos++], nullptr);
      auto& out = counts[idx];
      for (const auto& [line, writes] : model.lines) {
        if (!writes.empty()) out[line] = writes.size();
      }
    }
  }
  plans.reserve(budget);
  for (size_t i = 0; i < points.size(); ++i) {
    CrashPlan plan;
    plan.trace_prefix = points[i];
    for (const auto& [line, n] : counts[i]) {
      const size_t k = static_cast<size_t>(rng() % (n + 1));
      if (k > 0) plan.line_prefix[line] = k;
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

std::vector<uint8_t> materialize(std::span<const uint8_t> base_image,
                                 std::span<const TraceEvent> trace, const CrashPlan& plan) {
  std::vector<uint8_t> image(base_image.begin(), base_image.end());
  PendingModel model;
  const size_t n = std::min(plan.trace_prefix, trace.size());
  for (size_t i = 0; i < n; ++i) model.apply(trace[i], &image);
  for (const auto& [line, count] : plan.line_prefix) {
    auto it = model.lines.find(line);
    if (it == model.lines.end()) continue;
    const size_t k = std::min(count, it->second.size());
    for (size_t i = 0; i < k; ++i) {
      const PendingGranule& g = it->second[i];
      std::memcpy(image.data() + g.addr, g.data.data(), g.len);
    }
  }
  return image;
}

std::vector<uint8_t> materialize_via_device(std::span<const uint8_t> base_image,
                                            std::span<const TraceEvent> trace,
                                            const CrashPlan& plan) {
  PmemDevice dev = PmemDevice::from_image({base_image.begin(), base_image.end()},
                                          /*tracing=*/false);
  const size_t n = std::min(plan.trace_prefix, trace.size());
  for (size_t i = 0; i < n; ++i) {
    const TraceEvent& ev = trace[i];
    switch (ev.kind) {
      case TraceEvent::Kind::kStore:
        dev.store(ev.addr, std::span<const uint8_t>(ev.data.data(), ev.len));
        break;
      case TraceEvent::Kind::kStoreNt:
        dev.store_nt(ev.addr, std::span<const uint8_t>(ev.data.data(), ev.len));
        break;
      case TraceEvent::Kind::kFlush:
        dev.flush(ev.addr, 1);
        break;
      case TraceEvent::Kind::kFence:
        dev.fence();
        break;
    }
  }
  return dev.crash_image(plan.line_prefix);
}

// ---------------------------------------------------------------------------
// Mode-guarantee checking

namespace {

struct RecoveredFile {
  uint64_t size = 0;
  std::vector<uint8_t> bytes;
};

// Compares recovered state against one golden candidate. `exception_name`,
// `exception_off`, `exception_len` describe the in-flight overwrite whose
// granules may hold either candidate's bytes. `other` supplies those
// alternate bytes.
bool matches_candidate(const std::map<std::string, RecoveredFile>& recovered, Mode mode,
                       const ShadowFs& snap, const ShadowFs* other,
                       const std::string& exception_name, uint64_t exception_off,
                       uint64_t exception_len, std::string* why) {
  // File sets must agree.
  for (const auto& [name, file] : snap.files) {
    if (!recovered.contains(name)) {
      *why = "missing file '" + name + "'";
      return false;
    }
  }
  for (const auto& [name, rec] : recovered) {
    if (!snap.files.contains(name)) {
      *why = "unexpected file '" + name + "'";
      return false;
    }
  }
  for (const auto& [name, rec] : recovered) {
    // Strict mode recovers the full logical state (the log replays staged
    // writes); the weaker modes recover the durable view.
    const auto& golden_map = mode == Mode::kStrict ? snap.files : snap.durable_files;
    auto git = golden_map.find(name);
    const std::vector<uint8_t> empty;
    const std::vector<uint8_t>& golden = git != golden_map.end() ? git->second : empty;
    if (rec.size != golden.size()) {
      *why = "file '" + name + "': size " + std::to_string(rec.size) + ", expected " +
             std::to_string(golden.size());
      return false;
    }
    for (uint64_t g = 0; g < golden.size(); g += kGranule) {
      const uint64_t glen = std::min<uint64_t>(kGranule, golden.size() - g);
      if (std::memcmp(rec.bytes.data() + g, golden.data() + g, glen) == 0) continue;
      // Granules inside the in-flight op's range may carry the other
      // candidate's bytes (8-byte tearing of a data op in progress).
      bool excused = false;
      if (other != nullptr && name == exception_name && g + glen > exception_off &&
          g < exception_off + exception_len) {
        const auto& other_map = mode == Mode::kStrict ? other->files : other->durable_files;
        auto oit = other_map.find(name);
        if (oit != other_map.end() && oit->second.size() >= g + glen) {
          excused = std::memcmp(rec.bytes.data() + g, oit->second.data() + g, glen) == 0;
        }
      }
      if (!excused) {
        *why = "file '" + name + "': content differs at offset " + std::to_string(g);
        return false;
      }
    }
  }
  return true;
}

}  // namespace

std::optional<Violation> check(std::vector<uint8_t> image, Mode mode, const Timeline& timeline,
                               const CrashPlan& plan, uint64_t* entries_replayed) {
  auto fail = [&](std::string guarantee, std::string detail) {
    return Violation{plan, std::move(guarantee), std::move(detail)};
  };

  PmemDevice dev = PmemDevice::from_image(std::move(image), /*tracing=*/false);
  Usplit::RecoverStats stats;
  auto kfs_r = Usplit::recover_fs(dev, &stats);
  if (!kfs_r.is_ok()) {
    return fail("mountable", "recovery failed: " + kfs_r.status().to_string());
  }
  if (entries_replayed) *entries_replayed += stats.entries_replayed;
  Kfs& kfs = kfs_r.value();

  // Structural invariants on the post-recovery image.
  auto report = Kfs::verify_image(dev.image(PmemDevice::ImageKind::kVolatile));
  if (!report.is_ok()) {
    return fail("metadata-consistency", report.status().to_string());
  }
  if (!report.value().ok()) {
    return fail("metadata-consistency", report.value().violations.front());
  }

  // Locate the crash frontier in op terms.
  size_t completed = 0;
  const Timeline::OpRecord* in_flight = nullptr;
  for (const auto& rec : timeline.ops) {
    if (rec.trace_end <= plan.trace_prefix) {
      ++completed;
    } else {
      if (rec.trace_begin < plan.trace_prefix) in_flight = &rec;
      break;
    }
  }
  const ShadowFs& after_completed =
      completed == 0 ? timeline.initial : timeline.ops[completed - 1].after;

  std::map<std::string, RecoveredFile> recovered;
  for (const std::string& name : kfs.list_names()) {
    if (Usplit::is_internal_name(name)) continue;  // recovery should have removed these
    auto ino = kfs.lookup(name);
    if (!ino.is_ok()) continue;
    auto st = kfs.stat(ino.value());
    if (!st.is_ok()) return fail("metadata-consistency", "stat failed post-recovery");
    RecoveredFile rf;
    rf.size = st.value().size;
    auto bytes = kfs.read_direct(ino.value(), 0, rf.size);
    if (!bytes.is_ok()) return fail("metadata-consistency", "read failed post-recovery");
    rf.bytes = bytes.take();
    recovered[name] = std::move(rf);
  }

  // In-flight overwrites may tear at granule boundaries; appends and all
  // other ops are atomic, so nothing else is excused.
  std::string exc_name;
  uint64_t exc_off = 0;
  uint64_t exc_len = 0;
  const ShadowFs* other = nullptr;
  if (in_flight != nullptr && in_flight->op.kind == ScriptOp::Kind::kWrite) {
    // Any write in progress may have torn its in-place portion at granule
    // boundaries; for pure appends the range lies beyond the durable size
    // and the exception is vacuous.
    exc_name = in_flight->touched;
    exc_off = in_flight->off;
    exc_len = in_flight->len;
    other = &in_flight->after;
  }

  std::string why_a;
  if (matches_candidate(recovered, mode, after_completed, other, exc_name, exc_off, exc_len,
                        &why_a)) {
    return std::nullopt;
  }
  std::string why_b = "no in-flight op";
  if (in_flight != nullptr) {
    const ShadowFs* other_b = other != nullptr ? &after_completed : nullptr;
    if (matches_candidate(recovered, mode, in_flight->after, other_b, exc_name, exc_off,
                          exc_len, &why_b)) {
      return std::nullopt;
    }
  }
  const char* guarantee = mode == Mode::kStrict  ? "atomic-ops"
                          : mode == Mode::kSync  ? "synchronous-ops"
                                                 : "atomic-appends";
  return fail(guarantee, "state matches neither pre nor post candidate (pre: " + why_a +
                             "; post: " + why_b + "; completed ops: " +
                             std::to_string(completed) + ", prefix " +
                             std::to_string(plan.trace_prefix) + ")");
}

Report run_crashcheck(std::span<const ScriptOp> ops, const CheckConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  Report report;
  auto recorded = run_recorded(ops, config);
  if (!recorded.is_ok()) {
    report.violations.push_back(
        Violation{CrashPlan{}, "recording", recorded.status().to_string()});
    return report;
  }
  const RecordedRun& run = recorded.value();
  const auto plans = enumerate(run.trace, config.policy, config.budget, config.seed);

  // Plans are independent; check them in parallel on private image copies.
  // Each worker walks its plans in trace order so one rolling image serves a
  // whole chunk instead of replaying every prefix from scratch. Every plan is
  // processed, keeping the report deterministic.
  std::vector<size_t> order(plans.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return plans[a].trace_prefix < plans[b].trace_prefix;
  });

  const unsigned workers =
      std::max(1u, std::min(std::thread::hardware_concurrency(), 8u));
  std::vector<std::optional<Violation>> results(plans.size());
  std::atomic<uint64_t> replayed_total{0};
  auto worker = [&](size_t begin, size_t end) {
    uint64_t replayed = 0;
    std::vector<uint8_t> rolling(run.base_image.begin(), run.base_image.end());
    PendingModel model;
    size_t pos = 0;
    for (size_t k = begin; k < end; ++k) {
      const CrashPlan& plan = plans[order[k]];
      while (pos < plan.trace_prefix && pos < run.trace.size()) {
        model.apply(run.trace[pos++], &rolling);
      }
      std::vector<uint8_t> image = rolling;
      for (const auto& [line, count] : plan.line_prefix) {
        auto it = model.lines.find(line);
        if (it == model.lines.end()) continue;
        const size_t n = std::min(count, it->second.size());
        for (size_t i = 0; i < n; ++i) {
          const PendingGranule& g = it->second[i];
          std::memcpy(image.data() + g.addr, g.data.data(), g.len);
        }
      }
      results[order[k]] = check(std::move(image), config.mode, run.timeline, plan, &replayed);
    }
    replayed_total.fetch_add(replayed, std::memory_order_relaxed);
  };
  if (workers <= 1 || plans.size() < 16) {
    worker(0, order.size());
  } else {
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) {
      const size_t begin = order.size() * w / workers;
      const size_t end = order.size() * (w + 1) / workers;
      if (begin < end) threads.emplace_back(worker, begin, end);
    }
    for (auto& t : threads) t.join();
  }

  report.states_checked = plans.size();
  report.entries_replayed = replayed_total.load();
  for (auto& v : results) {
    if (v && report.violations.size() < config.max_violations) {
      report.violations.push_back(std::move(*v));
    }
  }
  report.check_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

std::string plan_to_json(const CrashPlan& plan) {
  nlohmann::json j;
  j["trace_prefix"] = plan.trace_prefix;
  nlohmann::json lines = nlohmann::json::object();
  for (const auto& [line, k] : plan.line_prefix) lines[hex_of(line)] = k;
  j["line_prefix"] = lines;
  return j.dump();
}

Result<CrashPlan> plan_from_json(std::string_view text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) return Status::invalid_argument("unparsable plan");
  CrashPlan plan;
  plan.trace_prefix = j.value("trace_prefix", size_t{0});
  if (j.contains("line_prefix")) {
    for (const auto& [key, val] : j["line_prefix"].items()) {
      plan.line_prefix[std::stoull(key, nullptr, 0)] = val.get<size_t>();
    }
  }
  return plan;
}

std::string report_to_json(const Report& report) {
  nlohmann::json j;
  j["states_checked"] = report.states_checked;
  j["entries_replayed"] = report.entries_replayed;
  j["check_seconds"] = report.check_seconds;
  nlohmann::json violations = nlohmann::json::array();
  for (const Violation& v : report.violations) {
    violations.push_back({{"guarantee", v.guarantee},
                          {"detail", v.detail},
                          {"plan", nlohmann::json::parse(plan_to_json(v.plan))}});
  }
  j["violations"] = violations;
  return j.dump(2);
}

}  // namespace pmsplit::crash
