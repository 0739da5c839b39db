// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.
//
// Command-line harness: microbenchmarks and script workloads across the
// splitfs engines and the two baselines, plus the trace-driven crash checker.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pmsplit/bench.hpp"
#include "pmsplit/crashcheck.hpp"
#include "pmsplit/kfs.hpp"
#include "pmsplit/script.hpp"

namespace {

using pmsplit::Result;
using pmsplit::Status;

Result<std::string> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return Status::io("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool write_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) return false;
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  return static_cast<bool>(out);
}

int fail(const Status& st) {
  std::cerr << "error: " << st.to_string() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmsplit benchmark and crash-check harness"};
  app.require_subcommand(1);

  // ---- bench run ----
  auto* run_cmd = app.add_subcommand("run", "run one benchmark configuration");
  std::string engine_s = "splitfs-posix";
  std::string workload_s = "append";
  std::string script_path;
  std::string out_path;
  std::string format = "json";
  pmsplit::bench::BenchConfig bc;
  run_cmd->add_option("--engine", engine_s,
                      "splitfs-posix|splitfs-sync|splitfs-strict|dax-baseline|copy-on-fsync");
  run_cmd->add_option("--workload", workload_s,
                      "seq_read|rand_read|seq_write|rand_write|append|append_fsync10|"
                      "varmail_micro|script:<path>");
  run_cmd->add_option("--file-size", bc.file_size, "working set in bytes");
  run_cmd->add_option("--op-size", bc.op_size, "bytes per operation");
  run_cmd->add_option("--iterations", bc.iterations, "op count (default file-size/op-size)");
  run_cmd->add_option("--seed", bc.seed, "workload seed");
  run_cmd->add_option("--device-size", bc.device_size,
                      "device bytes (default: PMSPLIT_DEVICE_SIZE or derived)");
  run_cmd->add_option("--ns-per-byte", bc.ns_per_persisted_byte,
                      "reporting-only latency per persisted byte");
  run_cmd->add_option("--out", out_path, "write results to file");
  run_cmd->add_option("--format", format, "json|csv");

  // ---- bench compare ----
  auto* cmp_cmd = app.add_subcommand("compare", "run several engines, normalize to the first");
  std::vector<std::string> cmp_engines = {"dax-baseline", "copy-on-fsync", "splitfs-posix"};
  std::string cmp_workload = "append_fsync10";
  pmsplit::bench::BenchConfig cmp_base;
  std::string cmp_out;
  cmp_cmd->add_option("--engines", cmp_engines, "engines, first is the baseline")->delimiter(',');
  cmp_cmd->add_option("--workload", cmp_workload, "workload for every engine");
  cmp_cmd->add_option("--file-size", cmp_base.file_size, "working set in bytes");
  cmp_cmd->add_option("--op-size", cmp_base.op_size, "bytes per operation");
  cmp_cmd->add_option("--seed", cmp_base.seed, "workload seed");
  cmp_cmd->add_option("--device-size", cmp_base.device_size, "device bytes");
  cmp_cmd->add_option("--out", cmp_out, "also write JSON results to file");

  // ---- bench crashcheck ----
  auto* cc_cmd = app.add_subcommand("crashcheck", "crash-state enumeration and checking");
  std::string cc_script;
  std::string cc_mode = "strict";
  std::string cc_policy = "adversarial";
  std::string cc_out;
  std::string cc_replay_plan;
  pmsplit::crash::CheckConfig cc;
  cc_cmd->add_option("--script", cc_script, "workload script path")->required();
  cc_cmd->add_option("--mode", cc_mode, "posix|sync|strict");
  cc_cmd->add_option("--policy", cc_policy, "strict-epoch|adversarial");
  cc_cmd->add_option("--budget", cc.budget, "max crash states (adversarial)");
  cc_cmd->add_option("--seed", cc.seed, "sampling seed");
  cc_cmd->add_option("--device-size", cc.device_size, "device bytes");
  cc_cmd->add_option("--out", cc_out, "write the JSON report to file");
  cc_cmd->add_option("--replay-plan", cc_replay_plan,
                     "re-check a single serialized crash plan instead of enumerating");

  // ---- bench record ----
  auto* rec_cmd = app.add_subcommand("record", "run a script and dump trace and image");
  std::string rec_script;
  std::string rec_mode = "posix";
  std::string rec_trace_out;
  std::string rec_image_out;
  pmsplit::crash::CheckConfig rec_cc;
  rec_cmd->add_option("--script", rec_script, "workload script path")->required();
  rec_cmd->add_option("--mode", rec_mode, "posix|sync|strict");
  rec_cmd->add_option("--device-size", rec_cc.device_size, "device bytes");
  rec_cmd->add_option("--trace-out", rec_trace_out, "text trace dump path");
  rec_cmd->add_option("--image-out", rec_image_out, "flat persistent-image dump path");

  CLI11_PARSE(app, argc, argv);

  if (run_cmd->parsed()) {
    auto engine = pmsplit::bench::engine_from_name(engine_s);
    if (!engine.is_ok()) return fail(engine.status());
    bc.engine = engine.value();
    auto workload = pmsplit::bench::workload_from_name(workload_s);
    if (!workload.is_ok()) return fail(workload.status());
    bc.workload = workload.value();
    if (bc.workload == pmsplit::bench::Workload::kScript) {
      const size_t colon = workload_s.find(':');
      if (colon == std::string::npos) {
        return fail(Status::invalid_argument("script workload needs script:<path>"));
      }
      auto text = read_file(workload_s.substr(colon + 1));
      if (!text.is_ok()) return fail(text.status());
      bc.script_text = text.take();
    }
    auto result = pmsplit::bench::run(bc);
    if (!result.is_ok()) return fail(result.status());
    const pmsplit::bench::BenchResult results[] = {result.value()};
    const std::string text = format == "csv" ? pmsplit::bench::results_to_csv(results)
                                             : pmsplit::bench::results_to_json(results);
    if (!out_path.empty()) {
      if (!write_file(out_path, text)) return fail(Status::io("cannot write " + out_path));
    }
    std::cout << pmsplit::bench::compare_table(results);
    return 0;
  }

  if (cmp_cmd->parsed()) {
    auto workload = pmsplit::bench::workload_from_name(cmp_workload);
    if (!workload.is_ok()) return fail(workload.status());
    std::vector<pmsplit::bench::BenchResult> results;
    for (const std::string& name : cmp_engines) {
      auto engine = pmsplit::bench::engine_from_name(name);
      if (!engine.is_ok()) return fail(engine.status());
      pmsplit::bench::BenchConfig c = cmp_base;
      c.engine = engine.value();
      c.workload = workload.value();
      auto result = pmsplit::bench::run(c);
      if (!result.is_ok()) return fail(result.status());
      results.push_back(result.take());
    }
    std::cout << pmsplit::bench::compare_table(results);
    if (!cmp_out.empty()) {
      if (!write_file(cmp_out, pmsplit::bench::results_to_json(results))) {
        return fail(Status::io("cannot write " + cmp_out));
      }
    }
    return 0;
  }

  if (cc_cmd->parsed()) {
    auto mode = pmsplit::mode_from_name(cc_mode);
    if (!mode.is_ok()) return fail(mode.status());
    cc.mode = mode.value();
    auto policy = pmsplit::crash::policy_from_name(cc_policy);
    if (!policy.is_ok()) return fail(policy.status());
    cc.policy = policy.value();
    auto text = read_file(cc_script);
    if (!text.is_ok()) return fail(text.status());
    auto ops = pmsplit::parse_script(text.value());
    if (!ops.is_ok()) return fail(ops.status());

    pmsplit::crash::Report report;
    if (!cc_replay_plan.empty()) {
      auto plan_text = read_file(cc_replay_plan);
      if (!plan_text.is_ok()) return fail(plan_text.status());
      auto plan = pmsplit::crash::plan_from_json(plan_text.value());
      if (!plan.is_ok()) return fail(plan.status());
      auto recorded = pmsplit::crash::run_recorded(ops.value(), cc);
      if (!recorded.is_ok()) return fail(recorded.status());
      auto image = pmsplit::crash::materialize(recorded.value().base_image,
                                               recorded.value().trace, plan.value());
      auto violation = pmsplit::crash::check(image, cc.mode, recorded.value().timeline,
                                             plan.value(), &report.entries_replayed);
      report.states_checked = 1;
      if (violation) report.violations.push_back(std::move(*violation));
    } else {
      report = pmsplit::crash::run_crashcheck(ops.value(), cc);
    }
    const std::string json = pmsplit::crash::report_to_json(report);
    if (!cc_out.empty()) {
      if (!write_file(cc_out, json)) return fail(Status::io("cannot write " + cc_out));
    }
    std::cout << json << "\n";
    return report.violations.empty() ? 0 : 2;
  }

  if (rec_cmd->parsed()) {
    auto mode = pmsplit::mode_from_name(rec_mode);
    if (!mode.is_ok()) return fail(mode.status());
    rec_cc.mode = mode.value();
    auto text = read_file(rec_script);
    if (!text.is_ok()) return fail(text.status());
    auto ops = pmsplit::parse_script(text.value());
    if (!ops.is_ok()) return fail(ops.status());
    auto recorded = pmsplit::crash::run_recorded(ops.value(), rec_cc);
    if (!recorded.is_ok()) return fail(recorded.status());
    if (!rec_trace_out.empty()) {
      pmsplit::PmemDevice dev = pmsplit::PmemDevice::from_image(recorded.value().base_image);
      std::ostringstream dump;
      // Re-dump from the recorded events.
      for (const auto& ev : recorded.value().trace) {
        using K = pmsplit::TraceEvent::Kind;
        switch (ev.kind) {
          case K::kStore:
          case K::kStoreNt: {
            dump << (ev.kind == K::kStore ? 'S' : 'N') << ' ' << ev.addr << ' '
                 << static_cast<unsigned>(ev.len) << ' ';
            static const char hex[] = "0123456789abcdef";
            for (unsigned i = 0; i < ev.len; ++i) {
              dump << hex[ev.data[i] >> 4] << hex[ev.data[i] & 0xF];
            }
            dump << '\n';
            break;
          }
          case K::kFlush: dump << "F " << ev.addr << '\n'; break;
          case K::kFence: dump << "M\n"; break;
        }
      }
      if (!write_file(rec_trace_out, dump.str())) {
        return fail(Status::io("cannot write " + rec_trace_out));
      }
    }
    if (!rec_image_out.empty()) {
      const auto& img = recorded.value().base_image;
      if (!write_file(rec_image_out,
                      std::string_view(reinterpret_cast<const char*>(img.data()), img.size()))) {
        return fail(Status::io("cannot write " + rec_image_out));
      }
    }
    std::cout << "ops: " << recorded.value().timeline.ops.size()
              << ", trace events: " << recorded.value().trace.size() << "\n";
    return 0;
  }
  return 0;
}
