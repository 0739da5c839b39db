// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/script.hpp"

#include <charconv>
#include <sstream>

namespace pmsplit {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool parse_u64(const std::string& s, uint64_t* out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), *out);
  return ec == std::errc() && p == s.data() + s.size();
}

bool parse_fd(const std::string& s, int* out) {
  uint64_t v = 0;
  if (!parse_u64(s, &v) || v > 1u << 20) return false;
  *out = static_cast<int>(v);
  return true;
}

}  // namespace

void fill_payload(uint64_t seed, uint64_t file_off, std::span<uint8_t> out) {
  for (size_t i = 0; i < out.size();) {
    const uint64_t pos = file_off + i;
    const uint64_t word_index = pos / 8;
    const uint64_t word = splitmix64(seed ^ (word_index * 0x9E3779B97F4A7C15ull + 1));
    const uint64_t in_word = pos % 8;
    const size_t n = std::min<size_t>(8 - in_word, out.size() - i);
    for (size_t k = 0; k < n; ++k) {
      out[i + k] = static_cast<uint8_t>(word >> (8 * (in_word + k)));
    }
    i += n;
  }
}

std::vector<uint8_t> make_payload(uint64_t seed, uint64_t file_off, uint64_t len) {
  std::vector<uint8_t> out(len);
  fill_payload(seed, file_off, out);
  return out;
}

Result<std::vector<ScriptOp>> parse_script(std::string_view text) {
  std::vector<ScriptOp> ops;
  size_t line_no = 0;
  size_t pos = 0;
  auto error = [&](const std::string& what) {
    return Status::invalid_argument("script line " + std::to_string(line_no) + ": " + what);
  };
  while (pos <= text.size()) {
    const size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? text.size() - pos
                                                                           : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;
    auto tokens = tokenize(line);
    if (tokens.empty() || tokens[0][0] == '#') continue;

    ScriptOp op;
    const std::string& verb = tokens[0];
    if (verb == "open") {
      if (tokens.size() != 2) return error("open <name>");
      op.kind = ScriptOp::Kind::kOpen;
      op.name = tokens[1];
    } else if (verb == "write") {
      if (tokens.size() != 5) return error("write <fd> <off|@cur> <len> <seed>");
      op.kind = ScriptOp::Kind::kWrite;
      if (!parse_fd(tokens[1], &op.fd)) return error("bad fd");
      if (tokens[2] == "@cur") {
        op.at_cursor = true;
      } else if (!parse_u64(tokens[2], &op.off)) {
        return error("bad offset");
      }
      if (!parse_u64(tokens[3], &op.len)) return error("bad length");
      if (!parse_u64(tokens[4], &op.seed)) return error("bad seed");
    } else if (verb == "read") {
      if (tokens.size() != 4) return error("read <fd> <off|@cur> <len>");
      op.kind = ScriptOp::Kind::kRead;
      if (!parse_fd(tokens[1], &op.fd)) return error("bad fd");
      if (tokens[2] == "@cur") {
        op.at_cursor = true;
      } else if (!parse_u64(tokens[2], &op.off)) {
        return error("bad offset");
      }
      if (!parse_u64(tokens[3], &op.len)) return error("bad length");
    } else if (verb == "fsync") {
      if (tokens.size() != 2) return error("fsync <fd>");
      op.kind = ScriptOp::Kind::kFsync;
      if (!parse_fd(tokens[1], &op.fd)) return error("bad fd");
    } else if (verb == "close") {
      if (tokens.size() != 2) return error("close <fd>");
      op.kind = ScriptOp::Kind::kClose;
      if (!parse_fd(tokens[1], &op.fd)) return error("bad fd");
    } else if (verb == "unlink") {
      if (tokens.size() != 2) return error("unlink <name>");
      op.kind = ScriptOp::Kind::kUnlink;
      op.name = tokens[1];
    } else if (verb == "rename") {
      if (tokens.size() != 3) return error("rename <a> <b>");
      op.kind = ScriptOp::Kind::kRename;
      op.name = tokens[1];
      op.name2 = tokens[2];
    } else if (verb == "mark") {
      if (tokens.size() != 2) return error("mark <label>");
      op.kind = ScriptOp::Kind::kMark;
      op.label = tokens[1];
    } else {
      return error("unknown op '" + verb + "'");
    }
    ops.push_back(std::move(op));
  }
  return ops;
}

std::string format_script(std::span<const ScriptOp> ops) {
  std::ostringstream out;
  for (const ScriptOp& op : ops) {
    switch (op.kind) {
      case ScriptOp::Kind::kOpen: out << "open " << op.name; break;
      case ScriptOp::Kind::kWrite:
        out << "write " << op.fd << ' ';
        if (op.at_cursor) {
          out << "@cur";
        } else {
          out << op.off;
        }
        out << ' ' << op.len << ' ' << op.seed;
        break;
      case ScriptOp::Kind::kRead:
        out << "read " << op.fd << ' ';
        if (op.at_cursor) {
          out << "@cur";
        } else {
          out << op.off;
        }
        out << ' ' << op.len;
        break;
      case ScriptOp::Kind::kFsync: out << "fsync " << op.fd; break;
      case ScriptOp::Kind::kClose: out << "close " << op.fd; break;
      case ScriptOp::Kind::kUnlink: out << "unlink " << op.name; break;
      case ScriptOp::Kind::kRename: out << "rename " << op.name << ' ' << op.name2; break;
      case ScriptOp::Kind::kMark: out << "mark " << op.label; break;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace pmsplit
