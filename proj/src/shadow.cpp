// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#include "pmsplit/shadow.hpp"

#include <algorithm>

namespace pmsplit {

Status ScriptRunner::step(const ScriptOp& op) {
  last_op_ = LastOp{};
  switch (op.kind) {
    case ScriptOp::Kind::kOpen: {
      auto fd = us_->open(op.name, /*create_if_missing=*/true);
      if (!fd.is_ok()) return fd.status();
      shadow_.open_create(op.name);
      Cursor c;
      c.us_fd = fd.value();
      c.name = op.name;
      fds_.push_back(c);
      break;
    }
    case ScriptOp::Kind::kWrite: {
      if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds_.size()) {
        return Status::invalid_argument("script write: bad fd");
      }
      Cursor& c = fds_[static_cast<size_t>(op.fd)];
      if (c.closed || c.dead) return Status::invalid_argument("script write: dead fd");
      const uint64_t off = op.at_cursor ? c.offset : op.off;
      const std::vector<uint8_t> data = make_payload(op.seed, off, op.len);
      const auto it = shadow_.files.find(c.name);
      const uint64_t old_size = it == shadow_.files.end() ? 0 : it->second.size();
      last_op_ = LastOp{c.name, off, op.len, off + op.len > old_size};
      auto n = us_->pwrite(c.us_fd, off, data);
      if (!n.is_ok()) return n.status();
      shadow_.write(c.name, off, data);
      if (op.at_cursor) c.offset = off + op.len;
      break;
    }
    case ScriptOp::Kind::kRead: {
      if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds_.size()) {
        return Status::invalid_argument("script read: bad fd");
      }
      Cursor& c = fds_[static_cast<size_t>(op.fd)];
      if (c.closed || c.dead) return Status::invalid_argument("script read: dead fd");
      const uint64_t off = op.at_cursor ? c.offset : op.off;
      auto got = us_->pread(c.us_fd, off, op.len);
      if (!got.is_ok()) return got.status();
      if (op.at_cursor) c.offset = off + got.value().size();
      if (options_.compare_reads) {
        const std::vector<uint8_t> want = shadow_.read(c.name, off, op.len);
        if (got.value() != want) {
          ++mismatches_;
          return Status::io("read mismatch against shadow model at '" + c.name + "' offset " +
                            std::to_string(off));
        }
      }
      break;
    }
    case ScriptOp::Kind::kFsync: {
      if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds_.size()) {
        return Status::invalid_argument("script fsync: bad fd");
      }
      Cursor& c = fds_[static_cast<size_t>(op.fd)];
      if (c.closed || c.dead) return Status::invalid_argument("script fsync: dead fd");
      last_op_ = LastOp{c.name, 0, 0, false};
      if (Status st = us_->fsync(c.us_fd); !st.is_ok()) return st;
      shadow_.fsync(c.name);
      break;
    }
    case ScriptOp::Kind::kClose: {
      if (op.fd < 0 || static_cast<size_t>(op.fd) >= fds_.size()) {
        return Status::invalid_argument("script close: bad fd");
      }
      Cursor& c = fds_[static_cast<size_t>(op.fd)];
      if (c.closed) return Status::invalid_argument("script close: closed fd");
      if (Status st = us_->close(c.us_fd); !st.is_ok()) return st;
      c.closed = true;
      break;
    }
    case ScriptOp::Kind::kUnlink: {
      if (Status st = us_->unlink(op.name); !st.is_ok()) return st;
      shadow_.unlink(op.name);
      for (Cursor& c : fds_) {
        if (c.name == op.name) c.dead = true;
      }
      break;
    }
    case ScriptOp::Kind::kRename: {
      if (Status st = us_->rename(op.name, op.name2); !st.is_ok()) return st;
      shadow_.rename(op.name, op.name2);
      for (Cursor& c : fds_) {
        if (c.name == op.name2) c.dead = true;  // displaced file
      }
      for (Cursor& c : fds_) {
        if (c.name == op.name && !c.dead) c.name = op.name2;
      }
      break;
    }
    case ScriptOp::Kind::kMark:
      break;
  }

  if (options_.compare_sizes) {
    for (const Cursor& c : fds_) {
      if (c.closed || c.dead) continue;
      auto st = us_->stat(c.us_fd);
      if (!st.is_ok()) return st.status();
      auto it = shadow_.files.find(c.name);
      const uint64_t want = it == shadow_.files.end() ? 0 : it->second.size();
      if (st.value().size != want) {
        ++mismatches_;
        return Status::io("size mismatch against shadow model at '" + c.name + "': " +
                          std::to_string(st.value().size) + " vs " + std::to_string(want));
      }
    }
  }
  return Status::ok();
}

Status ScriptRunner::run(std::span<const ScriptOp> ops) {
  for (const ScriptOp& op : ops) {
    if (Status st = step(op); !st.is_ok()) return st;
  }
  return Status::ok();
}

Status ScriptRunner::compare_all() {
  for (const auto& [name, want] : shadow_.files) {
    auto fd = us_->open(name, /*create_if_missing=*/false);
    if (!fd.is_ok()) return fd.status();
    auto got = us_->pread(fd.value(), 0, want.size() + 1);
    Status close_st = us_->close(fd.value());
    if (!got.is_ok()) return got.status();
    if (!close_st.is_ok()) return close_st;
    if (got.value() != want) {
      ++mismatches_;
      return Status::io("content mismatch against shadow model for '" + name + "'");
    }
  }
  return Status::ok();
}

}  // namespace pmsplit
