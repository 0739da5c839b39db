// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace pmsplit {

enum class Errc {
  kOk = 0,
  kNotFound,
  kExists,
  kNoSpace,
  kInvalidArgument,
  kBadImage,
  kStale,
  kIo,
};

// Lightweight status for expected runtime conditions (missing names, full
// device, torn images). Programmer errors (device bounds) throw instead.
class Status {
 public:
  Status() : code_(Errc::kOk) {}
  Status(Errc code, std::string msg) : code_(code), msg_(std::move(msg)) {}

  static Status ok() { return Status(); }
  static Status not_found(std::string msg) { return {Errc::kNotFound, std::move(msg)}; }
  static Status exists(std::string msg) { return {Errc::kExists, std::move(msg)}; }
  static Status no_space(std::string msg) { return {Errc::kNoSpace, std::move(msg)}; }
  static Status invalid_argument(std::string msg) { return {Errc::kInvalidArgument, std::move(msg)}; }
  static Status bad_image(std::string msg) { return {Errc::kBadImage, std::move(msg)}; }
  static Status stale(std::string msg) { return {Errc::kStale, std::move(msg)}; }
  static Status io(std::string msg) { return {Errc::kIo, std::move(msg)}; }

  bool is_ok() const { return code_ == Errc::kOk; }
  Errc code() const { return code_; }
  const std::string& message() const { return msg_; }

  std::string to_string() const {
    if (is_ok()) return "ok";
    return std::string(name(code_)) + ": " + msg_;
  }

  static std::string_view name(Errc c) {
    switch (c) {
      case Errc::kOk: return "ok";
      case Errc::kNotFound: return "not-found";
      case Errc::kExists: return "exists";
      case Errc::kNoSpace: return "no-space";
      case Errc::kInvalidArgument: return "invalid-argument";
      case Errc::kBadImage: return "bad-image";
      case Errc::kStale: return "stale";
      case Errc::kIo: return "io";
    }
    return "unknown";
  }

 private:
  Errc code_;
  std::string msg_;
};

template <typename T>
class Result {
 public:
  Result(T value) : value_(std::move(value)) {}              // NOLINT(google-explicit-constructor)
  Result(Status status) : status_(std::move(status)) {}      // NOLINT(google-explicit-constructor)

  bool is_ok() const { return status_.is_ok(); }
  const Status& status() const { return status_; }

  T& value() { return *value_; }
  const T& value() const { return *value_; }
  T take() { return std::move(*value_); }

  T value_or(T fallback) const { return value_ ? *value_ : std::move(fallback); }

 private:
  Status status_;
  std::optional<T> value_;
};

}  // namespace pmsplit
