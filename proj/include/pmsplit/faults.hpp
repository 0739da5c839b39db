// Copyright (c) 2026 The pmsplit Authors.
// Use of this source code is governed by an Apache-2.0 license that can be
// found in the LICENSE file.

#pragma once

namespace pmsplit {

// Switchable correctness faults for checker-sensitivity (mutation) testing.
// All default off; the crash checker must flag each one when enabled.
struct FaultInjection {
  bool skip_journal_commit = false;  // journal txns omit the commit record
  bool skip_log_fence = false;       // operation-log appends omit their fence
  bool skip_relink_dealloc = false;  // relink leaks the replaced dst blocks
};

}  // namespace pmsplit
