// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace graphfree {

/// Keeps large short-lived tensors on the heap instead of fresh mmap pages.
/// Training allocates the same multi-megabyte buffers every step, and the
/// default glibc thresholds return them to the kernel each time. No-op on
/// other allocators. Call once from main().
void tune_allocator() noexcept;

} // namespace graphfree
