#pragma once

// Process-level tuning shared by the command-line tools.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cam {

/// Keeps large temporary matrices on the heap instead of fresh mmap/munmap
/// pairs; training allocates many short-lived blocks just above glibc's
/// default mmap threshold.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace cam
