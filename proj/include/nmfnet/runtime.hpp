#pragma once

#include <malloc.h>

namespace nmfnet {

/// Keeps large activation buffers on the heap and stops glibc from handing
/// freed memory back after every step. Without this each training step
/// re-faults hundreds of megabytes of fresh pages.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
}

}  // namespace nmfnet
