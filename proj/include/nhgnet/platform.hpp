#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nhgnet {

/// Keeps large activation buffers in the heap instead of fresh mmap pages,
/// which otherwise dominate the cost of a training step. No-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace nhgnet
