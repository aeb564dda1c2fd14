// Process-level settings for training binaries.
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cbre {

// Keeps freed heap memory mapped. Training allocates and frees many
// same-sized matrices per step; returning them to the kernel each time
// costs a page fault per reallocation.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace cbre
