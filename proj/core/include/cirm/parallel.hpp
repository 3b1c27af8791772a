#pragma once

#include <cstdint>
#include <functional>

namespace cirm {

// Resolves a requested thread count: values <= 0 mean "auto" (hardware
// concurrency, at least 1).
int resolve_threads(int requested);

// Runs fn(i) for i in [0, n) across `threads` workers using a static
// contiguous partition. Each index runs exactly once; which thread runs it is
// a pure function of (n, threads), so any per-index output written to a
// preallocated slot is identical for every thread count. Exceptions are
// captured and the one thrown by the lowest worker id is rethrown.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn);

}  // namespace cirm
