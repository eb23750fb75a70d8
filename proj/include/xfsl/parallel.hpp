#pragma once

#include <cstddef>
#include <functional>

namespace xfsl {

// Worker count: XFSL_THREADS when set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t thread_count();

// Runs fn(i) for i in [0, n) on up to thread_count() threads. Each index is
// visited exactly once; fn must only write to per-index state. The first
// exception thrown by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace xfsl
