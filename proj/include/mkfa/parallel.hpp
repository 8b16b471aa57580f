#pragma once

#include <cstdint>
#include <functional>

namespace mkfa {

/// Worker cap for batch-level loops. Defaults to MKFA_THREADS or the
/// hardware concurrency. Results never depend on this value.
int num_threads();
void set_num_threads(int n);

/// Runs body(i) for i in [0, n). Each index must write disjoint memory.
void parallel_for(int64_t n, const std::function<void(int64_t)>& body);

}  // namespace mkfa
