#pragma once

#include <cstddef>
#include <functional>

namespace emd {

/// Process-wide cap on worker threads; 1 disables parallelism.
void set_thread_count(int n);
int thread_count();

/// Runs body(i) for i in [0, n). Work is split into contiguous chunks, so any
/// per-index results written by body are independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace emd
