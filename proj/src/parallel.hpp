#pragma once

#include <functional>

namespace fishseg {

// Global worker cap for data-parallel loops. 0 = use all hardware threads.
void set_thread_cap(int n);
int thread_cap();

// Number of workers a loop over `count` items would actually use.
int effective_workers(int count);

// Runs fn(i) for i in [0, count). Work is split into contiguous index blocks,
// one per worker; every reduction stays within a single worker's block or is
// performed by the caller afterwards, so results do not depend on the worker
// count.
void parallel_for(int count, const std::function<void(int)>& fn);

}  // namespace fishseg
