#pragma once

#include <cstddef>
#include <functional>

namespace mpiforge {

// Worker count used by the compute kernels. Defaults to the MPIFORGE_THREADS
// environment variable when set, otherwise 1.
int thread_count();
void set_thread_count(int n);

// Runs fn(i) for i in [begin, end). Iterations are split into contiguous
// chunks, one per worker. Each index is processed exactly once, so kernels that
// write disjoint outputs per index are schedule-independent.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn);

}  // namespace mpiforge
