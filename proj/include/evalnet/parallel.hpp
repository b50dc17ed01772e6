#pragma once

#include <cstddef>
#include <functional>

namespace evalnet {

// Number of worker threads: min(EVALNET_THREADS, hardware_concurrency),
// at least 1. Read once per process.
int worker_count();

// Static block partition of [0, n) across workers. Each index is processed
// exactly once by exactly one thread, so results are identical for any
// worker count as long as tasks write disjoint outputs and keep their own
// accumulation order. Runs inline when a single worker suffices.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace evalnet
