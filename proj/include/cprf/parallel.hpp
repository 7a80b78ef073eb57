#pragma once
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace cprf {

/// Worker count from CPRF_WORKERS, else hardware concurrency (at least 1).
unsigned default_workers();

/// Runs fn(i) for i in [0, count) on up to `workers` threads (0 = default).
/// Indices are handed out in contiguous blocks; fn must only write to
/// index-owned state. The first exception (lowest index) is rethrown.
void parallel_for(std::size_t count, unsigned workers,
                  const std::function<void(std::size_t)>& fn);

} // namespace cprf
