#pragma once

#include <cstddef>
#include <functional>

namespace specmerge {

/// Worker count: SPECMERGE_THREADS if set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n). Each index is handled exactly once; callers
/// write results into per-index slots so the output does not depend on
/// scheduling. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn);

}  // namespace specmerge
