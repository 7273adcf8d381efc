#pragma once

#include <cstddef>
#include <functional>

namespace mic {

/// Worker cap from MIC_THREADS (>= 1), defaulting to 1 when unset or invalid.
std::size_t max_threads();

/// Calls fn(i) for i in [0, n) across up to max_threads() workers. Each index
/// is handled by exactly one worker; the first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mic
