#pragma once

#include <cstddef>
#include <functional>

namespace asl {

/// Worker count: ASL_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Each index is independent; results must be
/// written to per-index slots so the outcome does not depend on scheduling.
/// The exception from the lowest failing index is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace asl
