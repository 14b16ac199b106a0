#pragma once

#include <cstddef>
#include <functional>

namespace factrace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// executed exactly once; callers write results into per-index slots and
// reduce afterwards in index order. Rethrows the first exception.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace factrace
