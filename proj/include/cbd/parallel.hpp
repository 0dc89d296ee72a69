#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace cbd {

// Process-wide worker count for read-only parallel sections (inference jobs).
// All mutating paths stay single-threaded, so results never depend on this.
int parallel_threads();
void set_parallel_threads(int n);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is partitioned
// by index, so output written to disjoint slots is deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, int threads = 0);

}  // namespace cbd
