#pragma once

#include <cstddef>
#include <functional>

namespace cunet {

// Worker count: CUNET_THREADS when set and positive, else the hardware count.
int worker_count();
void set_worker_count(int n);

// Runs body(i) for i in [0, n). Each index is handled by exactly one worker,
// so bodies that write only index-owned outputs stay deterministic.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace cunet
