#include "cunet/parallel.hpp"

#include <cstdlib>
#include <string>
#include <thread>

#ifdef CUNET_HAVE_OPENMP
#include <omp.h>
#endif

namespace cunet {

namespace {

int initial_worker_count() {
  if (const char* env = std::getenv("CUNET_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int& worker_slot() {
  static int n = initial_worker_count();
  return n;
}

}  // namespace

int worker_count() { return worker_slot(); }

void set_worker_count(int n) { worker_slot() = n > 0 ? n : 1; }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
#ifdef CUNET_HAVE_OPENMP
  const int workers = worker_count();
  if (workers > 1 && n > 1) {
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(workers)
    for (long long i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) body(i);
}

}  // namespace cunet
