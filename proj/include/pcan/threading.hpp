#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace pcan {

// Runs fn(i) for i in [0, n). With n_threads <= 1 the calls happen inline on
// the calling thread; otherwise contiguous index blocks go to worker threads.
// Callers that need deterministic output must not let fn write shared state
// in iteration order — accumulate per-index results and reduce afterwards.
inline void parallel_for(std::size_t n, std::size_t n_threads,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (n_threads <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = n_threads < n ? n_threads : n;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    if (lo >= n) break;
    const std::size_t hi = lo + chunk < n ? lo + chunk : n;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace pcan
