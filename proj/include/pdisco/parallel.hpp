#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace pdisco {

// Worker budget: hardware concurrency, optionally capped by PDISCO_THREADS.
inline int worker_count(int requested = 0) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("PDISCO_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1 && cap < n) n = cap;
  }
  return n;
}

// Strided fan-out over [0, n). Each index is processed by exactly one worker
// and workers write to disjoint slots, so results do not depend on the thread
// count; reductions stay with the caller, in index order.
template <typename F>
void parallel_for(int n, int threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int t = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(t));
  for (int w = 0; w < t; ++w)
    pool.emplace_back([w, t, n, &fn] {
      for (int i = w; i < n; i += t) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

}  // namespace pdisco
