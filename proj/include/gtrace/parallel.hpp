// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace gtrace {

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n ? int(n) : 1;
}

// Chunked parallel loop over [0, n). threads <= 1 runs inline on the calling
// thread, which is the deterministic sequential mode used by tests.
template <typename F>
void parallel_for(size_t n, int threads, F&& f) {
  if (n == 0) return;
  if (threads <= 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) f(i);
    return;
  }
  size_t nthreads = std::min<size_t>(size_t(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  size_t chunk = (n + nthreads - 1) / nthreads;
  for (size_t t = 0; t < nthreads; ++t) {
    size_t lo = t * chunk;
    size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f] {
      for (size_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Variant passing the worker index, for per-thread accumulation buffers.
template <typename F>
void parallel_for_workers(size_t n, int threads, F&& f) {
  if (n == 0) return;
  if (threads <= 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) f(0, i);
    return;
  }
  size_t nthreads = std::min<size_t>(size_t(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  size_t chunk = (n + nthreads - 1) / nthreads;
  for (size_t t = 0; t < nthreads; ++t) {
    size_t lo = t * chunk;
    size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([t, lo, hi, &f] {
      for (size_t i = lo; i < hi; ++i) f(int(t), i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace gtrace
