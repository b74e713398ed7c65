// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace d2mlp {

namespace detail {
inline std::atomic<std::size_t>& thread_count_ref() {
  static std::atomic<std::size_t> count{1};
  return count;
}
}  // namespace detail

inline void set_thread_count(std::size_t n) { detail::thread_count_ref() = std::max<std::size_t>(n, 1); }
inline std::size_t thread_count() { return detail::thread_count_ref(); }

// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread and
// every reduction stays inside fn, so results do not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  const std::size_t threads = std::min(thread_count(), n);
  if (threads <= 1 || n * work_per_item < (std::size_t{1} << 15)) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace d2mlp
