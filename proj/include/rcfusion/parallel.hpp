// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace rcf {

namespace detail {
inline std::size_t& thread_count() {
  static std::size_t count = 1;
  return count;
}
}  // namespace detail

/// Worker threads used by the convolution and matmul kernels. Each output
/// element is always produced by exactly one worker in a fixed order, so
/// results do not depend on this setting.
inline void set_num_threads(std::size_t n) { detail::thread_count() = std::max<std::size_t>(1, n); }
inline std::size_t num_threads() { return detail::thread_count(); }

/// Runs fn(i) for i in [0, n), partitioned into contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
}

}  // namespace rcf
