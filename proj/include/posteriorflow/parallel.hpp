#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace posteriorflow {

/// Worker cap from POSTERIORFLOW_THREADS; unset or 0 means hardware
/// concurrency.
inline unsigned thread_count() {
  static const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("POSTERIORFLOW_THREADS");
  if (env == nullptr || *env == '\0') return hw;
  char* end = nullptr;
  const long requested = std::strtol(env, &end, 10);
  if (end == env || requested < 0) return hw;
  if (requested == 0) return hw;
  return static_cast<unsigned>(requested);
}

namespace detail {
inline thread_local bool in_worker = false;
}  // namespace detail

/// Runs body(i) for i in [0, n) over a static partition into contiguous
/// blocks. Each index is processed by exactly one worker, so any body that
/// writes only to slot i gives the same result for every thread count.
/// Calls made from inside a worker run serially.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t min_per_worker = 16) {
  unsigned workers = detail::in_worker ? 1u : thread_count();
  if (min_per_worker > 0) {
    workers = static_cast<unsigned>(
        std::min<std::size_t>(workers, std::max<std::size_t>(1, n / min_per_worker)));
  }
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, w, begin, end] {
      detail::in_worker = true;
      try {
        for (std::size_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace posteriorflow
