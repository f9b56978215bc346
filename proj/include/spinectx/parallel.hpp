#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace spinectx {

/// Process-wide worker count for the compute pool. 1 = fully serial. Every
/// kernel partitions whole output elements with a fixed accumulation order,
/// so this is a throughput knob only; results never change with it.
inline std::atomic<int>& worker_threads() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_worker_threads(int n) { worker_threads().store(n < 1 ? 1 : n); }

/// Static block partition of [0,count) across the worker pool. fn(begin,end)
/// must write only to outputs owned by its range.
inline void parallel_for(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  int threads = worker_threads().load();
  if (threads <= 1 || count <= 1) {
    if (count > 0) fn(0, count);
    return;
  }
  if (threads > count) threads = static_cast<int>(count);
  std::int64_t chunk = (count + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads - 1));
  for (int t = 1; t < threads; ++t) {
    std::int64_t b = t * chunk;
    std::int64_t e = std::min(count, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(count, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace spinectx
