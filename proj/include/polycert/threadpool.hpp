// threadpool.hpp — static contiguous row partitioning across worker threads.
// Rows are independent units of work; callers only write disjoint per-row
// state, so results are bit-identical for any worker count by construction.

#pragma once

#include <algorithm>
#include <thread>
#include <vector>

namespace polycert {

// fn(worker_index, begin, end) over [0, n) split into at most `workers`
// contiguous ranges. workers <= 1 runs inline with no thread spawn.
template <class F>
void parallel_for(int n, int workers, F&& fn) {
  if (n <= 0) return;
  const int w = std::max(1, std::min(workers, n));
  if (w == 1) {
    fn(0, 0, n);
    return;
  }
  const int chunk = (n + w - 1) / w;
  std::vector<std::thread> threads;
  threads.reserve(w - 1);
  for (int i = 1; i < w; ++i) {
    const int b = i * chunk;
    const int e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&fn, i, b, e] { fn(i, b, e); });
  }
  fn(0, 0, std::min(chunk, n));
  for (auto& t : threads) t.join();
}

}  // namespace polycert
