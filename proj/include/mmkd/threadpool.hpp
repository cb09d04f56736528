#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace mmkd {

// Runs fn(i) for i in [0, n). With threads <= 1 everything runs inline on
// the calling thread. Work items must be independent; callers that reduce
// results do so afterwards in index order, so scheduling never affects
// output bytes.
template <class Fn>
void parallel_for(std::int64_t n, int threads, Fn&& fn) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = static_cast<int>(
      std::min<std::int64_t>(threads, n));
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (auto& t : pool) t.join();
}

}  // namespace mmkd
