#include "cal/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <thread>
#include <vector>

namespace cal {

namespace {
std::atomic<int> g_worker_threads{1};
}

void set_worker_threads(int count) {
  if (count < 1) throw std::invalid_argument("set_worker_threads: count must be >= 1");
  g_worker_threads.store(count);
}

int worker_threads() { return g_worker_threads.load(); }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const int threads = std::min<int>(worker_threads(), static_cast<int>(count));
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace cal
