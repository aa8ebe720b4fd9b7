#include "climb/thread_pool.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace climb {

namespace {
std::atomic<int> g_num_threads{1};
}

ThreadPool& ThreadPool::instance() {
  static ThreadPool pool;
  return pool;
}

void ThreadPool::set_num_threads(int n) {
  g_num_threads.store(std::max(1, n));
}

int ThreadPool::num_threads() const { return g_num_threads.load(); }

void ThreadPool::parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int threads = g_num_threads.load();
  // Small ranges are not worth the thread launch.
  if (threads <= 1 || n < 4096) {
    body(0, n);
    return;
  }
  int64_t workers = std::min<int64_t>(threads, n);
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> crew;
  crew.reserve(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w) {
    int64_t begin = w * chunk;
    int64_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    crew.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& t : crew) t.join();
}

}  // namespace climb
