#pragma once

#include <cstdint>
#include <functional>

namespace climb {

// Process-wide worker pool for data-parallel kernels. Work is split into
// contiguous index ranges, one per worker; every output element is written by
// exactly one worker and each element's reduction stays serial, so results
// are bit-identical for any thread count. Default is one thread; the CLI
// --threads flag raises it.
class ThreadPool {
 public:
  static ThreadPool& instance();

  void set_num_threads(int n);
  int num_threads() const;

  // Runs body(begin, end) over a partition of [0, n). Executes inline when
  // the pool has a single thread or the range is small.
  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

 private:
  ThreadPool() = default;
};

// Convenience wrapper over the singleton.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  ThreadPool::instance().parallel_for(n, body);
}

}  // namespace climb
