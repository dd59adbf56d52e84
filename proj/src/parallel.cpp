#include "ufm/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace ufm {

namespace {
std::atomic<int> g_max_threads{1};
thread_local bool t_in_worker = false;
}  // namespace

void set_max_threads(int count) { g_max_threads = std::max(1, count); }

int max_threads() { return g_max_threads; }

void parallel_for(Index n, const std::function<void(Index)>& fn) {
  const Index workers = std::min<Index>(g_max_threads, n);
  if (workers <= 1 || t_in_worker) {
    for (Index k = 0; k < n; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (Index w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      t_in_worker = true;
      const Index begin = n * w / workers;
      const Index end = n * (w + 1) / workers;
      try {
        for (Index k = begin; k < end; ++k) fn(k);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
      t_in_worker = false;
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace ufm
