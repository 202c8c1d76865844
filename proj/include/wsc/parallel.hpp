#ifndef WSC_PARALLEL_HPP
#define WSC_PARALLEL_HPP

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace wsc {

// Runs fn(i) for i in [0, n). Work items must be independent; results keyed by
// index stay deterministic regardless of scheduling. Serial when the machine
// has a single hardware thread or n is tiny.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         unsigned max_threads = 0) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (max_threads > 0 && max_threads < hw) hw = max_threads;
  if (hw <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(hw, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace wsc

#endif
