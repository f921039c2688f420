#include "mgil/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mgil {

namespace {
std::atomic<std::size_t> g_threads{1};
}

std::size_t thread_count() { return g_threads.load(std::memory_order_relaxed); }

void set_thread_count(std::size_t n) { g_threads.store(std::max<std::size_t>(1, n), std::memory_order_relaxed); }

void configure_threads_from_env() {
  const char* env = std::getenv("MGIL_THREADS");
  if (env == nullptr) return;
  try {
    const long v = std::stol(env);
    if (v >= 1) set_thread_count(static_cast<std::size_t>(v));
  } catch (const std::exception&) {
  }
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min(thread_count(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  const std::size_t chunk = (count + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    pool.emplace_back([&body, begin, end] {
      for (std::size_t i = begin; i < end; ++i) body(i);
    });
  }
  for (std::size_t i = 0; i < std::min(count, chunk); ++i) body(i);
}

}  // namespace mgil
