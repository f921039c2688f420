#pragma once

#include <cstddef>
#include <functional>

namespace mgil {

/// Upper bound on worker threads used inside primitives. Defaults to 1, in
/// which case everything runs on the calling thread.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Reads MGIL_THREADS; unset or unparsable leaves the current value.
void configure_threads_from_env();

/// Runs body(i) for i in [0, count). Iterations must write disjoint memory.
/// Work is split into contiguous chunks, so results never depend on
/// scheduling.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace mgil
