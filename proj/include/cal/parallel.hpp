#pragma once

#include <cstddef>
#include <functional>

namespace cal {

// Process-wide cap on worker threads for the embarrassingly parallel stages
// (sample generation). Results are written by index and every sample derives
// its own RNG stream, so parallel and serial runs are bit-identical.
void set_worker_threads(int count);
int worker_threads();

// Runs fn(i) for i in [0, count). Uses worker_threads() threads when the
// range is large enough, otherwise stays serial.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace cal
