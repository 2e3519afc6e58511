#pragma once

#include <cstdint>
#include <functional>

namespace divot::kern {

// Worker count: min(hardware_concurrency, DIVOTLAB_THREADS if set). Always >= 1.
int worker_count();

// Runs fn over [0, n) split into contiguous chunks, one chunk per task.
// Chunk boundaries depend only on (n, grain), never on scheduling, and every
// task writes a disjoint output range, so results are identical for any worker
// count. Runs inline when n <= grain or only one worker is available.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace divot::kern
