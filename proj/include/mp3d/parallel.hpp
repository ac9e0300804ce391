#pragma once

#include <cstdint>
#include <functional>

namespace mp3d {

/// Worker count: hardware concurrency capped by MP3D_NUM_THREADS.
int num_threads();

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunks write disjoint
/// outputs, so results do not depend on the thread count.
void parallel_for(std::int64_t n, std::int64_t min_chunk, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace mp3d
