#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace ect {

int thread_count();
void set_thread_count(int n);

// Runs fn(chunk_index, begin, end) over a fixed partition of [0, n) into
// `chunks` pieces. The partition depends only on n and `chunks`, never on the
// number of worker threads, so reductions summed in chunk order are
// reproducible across thread counts.
void parallel_chunks(std::int64_t n, int chunks,
                     const std::function<void(int, std::int64_t, std::int64_t)>& fn);

// Convenience: parallel loop body over [0, n) with the default chunk count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

// Fixed chunk count used for deterministic gradient reductions.
inline constexpr int kReductionChunks = 8;

}  // namespace ect
